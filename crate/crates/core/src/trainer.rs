//! ADAM training of the estimator and calibrator on random crops.

use std::io::Write;
use std::path::PathBuf;

use log::{debug, warn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvVars, Graph, Var};
use crate::checkpoint::save_weights;
use crate::error::{Result, SciError};
use crate::imaging::ImageBuffer;
use crate::losses::{record_loss, LossBreakdown, LossConfig, StageLossInputs};
use crate::model::{record_cascade, CascadeMode, EstimatorArch, ModelWeights, DEFAULT_INIT_STD};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Side of the square training crops.
    pub patch: usize,
    pub seed: u64,
    pub arch: EstimatorArch,
    pub loss: LossConfig,
    pub mode: CascadeMode,
    /// Standard deviation of the initial kernels.
    pub init_std: f64,
    /// Epochs between checkpoint writes; the final epoch is always written.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 8,
            epochs: 1000,
            patch: 128,
            seed: 0,
            arch: EstimatorArch::default(),
            loss: LossConfig::default(),
            mode: CascadeMode::Full,
            init_std: DEFAULT_INIT_STD,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("init_std", self.init_std),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SciError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(SciError::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.batch < 1 {
            return Err(SciError::Config("batch must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(SciError::Config("epochs must be at least 1".into()));
        }
        if self.checkpoint_every < 1 {
            return Err(SciError::Config("checkpoint_every must be at least 1".into()));
        }
        if self.patch < self.loss.window {
            return Err(SciError::Config(format!(
                "patch {} is smaller than the {}x{} smoothness window",
                self.patch, self.loss.window, self.loss.window
            )));
        }
        self.arch.validate()?;
        self.loss.validate()
    }
}

/// First and second moment estimates of ADAM, one slot per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// A named, mutable view of one parameter tensor.
pub struct ParamSlot<'a> {
    pub name: String,
    pub values: &'a mut [f32],
}

/// One bias-corrected ADAM update of every slot.
///
/// A non-finite gradient aborts before any parameter is touched.
pub fn adam_step(
    params: &mut [ParamSlot<'_>],
    grads: &[&[f32]],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(SciError::shape(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} state slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.values.len() != g.len() {
            return Err(SciError::shape("adam_step", format!("gradient size for {}", p.name)));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(SciError::NonFiniteGradient {
                param: p.name.clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            let gj = g[j] as f64;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            let update = config.lr * m_hat / (v_hat.sqrt() + config.eps);
            p.values[j] = (p.values[j] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Mutable views of every parameter tensor in a fixed order: estimator layers
/// (kernel, bias), then calibrator layers.
pub fn param_slots(weights: &mut ModelWeights) -> Vec<ParamSlot<'_>> {
    let mut out = Vec::new();
    for (group, layers) in [
        ("estimator", &mut weights.estimator),
        ("calibrator", &mut weights.calibrator),
    ] {
        for (i, layer) in layers.iter_mut().enumerate() {
            out.push(ParamSlot {
                name: format!("{group}.{i}.kernel"),
                values: layer.kernel.data_mut(),
            });
            out.push(ParamSlot {
                name: format!("{group}.{i}.bias"),
                values: &mut layer.bias,
            });
        }
    }
    out
}

/// Top-left corner of one training crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub image: usize,
    pub x: usize,
    pub y: usize,
}

/// Indices of corpus images large enough for `patch × patch` crops.
fn usable_images(corpus: &[ImageBuffer], patch: usize) -> Result<Vec<usize>> {
    if corpus.is_empty() {
        return Err(SciError::Input("training corpus is empty".into()));
    }
    let usable: Vec<usize> = corpus
        .iter()
        .enumerate()
        .filter(|(i, img)| {
            let ok = img.width >= patch && img.height >= patch;
            if !ok {
                warn!(
                    "skipping image {} ({}x{}) smaller than the {patch}px patch",
                    img.source.as_ref().map_or_else(|| i.to_string(), |p| p.display().to_string()),
                    img.width,
                    img.height
                );
            }
            ok
        })
        .map(|(i, _)| i)
        .collect();
    if usable.is_empty() {
        return Err(SciError::Input(format!(
            "no corpus image is at least {patch}x{patch}"
        )));
    }
    Ok(usable)
}

/// Draws `count` crop positions, each fully inside its image.
pub fn sample_crops(
    corpus: &[ImageBuffer],
    patch: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Crop>> {
    let usable = usable_images(corpus, patch)?;
    Ok((0..count)
        .map(|_| {
            let image = usable[rng.random_range(0..usable.len())];
            let img = &corpus[image];
            Crop {
                image,
                x: rng.random_range(0..=img.width - patch),
                y: rng.random_range(0..=img.height - patch),
            }
        })
        .collect())
}

/// A `batch × 3 × patch × patch` tensor of random crops.
pub fn sample_batch(
    corpus: &[ImageBuffer],
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let crops = sample_crops(corpus, config.patch, config.batch, rng)?;
    let items = crops
        .iter()
        .map(|c| {
            let img = corpus[c.image].crop(c.x, c.y, config.patch, config.patch)?;
            Ok(img.to_rgb().to_tensor::<f32>())
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// One optimisation step's graph handles.
struct StepVars {
    estimator: Vec<ConvVars>,
    calibrator: Vec<ConvVars>,
    total: Var,
}

/// Records the cascade and objective for `batch` with every parameter as a
/// graph leaf, and returns the loss breakdown.
fn record_step(
    graph: &mut Graph,
    batch: &Tensor,
    weights: &ModelWeights,
    config: &TrainConfig,
) -> Result<(StepVars, LossBreakdown)> {
    let y = graph.constant(batch.clone());
    let estimator: Vec<ConvVars> = weights.estimator.iter().map(|l| graph.conv_parameters(l)).collect();
    let calibrator: Vec<ConvVars> = weights.calibrator.iter().map(|l| graph.conv_parameters(l)).collect();
    let stages = record_cascade(graph, y, &estimator, &calibrator, config.arch.stages, config.mode)?;
    let inputs: Vec<StageLossInputs> = stages
        .iter()
        .map(|s| StageLossInputs {
            illumination: s.illumination,
            target: s.target,
        })
        .collect();
    let loss = record_loss(graph, &inputs, &config.loss)?;
    let breakdown = loss.breakdown(graph);
    Ok((
        StepVars {
            estimator,
            calibrator,
            total: loss.total,
        },
        breakdown,
    ))
}

/// Cascade + objective + backward for one batch. Returns the loss and the
/// gradient of every parameter tensor in [`param_slots`] order.
pub fn loss_and_gradients(
    batch: &Tensor,
    weights: &ModelWeights,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut graph = Graph::new();
    let (vars, breakdown) = record_step(&mut graph, batch, weights, config)?;
    let grads = graph.backward(vars.total)?;
    let mut out = Vec::new();
    for layer in vars.estimator.iter().chain(&vars.calibrator) {
        out.push(grads.wrt(&graph, layer.kernel));
        // bias leaves are (1, c_out, 1, 1); slots are flat
        out.push(grads.wrt(&graph, layer.bias));
    }
    Ok((breakdown, out))
}

/// Per-epoch mean of the batch losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossBreakdown,
}

pub const LOSS_LOG_HEADER: &str = "epoch,fidelity,smoothness,total";

pub fn write_loss_log(log: &[EpochLog], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{LOSS_LOG_HEADER}")?;
    for e in log {
        writeln!(
            out,
            "{},{},{},{}",
            e.epoch, e.loss.fidelity, e.loss.smoothness, e.loss.total
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub log: Vec<EpochLog>,
}

/// Where and how often [`train`] persists weights.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPolicy {
    pub path: Option<PathBuf>,
}

/// Batches per epoch: enough crops to cover the usable corpus once.
pub fn batches_per_epoch(usable_images: usize, batch: usize) -> usize {
    usable_images.div_ceil(batch).max(1)
}

/// Runs `epochs × batches` steps of cascade → loss → backward → ADAM.
///
/// Gradients of the shared estimator sum the contributions of all stages.
/// On a non-finite loss the run stops with [`SciError::Diverged`]; when a
/// checkpoint path is set it holds the last weights whose epoch was finite.
pub fn train(
    corpus: &[ImageBuffer],
    config: &TrainConfig,
    checkpoints: &CheckpointPolicy,
) -> Result<TrainOutcome> {
    config.validate()?;
    let usable = usable_images(corpus, config.patch)?;
    let batches = batches_per_epoch(usable.len(), config.batch);

    let mut weights = ModelWeights::random(config.arch.clone(), config.seed, config.init_std)?;
    let mut state = AdamState::new(param_slots(&mut weights).iter().map(|s| s.values.len()));
    // crops draw from their own stream so the initial weights do not depend on it
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5c1_5eed));
    let mut log = Vec::with_capacity(config.epochs);
    let mut last_good = weights.clone();

    for epoch in 1..=config.epochs {
        let mut fidelity = 0.0;
        let mut smoothness = 0.0;
        for _ in 0..batches {
            let batch = sample_batch(corpus, config, &mut rng)?;
            let (loss, grads) = loss_and_gradients(&batch, &weights, config)?;
            if !loss.is_finite() {
                return Err(diverged(epoch, &last_good, checkpoints));
            }
            fidelity += loss.fidelity;
            smoothness += loss.smoothness;
            let grad_slices: Vec<&[f32]> = grads.iter().map(|g| g.data()).collect();
            let mut slots = param_slots(&mut weights);
            adam_step(&mut slots, &grad_slices, &mut state, config)?;
        }
        let fidelity = fidelity / batches as f64;
        let smoothness = smoothness / batches as f64;
        let loss = LossBreakdown {
            fidelity,
            smoothness,
            total: config.loss.alpha * fidelity + config.loss.beta * smoothness,
        };
        if !loss.is_finite() || !weights.all_finite() {
            return Err(diverged(epoch, &last_good, checkpoints));
        }
        debug!("epoch {epoch}: {loss:?}");
        log.push(EpochLog { epoch, loss });
        last_good.clone_from(&weights);
        if let Some(path) = &checkpoints.path {
            if epoch % config.checkpoint_every == 0 || epoch == config.epochs {
                save_weights(&weights, path)?;
            }
        }
    }
    Ok(TrainOutcome { weights, log })
}

fn diverged(epoch: usize, last_good: &ModelWeights, checkpoints: &CheckpointPolicy) -> SciError {
    if let Some(path) = &checkpoints.path {
        if let Err(e) = save_weights(last_good, path) {
            warn!("could not write last good checkpoint: {e}");
        }
    }
    SciError::Diverged { epoch }
}
