//! Weight-shared illumination cascade with a self-calibrated input module.
//!
//! Training unrolls `T` stages that all reuse one estimator `H` and one
//! calibrator `K`:
//!
//! ```text
//! stage 0:  v⁰ = y
//! stage t:  zᵗ = y ⊘ xᵗ,  sᵗ = K(zᵗ),  vᵗ = clamp(y + sᵗ, 0, 1)      (t ≥ 1)
//!           uᵗ = H(vᵗ),   xᵗ⁺¹ = clamp(vᵗ + uᵗ, 1e-4, 1)
//! ```
//!
//! Inference runs stage 0 alone and returns `z = y ⊘ x¹`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ConvVars, Graph, Var};
use crate::error::{Result, SciError};
use crate::ops::ConvParams;
use crate::tensor::{Real, Tensor};

/// Lower bound of every illumination map.
pub const ILLUMINATION_FLOOR: f64 = 1e-4;

/// Channel sequence of the calibration network `K`.
pub const CALIBRATOR_CHANNELS: [usize; 5] = [3, 16, 16, 16, 3];

/// Standard deviation of the Gaussian kernel initialisation.
pub const DEFAULT_INIT_STD: f64 = 0.02;

/// Layout of the illumination estimator and the number of training stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EstimatorArch {
    /// Channel counts between layers, e.g. `[3, 3, 3, 3]` for three 3×3 convolutions.
    pub channels: Vec<usize>,
    /// Number of unrolled training stages `T`.
    pub stages: usize,
}

impl Default for EstimatorArch {
    fn default() -> Self {
        Self {
            channels: vec![3, 3, 3, 3],
            stages: 3,
        }
    }
}

impl EstimatorArch {
    pub fn new(channels: Vec<usize>, stages: usize) -> Result<Self> {
        let arch = Self { channels, stages };
        arch.validate()?;
        Ok(arch)
    }

    /// `blocks` convolutions of width `width` between RGB input and output.
    pub fn uniform(blocks: usize, width: usize, stages: usize) -> Result<Self> {
        let mut channels = vec![width; blocks + 1];
        if let Some(first) = channels.first_mut() {
            *first = 3;
        }
        if let Some(last) = channels.last_mut() {
            *last = 3;
        }
        Self::new(channels, stages)
    }

    /// Number of convolution layers in the estimator.
    pub fn blocks(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(SciError::Config("estimator needs at least one layer".into()));
        }
        if self.channels[0] != 3 || *self.channels.last().unwrap() != 3 {
            return Err(SciError::Config(format!(
                "estimator channels must start and end with 3, got {}",
                format_channels(&self.channels)
            )));
        }
        if self.channels.contains(&0) {
            return Err(SciError::Config("channel counts must be positive".into()));
        }
        if self.stages < 1 {
            return Err(SciError::Config("stage count must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn format_channels(channels: &[usize]) -> String {
    channels
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

/// Parses a channel sequence written as `3-3-3-3`.
pub fn parse_channels(s: &str) -> Result<Vec<usize>> {
    s.split('-')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| SciError::Config(format!("bad channel list `{s}`")))
        })
        .collect()
}

/// How each stage turns its input into illumination, and what feeds the next stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CascadeMode {
    /// Residual estimation with self-calibrated stage inputs.
    #[default]
    Full,
    /// Residual estimation, each stage fed the previous illumination.
    ResidualNoCalibration,
    /// The estimator outputs the illumination itself; no calibration.
    Direct,
}

impl CascadeMode {
    pub fn name(self) -> &'static str {
        match self {
            CascadeMode::Full => "full",
            CascadeMode::ResidualNoCalibration => "residual-nocal",
            CascadeMode::Direct => "direct",
        }
    }
}

impl std::str::FromStr for CascadeMode {
    type Err = SciError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CascadeMode::Full),
            "residual-nocal" => Ok(CascadeMode::ResidualNoCalibration),
            "direct" => Ok(CascadeMode::Direct),
            other => Err(SciError::Config(format!(
                "unknown mode `{other}` (expected direct, residual-nocal or full)"
            ))),
        }
    }
}

/// Parameters of the estimator (`theta`, shared by every stage) and the
/// calibrator (`vartheta`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<R: Real = f32> {
    pub arch: EstimatorArch,
    pub estimator: Vec<ConvParams<R>>,
    pub calibrator: Vec<ConvParams<R>>,
}

fn zero_stack<R: Real>(channels: &[usize]) -> Vec<ConvParams<R>> {
    channels
        .windows(2)
        .map(|p| ConvParams::zeros(p[1], p[0]))
        .collect()
}

fn random_stack<R: Real>(channels: &[usize], std: f64, rng: &mut impl Rng) -> Vec<ConvParams<R>> {
    let normal = Normal::new(0.0, std).expect("finite std");
    channels
        .windows(2)
        .map(|p| {
            let mut layer = ConvParams::zeros(p[1], p[0]);
            for v in layer.kernel.data_mut() {
                *v = R::from_f64(normal.sample(rng));
            }
            layer
        })
        .collect()
}

impl<R: Real> ModelWeights<R> {
    /// All-zero estimator and calibrator.
    pub fn zeros(arch: EstimatorArch) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            estimator: zero_stack(&arch.channels),
            calibrator: zero_stack(&CALIBRATOR_CHANNELS),
            arch,
        })
    }

    /// Gaussian kernels with standard deviation `std`, zero biases.
    pub fn random(arch: EstimatorArch, seed: u64, std: f64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            estimator: random_stack(&arch.channels, std, &mut rng),
            calibrator: random_stack(&CALIBRATOR_CHANNELS, std, &mut rng),
            arch,
        })
    }

    pub fn cast<S: Real>(&self) -> ModelWeights<S> {
        ModelWeights {
            arch: self.arch.clone(),
            estimator: self.estimator.iter().map(ConvParams::cast).collect(),
            calibrator: self.calibrator.iter().map(ConvParams::cast).collect(),
        }
    }

    /// Checks that the layer shapes chain as the architecture describes.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        check_stack("estimator", &self.estimator, &self.arch.channels)?;
        check_stack("calibrator", &self.calibrator, &CALIBRATOR_CHANNELS)
    }

    pub fn all_finite(&self) -> bool {
        self.estimator
            .iter()
            .chain(&self.calibrator)
            .all(|l| l.kernel.all_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

fn check_stack<R: Real>(name: &str, layers: &[ConvParams<R>], channels: &[usize]) -> Result<()> {
    if layers.len() + 1 != channels.len() {
        return Err(SciError::ArchMismatch(format!(
            "{name} has {} layers, architecture {} needs {}",
            layers.len(),
            format_channels(channels),
            channels.len() - 1
        )));
    }
    for (i, (layer, pair)) in layers.iter().zip(channels.windows(2)).enumerate() {
        if layer.c_in() != pair[0] || layer.c_out() != pair[1] {
            return Err(SciError::ArchMismatch(format!(
                "{name} layer {i} is {}->{}, expected {}->{}",
                layer.c_in(),
                layer.c_out(),
                pair[0],
                pair[1]
            )));
        }
    }
    Ok(())
}

/// Parameter count (kernels plus biases) of the estimator that runs at inference.
pub fn count_params<R: Real>(weights: &ModelWeights<R>) -> usize {
    weights.estimator.iter().map(ConvParams::param_count).sum()
}

/// Parameter count of the calibrator, which only exists during training.
pub fn count_calibrator_params<R: Real>(weights: &ModelWeights<R>) -> usize {
    weights.calibrator.iter().map(ConvParams::param_count).sum()
}

/// Multiply-accumulates of one single-stage inference at `height × width`.
pub fn count_macs(arch: &EstimatorArch, height: usize, width: usize) -> u64 {
    arch.channels
        .windows(2)
        .map(|p| 9 * p[0] as u64 * p[1] as u64 * height as u64 * width as u64)
        .sum()
}

/// One stage of a recorded cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord<R: Real = f32> {
    /// Stage input `vᵗ`.
    pub input: Tensor<R>,
    /// Estimator output `uᵗ` (the illumination itself in direct mode).
    pub residual: Tensor<R>,
    /// Stage output `xᵗ⁺¹`.
    pub illumination: Tensor<R>,
    /// `zᵗ = y ⊘ xᵗ`; only for calibrated stages `t ≥ 1`.
    pub reflectance: Option<Tensor<R>>,
    /// `sᵗ = K(zᵗ)`; only for calibrated stages `t ≥ 1`.
    pub calibration: Option<Tensor<R>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace<R: Real = f32> {
    pub stages: Vec<StageRecord<R>>,
}

impl<R: Real> StageTrace<R> {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// `x¹ … xᵀ`
    pub fn illuminations(&self) -> impl Iterator<Item = &Tensor<R>> {
        self.stages.iter().map(|s| &s.illumination)
    }
}

/// Graph handles of one recorded stage.
#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    pub input: Var,
    pub residual: Var,
    pub illumination: Var,
    pub reflectance: Option<Var>,
    pub calibration: Option<Var>,
    /// Fidelity target `y + sᵗ`, or `y` when the stage is not calibrated.
    pub target: Var,
}

/// Records `conv → relu → … → conv` (linear last layer).
pub fn record_stack<R: Real>(graph: &mut Graph<R>, input: Var, layers: &[ConvVars]) -> Result<Var> {
    let mut x = input;
    for (i, &layer) in layers.iter().enumerate() {
        x = graph.conv2d(x, layer)?;
        if i + 1 < layers.len() {
            x = graph.relu(x);
        }
    }
    Ok(x)
}

fn require_rgb<R: Real>(graph: &Graph<R>, v: Var, what: &str) -> Result<()> {
    let c = graph.value(v).channels();
    if c != 3 {
        return Err(SciError::shape(
            "sci-model",
            format!("{what} must have 3 channels, got {c}"),
        ));
    }
    Ok(())
}

/// Records one illumination update: `(u, clamp(v + u, floor, 1))`, or
/// `(u, clamp(u, floor, 1))` in direct mode.
pub fn record_stage<R: Real>(
    graph: &mut Graph<R>,
    input: Var,
    estimator: &[ConvVars],
    mode: CascadeMode,
) -> Result<(Var, Var)> {
    require_rgb(graph, input, "stage input")?;
    let residual = record_stack(graph, input, estimator)?;
    let floor = R::from_f64(ILLUMINATION_FLOOR);
    let illumination = match mode {
        CascadeMode::Direct => graph.clamp(residual, floor, R::one()),
        _ => {
            let sum = graph.add(input, residual)?;
            graph.clamp(sum, floor, R::one())
        }
    };
    Ok((residual, illumination))
}

/// Records the self-calibration of a stage input: `(z, s, v)`.
pub fn record_calibration<R: Real>(
    graph: &mut Graph<R>,
    illumination: Var,
    y: Var,
    calibrator: &[ConvVars],
) -> Result<(Var, Var, Var)> {
    let reflectance = graph.div_safe(y, illumination)?;
    let calibration = record_stack(graph, reflectance, calibrator)?;
    let shifted = graph.add(y, calibration)?;
    let input = graph.clamp(shifted, R::zero(), R::one());
    Ok((reflectance, calibration, input))
}

/// Records the `stages`-stage cascade on `graph`.
pub fn record_cascade<R: Real>(
    graph: &mut Graph<R>,
    y: Var,
    estimator: &[ConvVars],
    calibrator: &[ConvVars],
    stages: usize,
    mode: CascadeMode,
) -> Result<Vec<StageVars>> {
    if stages < 1 {
        return Err(SciError::Config("stage count must be at least 1".into()));
    }
    require_rgb(graph, y, "observation")?;
    let mut out: Vec<StageVars> = Vec::with_capacity(stages);
    for _ in 0..stages {
        let (input, reflectance, calibration, target) = match (out.last(), mode) {
            (None, _) => (y, None, None, y),
            (Some(prev), CascadeMode::Full) => {
                let (z, s, v) = record_calibration(graph, prev.illumination, y, calibrator)?;
                let target = graph.add(y, s)?;
                (v, Some(z), Some(s), target)
            }
            (Some(prev), CascadeMode::ResidualNoCalibration | CascadeMode::Direct) => {
                (prev.illumination, None, None, y)
            }
        };
        let (residual, illumination) = record_stage(graph, input, estimator, mode)?;
        out.push(StageVars {
            input,
            residual,
            illumination,
            reflectance,
            calibration,
            target,
        });
    }
    Ok(out)
}

fn constant_stack<R: Real>(graph: &mut Graph<R>, layers: &[ConvParams<R>]) -> Vec<ConvVars> {
    layers.iter().map(|l| graph.conv_constants(l)).collect()
}

/// `u = H_θ(x)`
pub fn estimate_residual<R: Real>(x: &Tensor<R>, estimator: &[ConvParams<R>]) -> Result<Tensor<R>> {
    let mut graph = Graph::new();
    let input = graph.constant(x.clone());
    require_rgb(&graph, input, "estimator input")?;
    let layers = constant_stack(&mut graph, estimator);
    let u = record_stack(&mut graph, input, &layers)?;
    Ok(graph.value(u).clone())
}

/// `x_{t+1} = clamp(x_t + H_θ(x_t), 1e-4, 1)`
pub fn stage_forward<R: Real>(x: &Tensor<R>, estimator: &[ConvParams<R>]) -> Result<Tensor<R>> {
    let mut graph = Graph::new();
    let input = graph.constant(x.clone());
    let layers = constant_stack(&mut graph, estimator);
    let (_, illumination) = record_stage(&mut graph, input, &layers, CascadeMode::Full)?;
    Ok(graph.value(illumination).clone())
}

/// Output of the self-calibrated module for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration<R: Real = f32> {
    /// `z = y ⊘ x`
    pub reflectance: Tensor<R>,
    /// `s = K_ϑ(z)`
    pub calibration: Tensor<R>,
    /// `v = clamp(y + s, 0, 1)`
    pub input: Tensor<R>,
}

pub fn calibrate<R: Real>(
    illumination: &Tensor<R>,
    y: &Tensor<R>,
    calibrator: &[ConvParams<R>],
) -> Result<Calibration<R>> {
    if illumination.shape() != y.shape() {
        return Err(SciError::shape(
            "calibrate",
            format!("illumination {:?} vs observation {:?}", illumination.shape(), y.shape()),
        ));
    }
    let mut graph = Graph::new();
    let x = graph.constant(illumination.clone());
    let yv = graph.constant(y.clone());
    let layers = constant_stack(&mut graph, calibrator);
    let (z, s, v) = record_calibration(&mut graph, x, yv, &layers)?;
    Ok(Calibration {
        reflectance: graph.value(z).clone(),
        calibration: graph.value(s).clone(),
        input: graph.value(v).clone(),
    })
}

/// Runs the training-time cascade of `weights.arch.stages` stages.
pub fn cascade_forward<R: Real>(y: &Tensor<R>, weights: &ModelWeights<R>) -> Result<StageTrace<R>> {
    cascade_forward_with(y, weights, weights.arch.stages, CascadeMode::Full)
}

/// Cascade with an explicit stage count and mode.
pub fn cascade_forward_with<R: Real>(
    y: &Tensor<R>,
    weights: &ModelWeights<R>,
    stages: usize,
    mode: CascadeMode,
) -> Result<StageTrace<R>> {
    let mut graph = Graph::new();
    let yv = graph.constant(y.clone());
    let estimator = constant_stack(&mut graph, &weights.estimator);
    let calibrator = constant_stack(&mut graph, &weights.calibrator);
    let vars = record_cascade(&mut graph, yv, &estimator, &calibrator, stages, mode)?;
    Ok(StageTrace {
        stages: vars
            .iter()
            .map(|s| StageRecord {
                input: graph.value(s.input).clone(),
                residual: graph.value(s.residual).clone(),
                illumination: graph.value(s.illumination).clone(),
                reflectance: s.reflectance.map(|v| graph.value(v).clone()),
                calibration: s.calibration.map(|v| graph.value(v).clone()),
            })
            .collect(),
    })
}

/// Single-stage enhancement: returns `(x, z)` with `x = stage_forward(y)` and
/// `z = clamp(y ⊘ x, 0, 1)`. The calibrator is not evaluated.
pub fn infer<R: Real>(y: &Tensor<R>, weights: &ModelWeights<R>) -> Result<(Tensor<R>, Tensor<R>)> {
    infer_with(y, weights, CascadeMode::Full)
}

/// [`infer`] for weights trained in `mode`; only [`CascadeMode::Direct`]
/// changes the single stage.
pub fn infer_with<R: Real>(
    y: &Tensor<R>,
    weights: &ModelWeights<R>,
    mode: CascadeMode,
) -> Result<(Tensor<R>, Tensor<R>)> {
    let mut graph = Graph::new();
    let yv = graph.constant(y.clone());
    let estimator = constant_stack(&mut graph, &weights.estimator);
    let (_, x) = record_stage(&mut graph, yv, &estimator, mode)?;
    let ratio = graph.div_safe(yv, x)?;
    let z = graph.clamp(ratio, R::zero(), R::one());
    Ok((graph.value(x).clone(), graph.value(z).clone()))
}
