//! Training settings: defaults, then a `key = value` file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use sci_core::model::{parse_channels, EstimatorArch};
use sci_core::{SmoothStages, TrainConfig};

use crate::UsageError;

/// Flags shared by `train` and `ablate`. Every flag is also a config key
/// (dashes become underscores).
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Directory of low-light training images.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// File of `key = value` lines; flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Weights file to write.
    #[arg(long, value_name = "PATH", default_value = "sci.weights")]
    pub out: PathBuf,
    /// Loss log CSV [default: <out>.loss.csv].
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,

    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Side of the square training crops.
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Unrolled training stages T.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Estimator convolutions (with --width).
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Hidden width of the estimator (with --blocks).
    #[arg(long)]
    pub width: Option<usize>,
    /// Full estimator channel list such as 3-8-8-3.
    #[arg(long)]
    pub channels: Option<String>,
    /// Fidelity weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Smoothness weight.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Stages the smoothness term covers: all or final.
    #[arg(long)]
    pub smooth_stages: Option<String>,
    #[arg(long)]
    pub init_std: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

/// Raw settings before resolution into a [`TrainConfig`].
#[derive(Debug, Clone, Default)]
struct Layer {
    data: Option<PathBuf>,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    batch: Option<usize>,
    epochs: Option<usize>,
    patch: Option<usize>,
    seed: Option<u64>,
    stages: Option<usize>,
    blocks: Option<usize>,
    width: Option<usize>,
    channels: Option<String>,
    alpha: Option<f64>,
    beta: Option<f64>,
    sigma: Option<f64>,
    window: Option<usize>,
    smooth_stages: Option<String>,
    init_std: Option<f64>,
    checkpoint_every: Option<usize>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f.clone(); } )*
    };
}

impl Layer {
    fn overlay(&mut self, top: &Layer) {
        overlay!(
            self, top, data, lr, beta1, beta2, eps, batch, epochs, patch, seed, stages, blocks,
            width, channels, alpha, beta, sigma, window, smooth_stages, init_std,
            checkpoint_every
        );
    }

    fn set(&mut self, key: &str, value: &str, base_dir: &Path) -> Result<(), UsageError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, UsageError> {
            value
                .parse()
                .map(Some)
                .map_err(|_| UsageError(format!("config key `{key}`: cannot parse `{value}`")))
        }
        match key {
            "data" => self.data = Some(base_dir.join(value)),
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "stages" => self.stages = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "channels" => self.channels = Some(value.to_string()),
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "smooth_stages" => self.smooth_stages = Some(value.to_string()),
            "init_std" => self.init_std = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            other => return Err(UsageError(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

impl From<&TrainFlags> for Layer {
    fn from(f: &TrainFlags) -> Self {
        Layer {
            data: f.data.clone(),
            lr: f.lr,
            beta1: f.beta1,
            beta2: f.beta2,
            eps: f.eps,
            batch: f.batch,
            epochs: f.epochs,
            patch: f.patch,
            seed: f.seed,
            stages: f.stages,
            blocks: f.blocks,
            width: f.width,
            channels: f.channels.clone(),
            alpha: f.alpha,
            beta: f.beta,
            sigma: f.sigma,
            window: f.window,
            smooth_stages: f.smooth_stages.clone(),
            init_std: f.init_std,
            checkpoint_every: f.checkpoint_every,
        }
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// relative `data` paths resolve against the file's directory.
fn parse_config(text: &str, base_dir: &Path) -> Result<Layer, UsageError> {
    let mut layer = Layer::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected `key = value`", n + 1)))?;
        layer.set(key.trim(), value.trim(), base_dir)?;
    }
    Ok(layer)
}

/// Resolved training settings.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub data: PathBuf,
    pub config: TrainConfig,
}

pub fn resolve(flags: &TrainFlags) -> Result<Resolved, UsageError> {
    let mut layer = Layer::default();
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        layer.overlay(&parse_config(&text, base)?);
    }
    layer.overlay(&Layer::from(flags));

    let data = layer
        .data
        .clone()
        .ok_or_else(|| UsageError("--data is required".into()))?;
    let mut c = TrainConfig::default();
    c.lr = layer.lr.unwrap_or(c.lr);
    c.beta1 = layer.beta1.unwrap_or(c.beta1);
    c.beta2 = layer.beta2.unwrap_or(c.beta2);
    c.eps = layer.eps.unwrap_or(c.eps);
    c.batch = layer.batch.unwrap_or(c.batch);
    c.epochs = layer.epochs.unwrap_or(c.epochs);
    c.patch = layer.patch.unwrap_or(c.patch);
    c.seed = layer.seed.unwrap_or(c.seed);
    c.init_std = layer.init_std.unwrap_or(c.init_std);
    c.checkpoint_every = layer.checkpoint_every.unwrap_or(c.checkpoint_every);
    c.loss.alpha = layer.alpha.unwrap_or(c.loss.alpha);
    c.loss.beta = layer.beta.unwrap_or(c.loss.beta);
    c.loss.sigma = layer.sigma.unwrap_or(c.loss.sigma);
    c.loss.window = layer.window.unwrap_or(c.loss.window);
    if let Some(s) = &layer.smooth_stages {
        c.loss.smooth_stages = s.parse::<SmoothStages>().map_err(|e| UsageError(e.to_string()))?;
    }

    let stages = layer.stages.unwrap_or(c.arch.stages);
    c.arch = match (&layer.channels, layer.blocks, layer.width) {
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
            return Err(UsageError("channels cannot be combined with blocks/width".into()))
        }
        (Some(list), None, None) => {
            let channels = parse_channels(list).map_err(|e| UsageError(e.to_string()))?;
            EstimatorArch { channels, stages }
        }
        (None, blocks, width) => {
            let d = EstimatorArch::default();
            EstimatorArch::uniform(blocks.unwrap_or(d.blocks()), width.unwrap_or(3), stages)
                .map_err(|e| UsageError(e.to_string()))?
        }
    };
    c.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(Resolved { data, config: c })
}
