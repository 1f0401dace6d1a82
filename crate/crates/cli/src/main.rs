//! `sci`: train, run and evaluate the self-calibrated illumination model.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sci_core::SciError;

use settings::TrainFlags;

#[derive(Debug, Parser)]
#[command(name = "sci", version, about = "Low-light enhancement by self-calibrated illumination")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the estimator and calibrator on a directory of low-light images.
    Train(TrainFlags),
    /// Enhance an image or a directory of images.
    Enhance(EnhanceArgs),
    /// Compute quality metrics for a directory of enhanced images.
    Eval(EvalArgs),
    /// Dump per-stage illuminations and the gaps between consecutive stages.
    Diagnose(DiagnoseArgs),
    /// Train one of the cascade variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long, value_name = "PATH")]
    pub weights: PathBuf,
    /// Image file or directory.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Output file, or directory when the input is a directory.
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
    /// Also write the illumination x (file or directory, like --output).
    #[arg(long, value_name = "PATH")]
    pub dump_illum: Option<PathBuf>,
    /// Cascade variant the weights were trained with.
    #[arg(long, default_value = "full")]
    pub mode: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of enhanced images.
    #[arg(long, value_name = "DIR")]
    pub test: PathBuf,
    /// Directory of references with matching file names.
    #[arg(long = "ref", value_name = "DIR")]
    pub reference: Option<PathBuf>,
    /// Directory of the low-light originals for LOE [default: --ref].
    #[arg(long, value_name = "DIR")]
    pub low: Option<PathBuf>,
    /// Comma-separated subset of psnr,ssim,de,eme,loe [default: all that have inputs].
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    /// Report CSV [default: stdout].
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long, value_name = "PATH")]
    pub weights: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Stages to unroll [default: the count stored with the weights].
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long, default_value = "full")]
    pub mode: String,
    /// Directory for stage_<t>.png and gaps.csv.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// direct, residual-nocal or full.
    #[arg(long)]
    pub mode: String,
    /// Stage-gap CSV [default: <out>.convergence.csv].
    #[arg(long, value_name = "PATH")]
    pub convergence: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

/// Bad flags, config keys or values.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<SciError>() {
        Some(SciError::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = commands::init_pool().and_then(|()| match cli.command {
        Command::Train(flags) => commands::train(&flags),
        Command::Enhance(args) => commands::enhance(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Diagnose(args) => commands::diagnose(&args),
        Command::Ablate(args) => commands::ablate(&args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            eprintln!("error: {err:#}");
            if code == 2 {
                eprintln!("run `sci --help` for usage");
            }
            ExitCode::from(code)
        }
    }
}
