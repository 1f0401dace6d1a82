use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rayon::prelude::*;
use sci_core::checkpoint::{load_weights, save_weights};
use sci_core::imaging::{load_rgb, save_image, scan_corpus};
use sci_core::metrics::{self, MetricReport, MetricRow};
use sci_core::model::{cascade_forward_with, infer_with};
use sci_core::trainer::{self, write_loss_log, CheckpointPolicy};
use sci_core::{CascadeMode, ImageBuffer, ModelWeights, TrainConfig};

use crate::settings::{resolve, TrainFlags};
use crate::{AblateArgs, DiagnoseArgs, EnhanceArgs, EvalArgs, UsageError};

/// Sizes the global worker pool from `SCI_THREADS` when it is set.
pub fn init_pool() -> Result<()> {
    let Ok(value) = std::env::var("SCI_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("SCI_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn parse_mode(s: &str) -> Result<CascadeMode> {
    s.parse::<CascadeMode>().map_err(|e| UsageError(e.to_string()).into())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `contents` through a temporary sibling and a rename.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Vec<ImageBuffer>> {
    let paths = scan_corpus(dir).with_context(|| format!("scanning {}", dir.display()))?;
    paths
        .iter()
        .map(|p| load_rgb(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

/// Trains in `mode` and writes the weights and loss log.
fn run_training(flags: &TrainFlags, mode: CascadeMode) -> Result<(TrainConfig, Vec<ImageBuffer>, ModelWeights)> {
    let resolved = resolve(flags)?;
    let mut config = resolved.config;
    config.mode = mode;
    let corpus = load_corpus(&resolved.data)?;
    info!(
        "training {} on {} images for {} epochs",
        mode.name(),
        corpus.len(),
        config.epochs
    );
    let outcome = trainer::train(
        &corpus,
        &config,
        &CheckpointPolicy {
            path: Some(flags.out.clone()),
        },
    )?;
    save_weights(&outcome.weights, &flags.out)?;
    let log_path = flags.log.clone().unwrap_or_else(|| with_suffix(&flags.out, ".loss.csv"));
    let mut csv = Vec::new();
    write_loss_log(&outcome.log, &mut csv)?;
    write_atomic(&log_path, &csv)?;
    Ok((config, corpus, outcome.weights))
}

pub fn train(flags: &TrainFlags) -> Result<()> {
    run_training(flags, CascadeMode::Full).map(|_| ())
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let mode = parse_mode(&args.mode)?;
    let (config, corpus, weights) = run_training(&args.train, mode)?;
    if config.arch.stages < 2 {
        return Ok(());
    }
    // mean stage gap over the training images
    let mut sums = vec![0.0; config.arch.stages - 1];
    for img in &corpus {
        let trace = cascade_forward_with(&img.to_tensor::<f32>(), &weights, config.arch.stages, mode)?;
        for (s, g) in sums.iter_mut().zip(metrics::stage_convergence(&trace)?) {
            *s += g;
        }
    }
    let gaps: Vec<f64> = sums.iter().map(|s| s / corpus.len() as f64).collect();
    let path = args
        .convergence
        .clone()
        .unwrap_or_else(|| with_suffix(&args.train.out, ".convergence.csv"));
    write_atomic(&path, gap_csv(&gaps).as_bytes())
}

fn gap_csv(gaps: &[f64]) -> String {
    let mut out = String::from("stage,gap\n");
    for (t, g) in gaps.iter().enumerate() {
        out.push_str(&format!("{},{g}\n", t + 1));
    }
    out
}

fn enhance_one(
    weights: &ModelWeights,
    mode: CascadeMode,
    input: &Path,
    output: &Path,
    illum: Option<&Path>,
) -> Result<()> {
    let img = load_rgb(input).with_context(|| format!("loading {}", input.display()))?;
    let (x, z) = infer_with(&img.to_tensor::<f32>(), weights, mode)?;
    save_image(&ImageBuffer::from_tensor(&z, 0)?, output)
        .with_context(|| format!("writing {}", output.display()))?;
    if let Some(path) = illum {
        save_image(&ImageBuffer::from_tensor(&x, 0)?, path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn enhance(args: &EnhanceArgs) -> Result<()> {
    let mode = parse_mode(&args.mode)?;
    let weights = load_weights(&args.weights).with_context(|| format!("loading {}", args.weights.display()))?;
    if !args.input.is_dir() {
        return enhance_one(&weights, mode, &args.input, &args.output, args.dump_illum.as_deref());
    }
    let inputs = scan_corpus(&args.input)?;
    fs::create_dir_all(&args.output)?;
    if let Some(dir) = &args.dump_illum {
        fs::create_dir_all(dir)?;
    }
    inputs.par_iter().try_for_each(|path| {
        let name = path.file_name().expect("scanned paths name files");
        let illum = args.dump_illum.as_ref().map(|d| d.join(name));
        enhance_one(&weights, mode, path, &args.output.join(name), illum.as_deref())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Metric {
    Psnr,
    Ssim,
    De,
    Eme,
    Loe,
}

fn parse_metrics(names: &[String]) -> Result<Vec<Metric>> {
    names
        .iter()
        .map(|n| match n.trim() {
            "psnr" => Ok(Metric::Psnr),
            "ssim" => Ok(Metric::Ssim),
            "de" => Ok(Metric::De),
            "eme" => Ok(Metric::Eme),
            "loe" => Ok(Metric::Loe),
            other => Err(UsageError(format!("unknown metric `{other}`")).into()),
        })
        .collect()
}

fn counterpart(dir: &Path, test: &Path) -> Result<ImageBuffer> {
    let path = dir.join(test.file_name().expect("scanned paths name files"));
    load_rgb(&path).with_context(|| format!("loading counterpart {}", path.display()))
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let low_dir = args.low.as_ref().or(args.reference.as_ref());
    let metrics = match &args.metrics {
        Some(names) => parse_metrics(names)?,
        None => {
            let mut m = vec![Metric::De, Metric::Eme];
            if args.reference.is_some() {
                m.splice(0..0, [Metric::Psnr, Metric::Ssim]);
            }
            if low_dir.is_some() {
                m.push(Metric::Loe);
            }
            m
        }
    };
    for m in &metrics {
        match m {
            Metric::Psnr | Metric::Ssim if args.reference.is_none() => {
                bail!(UsageError(format!("{m:?} needs --ref").to_lowercase()))
            }
            Metric::Loe if low_dir.is_none() => bail!(UsageError("loe needs --low or --ref".into())),
            _ => {}
        }
    }
    let tests = scan_corpus(&args.test)?;
    let rows = tests
        .par_iter()
        .map(|path| -> Result<MetricRow> {
            let test = load_rgb(path).with_context(|| format!("loading {}", path.display()))?;
            let reference = match &args.reference {
                Some(dir) => Some(counterpart(dir, path)?),
                None => None,
            };
            let low = match low_dir {
                Some(dir) if metrics.contains(&Metric::Loe) => Some(counterpart(dir, path)?),
                _ => None,
            };
            let mut row = MetricRow {
                image: path.file_name().unwrap().to_string_lossy().into_owned(),
                ..Default::default()
            };
            for m in &metrics {
                match m {
                    Metric::Psnr => row.psnr = Some(metrics::psnr(&test, reference.as_ref().unwrap())?),
                    Metric::Ssim => row.ssim = Some(metrics::ssim(&test, reference.as_ref().unwrap())?),
                    Metric::De => row.de = Some(metrics::de(&test)),
                    Metric::Eme => row.eme = Some(metrics::eme_default(&test)?),
                    Metric::Loe => row.loe = Some(metrics::loe(low.as_ref().unwrap(), &test)?),
                }
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport { rows };
    match &args.out {
        Some(path) => {
            let mut csv = Vec::new();
            report.write_csv(&mut csv)?;
            write_atomic(path, &csv)
        }
        None => {
            let mut out = BufWriter::new(io::stdout().lock());
            report.write_csv(&mut out)?;
            out.flush()?;
            Ok(())
        }
    }
}

pub fn diagnose(args: &DiagnoseArgs) -> Result<()> {
    let mode = parse_mode(&args.mode)?;
    let weights = load_weights(&args.weights).with_context(|| format!("loading {}", args.weights.display()))?;
    let stages = args.stages.unwrap_or(weights.arch.stages);
    if stages < 2 {
        bail!(UsageError(format!(
            "stage gaps need at least 2 stages, got {stages}"
        )));
    }
    let img = load_rgb(&args.input).with_context(|| format!("loading {}", args.input.display()))?;
    let trace = cascade_forward_with(&img.to_tensor::<f32>(), &weights, stages, mode)?;
    fs::create_dir_all(&args.out_dir)?;
    for (t, x) in trace.illuminations().enumerate() {
        save_image(&ImageBuffer::from_tensor(x, 0)?, &args.out_dir.join(format!("stage_{}.png", t + 1)))?;
    }
    let gaps = metrics::stage_convergence(&trace)?;
    write_atomic(&args.out_dir.join("gaps.csv"), gap_csv(&gaps).as_bytes())
}
