//! Seeded gradcheck suites shared by the unit-level tests and the acceptance run.

#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sci_core::autodiff::{ConvVars, Graph, Var};
use sci_core::losses::{smoothness_weights, LossConfig, StageLossInputs, WeightMap};
use sci_core::model::{record_cascade, CascadeMode};
use sci_core::{Result, Tensor};

use super::gradcheck::{check, Report};

pub const SHAPE: [usize; 4] = [1, 3, 8, 8];

pub fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn normal(rng: &mut ChaCha8Rng, shape: [usize; 4], std: f64) -> Tensor<f64> {
    use rand_distr::{Distribution, Normal};
    let d = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// `Σ (out ⊙ r)` for a fixed random `r`, so every output element carries a
/// distinct upstream gradient.
fn project(g: &mut Graph<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(out, rv)?;
    Ok(g.sum(p))
}

/// One report per differentiable graph operation.
pub fn op_suite(seed: u64) -> Vec<(&'static str, Report)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(&mut rng, SHAPE, -1.0, 1.0);
    let r4 = uniform(&mut rng, [1, 4, 8, 8], -1.0, 1.0);
    let a = uniform(&mut rng, SHAPE, -1.0, 1.0);
    let b = uniform(&mut rng, SHAPE, -1.0, 1.0);
    let mut out = Vec::new();

    let kernel = normal(&mut rng, [4, 3, 3, 3], 0.3);
    let bias = normal(&mut rng, [1, 4, 1, 1], 0.3);
    out.push((
        "conv2d",
        check(&[a.clone(), kernel, bias], None, &|g, v| {
            let c = g.conv2d(v[0], ConvVars { kernel: v[1], bias: v[2] })?;
            project(g, c, &r4)
        }),
    ));
    out.push((
        "relu",
        check(&[a.clone()], None, &|g, v| {
            let y = g.relu(v[0]);
            project(g, y, &r)
        }),
    ));
    out.push((
        "add",
        check(&[a.clone(), b.clone()], None, &|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, &r)
        }),
    ));
    out.push((
        "sub",
        check(&[a.clone(), b.clone()], None, &|g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, &r)
        }),
    ));
    out.push((
        "mul",
        check(&[a.clone(), b.clone()], None, &|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, &r)
        }),
    ));
    // denominators away from the floor, plus some far below it
    let mut den = uniform(&mut rng, SHAPE, 0.3, 1.0);
    for (i, d) in den.data_mut().iter_mut().enumerate() {
        if i % 7 == 0 {
            *d = -0.5;
        }
    }
    out.push((
        "div_safe",
        check(&[a.clone(), den], None, &|g, v| {
            let y = g.div_safe(v[0], v[1])?;
            project(g, y, &r)
        }),
    ));
    let wide = uniform(&mut rng, SHAPE, -0.5, 1.5);
    out.push((
        "clamp",
        check(&[wide], None, &|g, v| {
            let y = g.clamp(v[0], 1e-4, 1.0);
            project(g, y, &r)
        }),
    ));
    out.push((
        "mul_scalar",
        check(&[a.clone()], None, &|g, v| {
            let y = g.mul_scalar(v[0], -2.5);
            project(g, y, &r)
        }),
    ));
    out.push((
        "square",
        check(&[a.clone()], None, &|g, v| {
            let y = g.square(v[0]);
            project(g, y, &r)
        }),
    ));
    out.push((
        "sum",
        check(&[a.clone()], None, &|g, v| {
            let sq = g.square(v[0]);
            Ok(g.sum(sq))
        }),
    ));
    out.push((
        "mean",
        check(&[a.clone()], None, &|g, v| {
            let rv = g.constant(r.clone());
            let p = g.mul(v[0], rv)?;
            g.mean(p)
        }),
    ));
    let reference = uniform(&mut rng, SHAPE, 0.0, 1.0);
    let weights = Arc::new(smoothness_weights(&reference, 0.1, 5).unwrap());
    out.push((
        "neighbor_l1",
        check(&[a.clone()], None, &|g, v| g.neighbor_l1(v[0], weights.clone())),
    ));
    out.push((
        "combine",
        check(&[a.clone(), b.clone()], None, &|g, v| {
            let sa = g.square(v[0]);
            let sa = g.mean(sa)?;
            let pb = g.constant(r.clone());
            let pb = g.mul(v[1], pb)?;
            let sb = g.sum(pb);
            g.combine(&[(sa, 0.7), (sb, -1.3)])
        }),
    ));
    out
}

/// Random estimator/calibrator parameters as `(kernel, bias)` tensor pairs.
pub fn random_layers(rng: &mut ChaCha8Rng, channels: &[usize], std: f64) -> Vec<Tensor<f64>> {
    channels
        .windows(2)
        .flat_map(|p| {
            let k = normal(rng, [p[1], p[0], 3, 3], std);
            let b = normal(rng, [1, p[1], 1, 1], std * 0.3);
            [k, b]
        })
        .collect()
}

fn layer_vars(v: &[Var]) -> Vec<ConvVars> {
    v.chunks(2).map(|c| ConvVars { kernel: c[0], bias: c[1] }).collect()
}

/// The training objective of a `stages`-stage cascade, recorded exactly as the
/// trainer does it but with smoothness weights frozen at `weights`.
pub fn frozen_objective(
    g: &mut Graph<f64>,
    vars: &[Var],
    h_layers: usize,
    stages: usize,
    mode: CascadeMode,
    config: &LossConfig,
    weights: &[Arc<WeightMap<f64>>],
) -> Result<Var> {
    let y = vars[0];
    let est = layer_vars(&vars[1..1 + 2 * h_layers]);
    let cal = layer_vars(&vars[1 + 2 * h_layers..]);
    let st = record_cascade(g, y, &est, &cal, stages, mode)?;
    let mut fid = Vec::new();
    let mut smooth = Vec::new();
    for (t, s) in st.iter().enumerate() {
        let d = g.sub(s.illumination, s.target)?;
        let sq = g.square(d);
        fid.push((g.mean(sq)?, 1.0));
        smooth.push((g.neighbor_l1(s.illumination, weights[t].clone())?, 1.0));
    }
    let f = g.combine(&fid)?;
    let sm = g.combine(&smooth)?;
    g.combine(&[(f, config.alpha), (sm, config.beta)])
}

/// Smoothness weights at the unperturbed point, and the production loss there.
pub fn base_weights(
    inputs: &[Tensor<f64>],
    h_layers: usize,
    stages: usize,
    mode: CascadeMode,
    config: &LossConfig,
) -> (Vec<Arc<WeightMap<f64>>>, f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let est = layer_vars(&vars[1..1 + 2 * h_layers]);
    let cal = layer_vars(&vars[1 + 2 * h_layers..]);
    let st = record_cascade(&mut g, vars[0], &est, &cal, stages, mode).unwrap();
    let weights = st
        .iter()
        .map(|s| Arc::new(smoothness_weights(g.value(s.target), config.sigma, config.window).unwrap()))
        .collect();
    let loss_inputs: Vec<StageLossInputs> = st
        .iter()
        .map(|s| StageLossInputs { illumination: s.illumination, target: s.target })
        .collect();
    let total = sci_core::losses::record_loss(&mut g, &loss_inputs, config).unwrap();
    (weights, g.scalar(total.total))
}

/// Full cascade + objective gradcheck on a random 1×3×8×8 input.
///
/// Checks every input pixel, every estimator parameter, every calibrator bias
/// and a seeded sample of calibrator kernel entries. Also returns the gap
/// between the frozen-weight objective and the production objective at the
/// base point, which must be zero.
pub fn composition(seed: u64, mode: CascadeMode) -> (Report, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let h_channels = [3, 3, 3, 3];
    let k_channels = [3, 16, 16, 16, 3];
    let mut inputs = vec![uniform(&mut rng, SHAPE, 0.3, 0.9)];
    // small enough that stage inputs stay clear of the clamps, where the
    // reflectance ratio is strongly curved
    inputs.extend(random_layers(&mut rng, &h_channels, 0.1));
    inputs.extend(random_layers(&mut rng, &k_channels, 0.05));
    let h_layers = h_channels.len() - 1;
    let stages = 3;
    let config = LossConfig::default();

    let (weights, production) = base_weights(&inputs, h_layers, stages, mode, &config);

    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let in_calibrator = i > 2 * h_layers;
        let is_kernel = i >= 1 && (i - 1) % 2 == 0;
        for e in 0..t.len() {
            if !(in_calibrator && is_kernel) || rng.random_bool(0.03) {
                coords.push((i, e));
            }
        }
    }
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        frozen_objective(g, v, h_layers, stages, mode, &config, &weights)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let base_loss = build(&mut g, &vars).unwrap();
    let frozen_at_base = g.scalar(base_loss);
    (check(&inputs, Some(&coords), &build), (frozen_at_base - production).abs())
}
