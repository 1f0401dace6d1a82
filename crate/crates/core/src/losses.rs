//! Unsupervised training objective: per-stage fidelity plus an edge-aware,
//! spatially-variant ℓ1 smoothness prior on the estimated illumination.
//!
//! Both terms are means over pixels and sums over stages, so `alpha` and `beta`
//! do not depend on the training resolution.

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SciError};
use crate::imaging::rgb_to_yuv_pixel;
use crate::model::StageTrace;
use crate::tensor::{Real, Tensor};

/// Which stage illuminations the smoothness prior is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmoothStages {
    #[default]
    All,
    Final,
}

impl std::str::FromStr for SmoothStages {
    type Err = SciError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SmoothStages::All),
            "final" => Ok(SmoothStages::Final),
            other => Err(SciError::Config(format!(
                "smooth_stages must be `all` or `final`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Fidelity weight.
    pub alpha: f64,
    /// Smoothness weight.
    pub beta: f64,
    /// Gaussian width of the reference-similarity weights.
    pub sigma: f64,
    /// Side of the square neighbourhood window (odd).
    pub window: usize,
    pub smooth_stages: SmoothStages,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.15,
            sigma: 0.1,
            window: 5,
            smooth_stages: SmoothStages::All,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(SciError::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(SciError::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(SciError::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(SciError::Config(format!(
                "window must be odd and >= 3, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub fidelity: f64,
    pub smoothness: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.fidelity.is_finite() && self.smoothness.is_finite() && self.total.is_finite()
    }
}

/// Neighbour weights `w_{i,j}` over a square window, one map per batch item,
/// shared by all channels of the penalised tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap<R: Real = f32> {
    batch: usize,
    height: usize,
    width: usize,
    offsets: Vec<(isize, isize)>,
    /// `[batch][offset][row][col]`; zero where the neighbour falls outside.
    data: Vec<R>,
}

fn window_offsets(window: usize) -> Vec<(isize, isize)> {
    let r = (window / 2) as isize;
    let mut offsets = Vec::with_capacity(window * window - 1);
    for dy in -r..=r {
        for dx in -r..=r {
            if (dy, dx) != (0, 0) {
                offsets.push((dy, dx));
            }
        }
    }
    offsets
}

impl<R: Real> WeightMap<R> {
    /// Builds a map by evaluating `f(batch, row, col, neighbour_row, neighbour_col)`
    /// for every in-bounds pair.
    pub fn from_fn(
        batch: usize,
        height: usize,
        width: usize,
        window: usize,
        mut f: impl FnMut(usize, usize, usize, usize, usize) -> R,
    ) -> Self {
        let offsets = window_offsets(window);
        let mut data = vec![R::zero(); batch * offsets.len() * height * width];
        let mut idx = 0;
        for b in 0..batch {
            for &(dy, dx) in &offsets {
                for r in 0..height {
                    for c in 0..width {
                        let (nr, nc) = (r as isize + dy, c as isize + dx);
                        if nr >= 0 && nc >= 0 && (nr as usize) < height && (nc as usize) < width {
                            data[idx] = f(b, r, c, nr as usize, nc as usize);
                        }
                        idx += 1;
                    }
                }
            }
        }
        Self {
            batch,
            height,
            width,
            offsets,
            data,
        }
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    /// Weight between pixel `(row, col)` and its neighbour at offset index `k`.
    pub fn get(&self, batch: usize, k: usize, row: usize, col: usize) -> R {
        self.data[((batch * self.offsets.len() + k) * self.height + row) * self.width + col]
    }

    /// Weight between `(row, col)` and `(row + dy, col + dx)`, if that pair is in the window.
    pub fn pair(&self, batch: usize, row: usize, col: usize, dy: isize, dx: isize) -> Option<R> {
        let k = self.offsets.iter().position(|&o| o == (dy, dx))?;
        let (nr, nc) = (row as isize + dy, col as isize + dx);
        if nr < 0 || nc < 0 || nr as usize >= self.height || nc as usize >= self.width {
            return None;
        }
        Some(self.get(batch, k, row, col))
    }

    pub fn values(&self) -> &[R] {
        &self.data
    }

    fn plane(&self, batch: usize, k: usize) -> &[R] {
        let hw = self.height * self.width;
        let start = (batch * self.offsets.len() + k) * hw;
        &self.data[start..start + hw]
    }
}

/// Gaussian similarity weights of a reference RGB tensor, compared in YUV.
///
/// `w_{i,j} = exp(-Σ_c (ref_{i,c} - ref_{j,c})² / (2σ²))` for every `j` in the
/// window around `i`, truncated at the border.
pub fn smoothness_weights<R: Real>(
    reference: &Tensor<R>,
    sigma: f64,
    window: usize,
) -> Result<WeightMap<R>> {
    let [n, c, h, w] = reference.shape();
    if c != 3 {
        return Err(SciError::shape(
            "smoothness_weights",
            format!("reference must have 3 channels, got {c}"),
        ));
    }
    if h < window || w < window {
        return Err(SciError::Input(format!(
            "image {h}x{w} is smaller than the {window}x{window} smoothness window"
        )));
    }
    if !(sigma > 0.0) {
        return Err(SciError::Config(format!("sigma must be > 0, got {sigma}")));
    }
    let mut yuv = vec![[0.0f64; 3]; n * h * w];
    for b in 0..n {
        let (pr, pg, pb) = (reference.plane(b, 0), reference.plane(b, 1), reference.plane(b, 2));
        for i in 0..h * w {
            yuv[b * h * w + i] =
                rgb_to_yuv_pixel([pr[i].as_f64(), pg[i].as_f64(), pb[i].as_f64()]);
        }
    }
    let denom = 2.0 * sigma * sigma;
    let mut map = WeightMap::from_fn(n, h, w, window, |b, r, col, nr, nc| {
        // offsets past the middle mirror earlier ones and are filled below
        if (nr, nc) > (r, col) {
            return R::zero();
        }
        let p = yuv[b * h * w + r * w + col];
        let q = yuv[b * h * w + nr * w + nc];
        let d2: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
        R::from_f64((-d2 / denom).exp())
    });
    // w(i, i + o) = w(i + o, i): copy each mirrored offset from its twin
    let k_len = map.offsets.len();
    let hw = h * w;
    for b in 0..n {
        for k in k_len / 2..k_len {
            let (dy, dx) = map.offsets[k];
            let twin = k_len - 1 - k;
            debug_assert_eq!(map.offsets[twin], (-dy, -dx));
            for r in 0..h {
                let nr = r as isize + dy;
                if nr < 0 || nr as usize >= h {
                    continue;
                }
                for c in 0..w {
                    let nc = c as isize + dx;
                    if nc < 0 || nc as usize >= w {
                        continue;
                    }
                    let src = (b * k_len + twin) * hw + nr as usize * w + nc as usize;
                    map.data[(b * k_len + k) * hw + r * w + c] = map.data[src];
                }
            }
        }
    }
    Ok(map)
}

fn check_weight_shape<R: Real>(x: &Tensor<R>, weights: &WeightMap<R>) -> Result<()> {
    let (n, h, w) = weights.dims();
    if (x.batch(), x.height(), x.width()) != (n, h, w) {
        return Err(SciError::shape(
            "smoothness_loss",
            format!("tensor {:?} vs weight map {n}x{h}x{w}", x.shape()),
        ));
    }
    Ok(())
}

/// Visits every in-bounds ordered pair as `(pixel slice, neighbour slice, weight slice)`
/// aligned row segments.
#[inline(always)]
fn for_each_pair_row<R: Real>(
    x: &Tensor<R>,
    weights: &WeightMap<R>,
    mut f: impl FnMut(usize, usize, usize, usize, usize, &[R]),
) {
    let [n, c, h, w] = x.shape();
    for b in 0..n {
        for (k, &(dy, dx)) in weights.offsets().iter().enumerate() {
            let wplane = weights.plane(b, k);
            let r_lo = (-dy).max(0) as usize;
            let r_hi = (h as isize - dy.max(0)).max(0) as usize;
            let c_lo = (-dx).max(0) as usize;
            let c_hi = (w as isize - dx.max(0)).max(0) as usize;
            if c_lo >= c_hi {
                continue;
            }
            for r in r_lo..r_hi.max(r_lo) {
                let nr = (r as isize + dy) as usize;
                let wrow = &wplane[r * w + c_lo..r * w + c_hi];
                for ch in 0..c {
                    let i0 = ((b * c + ch) * h + r) * w + c_lo;
                    let j0 = ((b * c + ch) * h + nr) * w + (c_lo as isize + dx) as usize;
                    f(b, ch, i0, j0, c_hi - c_lo, wrow);
                }
            }
        }
    }
}

/// `Σ_t w_t |a_t − b_t|`, summed in independent lanes so it vectorises.
#[inline(always)]
fn weighted_abs_diff<R: Real>(a: &[R], b: &[R], w: &[R]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let (ac, bc, wc) = (a.chunks_exact(LANES), b.chunks_exact(LANES), w.chunks_exact(LANES));
    let tail: f64 = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .zip(wc.remainder())
        .map(|((x, y), wt)| wt.as_f64() * (x.as_f64() - y.as_f64()).abs())
        .sum();
    for ((x, y), wt) in ac.zip(bc).zip(wc) {
        for l in 0..LANES {
            acc[l] += wt[l].as_f64() * (x[l].as_f64() - y[l].as_f64()).abs();
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Sign with `sign(0) = 0`.
#[inline(always)]
fn sign(d: f64) -> f64 {
    ((d > 0.0) as i32 - (d < 0.0) as i32) as f64
}

/// `(1/N) Σ_i Σ_{j∈N(i)} w_{i,j} Σ_c |x_{i,c} - x_{j,c}|` with `N` the pixel count
/// (batch × height × width).
pub(crate) fn neighbor_l1<R: Real>(x: &Tensor<R>, weights: &WeightMap<R>) -> Result<f64> {
    check_weight_shape(x, weights)?;
    let data = x.data();
    let mut total = 0.0f64;
    for_each_pair_row(x, weights, |_, _, i0, j0, len, wrow| {
        total += weighted_abs_diff(&data[i0..i0 + len], &data[j0..j0 + len], wrow);
    });
    let pixels = x.batch() * x.height() * x.width();
    if pixels == 0 {
        return Err(SciError::EmptyReduction("smoothness mean"));
    }
    Ok(total / pixels as f64)
}

pub(crate) fn neighbor_l1_grad<R: Real>(
    x: &Tensor<R>,
    weights: &WeightMap<R>,
    upstream: f64,
) -> Tensor<R> {
    let data = x.data();
    let pixels = x.batch() * x.height() * x.width();
    let scale = upstream / pixels as f64;
    let mut g = vec![0.0f64; data.len()];
    let mut v = Vec::new();
    for_each_pair_row(x, weights, |_, _, i0, j0, len, wrow| {
        v.clear();
        v.extend(
            data[i0..i0 + len]
                .iter()
                .zip(&data[j0..j0 + len])
                .zip(wrow)
                .map(|((a, b), wt)| scale * wt.as_f64() * sign(a.as_f64() - b.as_f64())),
        );
        for (gi, vi) in g[i0..i0 + len].iter_mut().zip(&v) {
            *gi += vi;
        }
        for (gj, vi) in g[j0..j0 + len].iter_mut().zip(&v) {
            *gj -= vi;
        }
    });
    Tensor::new(x.shape(), g.into_iter().map(R::from_f64).collect()).expect("grad shape")
}

pub(crate) fn neighbor_l1_signs<R: Real>(x: &Tensor<R>, weights: &WeightMap<R>) -> Vec<i8> {
    let data = x.data();
    let mut out = Vec::new();
    for_each_pair_row(x, weights, |_, _, i0, j0, len, _| {
        for t in 0..len {
            let d = data[i0 + t] - data[j0 + t];
            out.push(if d > R::zero() {
                1
            } else if d < R::zero() {
                -1
            } else {
                0
            });
        }
    });
    out
}

/// Spatially-variant ℓ1 smoothness of one illumination map.
pub fn smoothness_loss<R: Real>(x: &Tensor<R>, weights: &WeightMap<R>) -> Result<f64> {
    neighbor_l1(x, weights)
}

/// Graph handles of one cascade stage needed by the objective.
#[derive(Debug, Clone, Copy)]
pub struct StageLossInputs {
    /// Stage illumination `x^t`.
    pub illumination: Var,
    /// Fidelity target `y + s^{t-1}` (just `y` for the first stage).
    pub target: Var,
}

/// Graph handles of the three loss scalars.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub fidelity: Var,
    pub smoothness: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<R: Real>(&self, graph: &Graph<R>) -> LossBreakdown {
        LossBreakdown {
            fidelity: graph.scalar(self.fidelity),
            smoothness: graph.scalar(self.smoothness),
            total: graph.scalar(self.total),
        }
    }
}

/// Records the total objective over all stages on `graph`.
///
/// The smoothness weights are computed from the current value of each target
/// and enter the graph as constants.
pub fn record_loss<R: Real>(
    graph: &mut Graph<R>,
    stages: &[StageLossInputs],
    config: &LossConfig,
) -> Result<LossVars> {
    config.validate()?;
    if stages.is_empty() {
        return Err(SciError::Input("loss needs at least one stage".into()));
    }
    let mut fidelity_terms = Vec::with_capacity(stages.len());
    let mut smooth_terms = Vec::with_capacity(stages.len());
    for (t, stage) in stages.iter().enumerate() {
        let diff = graph.sub(stage.illumination, stage.target)?;
        let sq = graph.square(diff);
        let f = graph.mean(sq)?;
        fidelity_terms.push((f, 1.0));

        let smooth_this = match config.smooth_stages {
            SmoothStages::All => true,
            SmoothStages::Final => t + 1 == stages.len(),
        };
        if smooth_this {
            let weights = smoothness_weights(graph.value(stage.target), config.sigma, config.window)?;
            let s = graph.neighbor_l1(stage.illumination, Arc::new(weights))?;
            smooth_terms.push((s, 1.0));
        }
    }
    let fidelity = graph.combine(&fidelity_terms)?;
    let smoothness = graph.combine(&smooth_terms)?;
    let total = graph.combine(&[(fidelity, config.alpha), (smoothness, config.beta)])?;
    Ok(LossVars {
        fidelity,
        smoothness,
        total,
    })
}

fn check_trace<R: Real>(trace: &StageTrace<R>, y: &Tensor<R>) -> Result<()> {
    if trace.stages.is_empty() {
        return Err(SciError::Input("stage trace is empty".into()));
    }
    for (t, stage) in trace.stages.iter().enumerate() {
        if stage.illumination.shape() != y.shape() {
            return Err(SciError::shape(
                "loss",
                format!("stage {t} illumination {:?} vs input {:?}", stage.illumination.shape(), y.shape()),
            ));
        }
    }
    Ok(())
}

/// Fidelity targets `y + s^{t-1}` for every stage of a trace, with `s^0 = 0`.
fn stage_targets<R: Real>(trace: &StageTrace<R>, y: &Tensor<R>) -> Result<Vec<Tensor<R>>> {
    let mut targets = Vec::with_capacity(trace.stages.len());
    targets.push(y.clone());
    for stage in &trace.stages[1..] {
        targets.push(match &stage.calibration {
            Some(s) => crate::ops::add(y, s)?,
            None => y.clone(),
        });
    }
    Ok(targets)
}

/// `Σ_t mean((x^t - (y + s^{t-1}))²)` over a recorded trace.
pub fn fidelity_loss<R: Real>(trace: &StageTrace<R>, y: &Tensor<R>) -> Result<f64> {
    check_trace(trace, y)?;
    let targets = stage_targets(trace, y)?;
    let mut total = 0.0;
    for (stage, target) in trace.stages.iter().zip(&targets) {
        let d = crate::ops::sub(&stage.illumination, target)?;
        total += d.map(|v| v * v).mean()?;
    }
    Ok(total)
}

/// Evaluates the full objective on a recorded trace.
pub fn total_loss<R: Real>(
    trace: &StageTrace<R>,
    y: &Tensor<R>,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    check_trace(trace, y)?;
    let targets = stage_targets(trace, y)?;
    let mut graph = Graph::new();
    let stages: Vec<StageLossInputs> = trace
        .stages
        .iter()
        .zip(targets)
        .map(|(stage, target)| StageLossInputs {
            illumination: graph.constant(stage.illumination.clone()),
            target: graph.constant(target),
        })
        .collect();
    let vars = record_loss(&mut graph, &stages, config)?;
    Ok(vars.breakdown(&graph))
}
