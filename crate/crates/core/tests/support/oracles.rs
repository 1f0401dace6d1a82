//! Direct-from-definition reference implementations. Nothing here calls the
//! kernels under test; everything loops over indices in `f64`.

#![allow(dead_code)]

use sci_core::ops::ConvParams;
use sci_core::{ImageBuffer, ModelWeights, Tensor};

/// Dense `n × c × h × w` array in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Arr {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_tensor<R: sci_core::Real>(t: &Tensor<R>) -> Self {
        Arr {
            shape: t.shape(),
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.shape;
        ((n * cc + c) * h + y) * w + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    /// Zero outside the image.
    pub fn at_padded(&self, n: usize, c: usize, y: isize, x: isize) -> f64 {
        let [_, _, h, w] = self.shape;
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            self.at(n, c, y as usize, x as usize)
        }
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Arr {
        Arr {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, o: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
        assert_eq!(self.shape, o.shape);
        Arr {
            shape: self.shape,
            data: self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn max_abs_diff<R: sci_core::Real>(&self, t: &Tensor<R>) -> f64 {
        assert_eq!(self.shape, t.shape());
        self.data
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// `out[n,o,y,x] = b[o] + Σ_{i,ky,kx} k[o,i,ky,kx] · in[n,i,y+ky-1,x+kx-1]`.
pub fn conv<R: sci_core::Real>(input: &Arr, layer: &ConvParams<R>) -> Arr {
    let [n, ci, h, w] = input.shape;
    let [co, kci, _, _] = layer.kernel.shape();
    assert_eq!(ci, kci);
    let k = layer.kernel.data();
    let mut out = Arr::zeros([n, co, h, w]);
    for b in 0..n {
        for o in 0..co {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = layer.bias[o].as_f64();
                    for i in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wgt = k[((o * ci + i) * 3 + ky) * 3 + kx].as_f64();
                                acc += wgt
                                    * input.at_padded(
                                        b,
                                        i,
                                        y as isize + ky as isize - 1,
                                        x as isize + kx as isize - 1,
                                    );
                            }
                        }
                    }
                    out.set(b, o, y, x, acc);
                }
            }
        }
    }
    out
}

/// Convolutions with ReLU between them and none after the last.
pub fn stack<R: sci_core::Real>(input: &Arr, layers: &[ConvParams<R>]) -> Arr {
    let mut x = input.clone();
    for (i, l) in layers.iter().enumerate() {
        x = conv(&x, l);
        if i + 1 < layers.len() {
            x = x.map(|v| v.max(0.0));
        }
    }
    x
}

pub const FLOOR: f64 = 1e-4;

/// Per-stage values of the unrolled cascade.
#[derive(Debug, Clone)]
pub struct OracleStage {
    pub input: Arr,
    pub residual: Arr,
    pub x: Arr,
    /// `y + s` for calibrated stages, `y` otherwise.
    pub target: Arr,
    pub s: Option<Arr>,
}

/// `mode`: "full", "residual-nocal" or "direct".
pub fn cascade<R: sci_core::Real>(y: &Arr, w: &ModelWeights<R>, stages: usize, mode: &str) -> Vec<OracleStage> {
    let mut out: Vec<OracleStage> = Vec::new();
    for t in 0..stages {
        let (input, target, s) = if t == 0 {
            (y.clone(), y.clone(), None)
        } else if mode == "full" {
            let prev = &out[t - 1].x;
            let z = y.zip(prev, |a, b| a / b.max(FLOOR));
            let s = stack(&z, &w.calibrator);
            let target = y.zip(&s, |a, b| a + b);
            (target.map(|v| v.clamp(0.0, 1.0)), target, Some(s))
        } else {
            (out[t - 1].x.clone(), y.clone(), None)
        };
        let residual = stack(&input, &w.estimator);
        let x = if mode == "direct" {
            residual.map(|u| u.clamp(FLOOR, 1.0))
        } else {
            input.zip(&residual, |v, u| (v + u).clamp(FLOOR, 1.0))
        };
        out.push(OracleStage {
            input,
            residual,
            x,
            target,
            s,
        });
    }
    out
}

pub fn yuv(r: f64, g: f64, b: f64) -> [f64; 3] {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    [y, (b - y) / (2.0 * 0.886), (r - y) / (2.0 * 0.701)]
}

/// `(1/(n h w)) Σ_i Σ_{j ≠ i in the window} w_ij Σ_c |x_ic − x_jc|` with Gaussian
/// YUV weights of `reference`.
pub fn smoothness(x: &Arr, reference: &Arr, sigma: f64, window: usize) -> f64 {
    let [n, c, h, w] = x.shape;
    let r = (window / 2) as isize;
    let mut total = 0.0;
    for b in 0..n {
        for iy in 0..h as isize {
            for ix in 0..w as isize {
                for jy in iy - r..=iy + r {
                    for jx in ix - r..=ix + r {
                        if (jy, jx) == (iy, ix) || jy < 0 || jx < 0 || jy >= h as isize || jx >= w as isize {
                            continue;
                        }
                        let p = |yy: isize, xx: isize| {
                            let (yy, xx) = (yy as usize, xx as usize);
                            yuv(reference.at(b, 0, yy, xx), reference.at(b, 1, yy, xx), reference.at(b, 2, yy, xx))
                        };
                        let (pi, pj) = (p(iy, ix), p(jy, jx));
                        let d2: f64 = (0..3).map(|k| (pi[k] - pj[k]).powi(2)).sum();
                        let wij = (-d2 / (2.0 * sigma * sigma)).exp();
                        for ch in 0..c {
                            let a = x.at(b, ch, iy as usize, ix as usize);
                            let bb = x.at(b, ch, jy as usize, jx as usize);
                            total += wij * (a - bb).abs();
                        }
                    }
                }
            }
        }
    }
    total / (n * h * w) as f64
}

pub fn mean_sq_diff(a: &Arr, b: &Arr) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64
}

/// `(fidelity, smoothness, total)` of an oracle cascade.
pub fn objective(stages: &[OracleStage], alpha: f64, beta: f64, sigma: f64, window: usize, final_only: bool) -> (f64, f64, f64) {
    let mut f = 0.0;
    let mut s = 0.0;
    for (t, st) in stages.iter().enumerate() {
        f += mean_sq_diff(&st.x, &st.target);
        if !final_only || t + 1 == stages.len() {
            s += smoothness(&st.x, &st.target, sigma, window);
        }
    }
    (f, s, alpha * f + beta * s)
}

// ---- metrics ----

fn luma(img: &ImageBuffer, x: usize, y: usize) -> f64 {
    let p = img.pixel(x, y);
    if img.channels == 3 {
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    } else {
        p[0] as f64
    }
}

fn level(v: f64) -> usize {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as usize
}

pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let mut se = 0.0;
    let mut count = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            for (p, q) in a.pixel(x, y).iter().zip(b.pixel(x, y)) {
                se += (*p as f64 - *q as f64).powi(2);
                count += 1;
            }
        }
    }
    let mse = se / count as f64;
    if mse == 0.0 {
        100.0
    } else {
        (-10.0 * mse.log10()).min(100.0)
    }
}

/// Gaussian-windowed SSIM on luma, written with a full 2-D window per position.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let size = 11usize;
    let sigma = 1.5f64;
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut g = vec![vec![0.0; size]; size];
    let mut norm = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            norm += *v;
        }
    }
    let mut total = 0.0;
    let mut positions = 0usize;
    for y0 in 0..=a.height - size {
        for x0 in 0..=a.width - size {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let wgt = g[i][j] / norm;
                    ma += wgt * luma(a, x0 + j, y0 + i);
                    mb += wgt * luma(b, x0 + j, y0 + i);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let wgt = g[i][j] / norm;
                    let da = luma(a, x0 + j, y0 + i) - ma;
                    let db = luma(b, x0 + j, y0 + i) - mb;
                    va += wgt * da * da;
                    vb += wgt * db * db;
                    cov += wgt * da * db;
                }
            }
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            positions += 1;
        }
    }
    total / positions as f64
}

pub fn de(img: &ImageBuffer) -> f64 {
    let mut hist = vec![0.0; 256];
    for y in 0..img.height {
        for x in 0..img.width {
            hist[level(luma(img, x, y))] += 1.0;
        }
    }
    let n = (img.width * img.height) as f64;
    let mut h = 0.0;
    for c in hist {
        if c > 0.0 {
            let p = c / n;
            h -= p * p.log2();
        }
    }
    h
}

pub fn eme(img: &ImageBuffer, k1: usize, k2: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..k1 {
        for j in 0..k2 {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for y in i * img.height / k1..(i + 1) * img.height / k1 {
                for x in j * img.width / k2..(j + 1) * img.width / k2 {
                    let l = level(luma(img, x, y)) as f64;
                    lo = lo.min(l);
                    hi = hi.max(l);
                }
            }
            total += 20.0 * ((hi + 1e-4) / (lo + 1e-4)).log10();
        }
    }
    total / (k1 * k2) as f64
}

pub fn loe(original: &ImageBuffer, enhanced: &ImageBuffer) -> f64 {
    let dh = original.height.min(50);
    let dw = original.width.min(50);
    let lightness = |img: &ImageBuffer| -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..dh {
            for j in 0..dw {
                let p = img.pixel(j * img.width / dw, i * img.height / dh);
                out.push(p.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max));
            }
        }
        out
    };
    let (lo, le) = (lightness(original), lightness(enhanced));
    let m = lo.len();
    let mut flips = 0usize;
    for x in 0..m {
        for y in 0..m {
            if (lo[x] >= lo[y]) ^ (le[x] >= le[y]) {
                flips += 1;
            }
        }
    }
    1000.0 * flips as f64 / (m * m) as f64
}
