//! Full-reference (PSNR, SSIM) and no-reference (DE, EME, LOE) quality
//! metrics, plus the stage-convergence gap of a cascade trace.
//!
//! All accumulation is in `f64`.

use std::io::Write;

use crate::error::{Result, SciError};
use crate::imaging::{quantize, ImageBuffer};
use crate::model::StageTrace;
use crate::tensor::Real;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const EME_EPS: f64 = 1e-4;
/// Longest side of the lightness maps compared by [`loe`].
pub const LOE_MAX_SIDE: usize = 50;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(op: &'static str, a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(SciError::shape(
            op,
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.width, a.height, a.channels, b.width, b.height, b.channels
            ),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with peak value 1.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    same_shape("psnr", a, b)?;
    if a.data.is_empty() {
        return Err(SciError::EmptyReduction("psnr"));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Which planes SSIM is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SsimChannels {
    /// BT.601 luma only.
    #[default]
    Luminance,
    /// Mean of per-channel SSIM.
    PerChannel,
}

fn gaussian_taps() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable Gaussian filter of a `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a, w, h, &taps);
    let mu_b = filter_valid(b, w, h, &taps);
    let aa = filter_valid(&prod(&|x, _| x * x), w, h, &taps);
    let bb = filter_valid(&prod(&|_, y| y * y), w, h, &taps);
    let ab = filter_valid(&prod(&|x, y| x * y), w, h, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Single-scale SSIM on luma (11×11 Gaussian window, σ = 1.5, L = 1).
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    ssim_with(a, b, SsimChannels::Luminance)
}

pub fn ssim_with(a: &ImageBuffer, b: &ImageBuffer, channels: SsimChannels) -> Result<f64> {
    same_shape("ssim", a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(SciError::Input(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    match channels {
        SsimChannels::Luminance => Ok(ssim_plane(&a.luminance(), &b.luminance(), a.width, a.height)),
        SsimChannels::PerChannel => {
            let c = a.channels;
            let plane = |img: &ImageBuffer, ch: usize| -> Vec<f64> {
                img.data.iter().skip(ch).step_by(c).map(|&v| v as f64).collect()
            };
            let sum: f64 = (0..c)
                .map(|ch| ssim_plane(&plane(a, ch), &plane(b, ch), a.width, a.height))
                .sum();
            Ok(sum / c as f64)
        }
    }
}

fn luma_levels(img: &ImageBuffer) -> Vec<u8> {
    img.luminance().into_iter().map(|y| quantize(y as f32)).collect()
}

/// Discrete entropy (bits) of the 256-bin histogram of 8-bit luma.
pub fn de(img: &ImageBuffer) -> f64 {
    let levels = luma_levels(img);
    if levels.is_empty() {
        return 0.0;
    }
    let mut hist = [0usize; 256];
    for &l in &levels {
        hist[l as usize] += 1;
    }
    let n = levels.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Block-contrast measure of enhancement over a `rows × cols` grid of blocks
/// on 8-bit luma.
pub fn eme(img: &ImageBuffer, rows: usize, cols: usize) -> Result<f64> {
    if rows == 0 || cols == 0 || rows > img.height || cols > img.width {
        return Err(SciError::Input(format!(
            "EME grid {rows}x{cols} does not fit a {}x{} image",
            img.width, img.height
        )));
    }
    let levels = luma_levels(img);
    let (w, h) = (img.width, img.height);
    let mut total = 0.0;
    for br in 0..rows {
        let (y0, y1) = (br * h / rows, (br + 1) * h / rows);
        for bc in 0..cols {
            let (x0, x1) = (bc * w / cols, (bc + 1) * w / cols);
            let mut lo = u8::MAX;
            let mut hi = u8::MIN;
            for y in y0..y1 {
                for &v in &levels[y * w + x0..y * w + x1] {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            total += 20.0 * ((hi as f64 + EME_EPS) / (lo as f64 + EME_EPS)).log10();
        }
    }
    Ok(total / (rows * cols) as f64)
}

/// EME with the default 8×8 block grid.
pub fn eme_default(img: &ImageBuffer) -> Result<f64> {
    eme(img, 8, 8)
}

/// Per-pixel lightness (max over channels), nearest-neighbour downsampled so
/// that neither side exceeds [`LOE_MAX_SIDE`].
fn lightness_grid(img: &ImageBuffer) -> Vec<f64> {
    let (w, h, c) = (img.width, img.height, img.channels);
    let (dw, dh) = (w.min(LOE_MAX_SIDE), h.min(LOE_MAX_SIDE));
    let mut out = Vec::with_capacity(dw * dh);
    for i in 0..dh {
        let y = i * h / dh;
        for j in 0..dw {
            let x = j * w / dw;
            let p = &img.data[(y * w + x) * c..(y * w + x + 1) * c];
            out.push(p.iter().fold(f64::MIN, |m, &v| m.max(v as f64)));
        }
    }
    out
}

/// Lightness-order error: the number of ordered pixel pairs whose relative
/// lightness order differs between `original` and `enhanced`, per 1000 pairs.
pub fn loe(original: &ImageBuffer, enhanced: &ImageBuffer) -> Result<f64> {
    same_shape("loe", original, enhanced)?;
    let lo = lightness_grid(original);
    let le = lightness_grid(enhanced);
    let m = lo.len();
    if m == 0 {
        return Err(SciError::EmptyReduction("loe"));
    }
    let mut flips = 0u64;
    for i in 0..m {
        let (oi, ei) = (lo[i], le[i]);
        flips += lo
            .iter()
            .zip(&le)
            .filter(|(&oj, &ej)| (oi >= oj) != (ei >= ej))
            .count() as u64;
    }
    Ok(1000.0 * flips as f64 / (m as f64 * m as f64))
}

/// `d_t = mean |x^{t+1} - x^t|` for each consecutive pair of stage illuminations.
pub fn stage_convergence<R: Real>(trace: &StageTrace<R>) -> Result<Vec<f64>> {
    if trace.len() < 2 {
        return Err(SciError::Input(format!(
            "stage convergence needs at least 2 stages, got {}",
            trace.len()
        )));
    }
    trace
        .stages
        .windows(2)
        .map(|pair| {
            let a = &pair[0].illumination;
            let b = &pair[1].illumination;
            let d = b.zip_map(a, |x, y| (x - y).abs())?;
            d.mean()
        })
        .collect()
}

/// Metric values for one image; `None` where a metric was not requested or
/// lacked its reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricRow {
    pub image: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub de: Option<f64>,
    pub eme: Option<f64>,
    pub loe: Option<f64>,
}

impl MetricRow {
    fn fields(&self) -> [Option<f64>; 5] {
        [self.psnr, self.ssim, self.de, self.eme, self.loe]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub const HEADER: &'static str = "image,psnr,ssim,de,eme,loe";

    /// Column means over rows that have the column; the row is named `mean`.
    pub fn means(&self) -> MetricRow {
        let mut sums = [0.0f64; 5];
        let mut counts = [0usize; 5];
        for row in &self.rows {
            for (i, v) in row.fields().iter().enumerate() {
                if let Some(v) = v {
                    sums[i] += v;
                    counts[i] += 1;
                }
            }
        }
        let mean = |i: usize| (counts[i] > 0).then(|| sums[i] / counts[i] as f64);
        MetricRow {
            image: "mean".into(),
            psnr: mean(0),
            ssim: mean(1),
            de: mean(2),
            eme: mean(3),
            loe: mean(4),
        }
    }

    /// Writes the per-image rows followed by the `mean` row.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", Self::HEADER)?;
        for row in self.rows.iter().chain(std::iter::once(&self.means())) {
            let cells: Vec<String> = row
                .fields()
                .iter()
                .map(|v| v.map(|v| format!("{v:.6}")).unwrap_or_default())
                .collect();
            writeln!(out, "{},{}", row.image, cells.join(","))?;
        }
        Ok(())
    }
}
