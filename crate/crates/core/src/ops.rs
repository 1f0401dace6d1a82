//! Eager tensor kernels shared by the autodiff graph and the inference path.
//!
//! Convolutions run as im2col + GEMM; reductions accumulate in `f64`.

use crate::error::{Result, SciError};
use crate::tensor::{Real, Tensor};

/// Floor applied to the denominator of [`div_safe`].
pub const DIV_EPS: f64 = 1e-4;

/// Kernel and bias of a 3×3 convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<R: Real = f32> {
    /// `(c_out, c_in, 3, 3)`
    pub kernel: Tensor<R>,
    pub bias: Vec<R>,
}

impl<R: Real> ConvParams<R> {
    pub fn new(kernel: Tensor<R>, bias: Vec<R>) -> Result<Self> {
        let [c_out, _, kh, kw] = kernel.shape();
        if kh != 3 || kw != 3 {
            return Err(SciError::shape(
                "ConvParams",
                format!("kernel must be 3x3, got {kh}x{kw}"),
            ));
        }
        if bias.len() != c_out {
            return Err(SciError::shape(
                "ConvParams",
                format!("{} biases for {c_out} output channels", bias.len()),
            ));
        }
        Ok(Self { kernel, bias })
    }

    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Self {
            kernel: Tensor::zeros([c_out, c_in, 3, 3]),
            bias: vec![R::zero(); c_out],
        }
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    pub fn cast<S: Real>(&self) -> ConvParams<S> {
        ConvParams {
            kernel: self.kernel.cast(),
            bias: self.bias.iter().map(|b| S::from_f64(b.as_f64())).collect(),
        }
    }
}

/// 3×3 cross-correlation with zero "same" padding plus per-channel bias.
pub fn conv2d<R: Real>(input: &Tensor<R>, params: &ConvParams<R>) -> Result<Tensor<R>> {
    if input.channels() != params.c_in() {
        return Err(SciError::shape(
            "conv2d",
            format!(
                "input has {} channels, kernel expects {}",
                input.channels(),
                params.c_in()
            ),
        ));
    }
    if input.height() == 0 || input.width() == 0 {
        return Err(SciError::shape("conv2d", "empty spatial extent"));
    }
    Ok(conv3x3(input, params.kernel.data(), &params.bias, params.c_out()))
}

/// Unfolds one image `(c_in, h, w)` into `(c_in·9, h·w)` columns; row
/// `ci·9 + ky·3 + kx` holds the input shifted by `(ky − 1, kx − 1)`, zero outside.
fn im2col<R: Real>(image: &[R], c_in: usize, h: usize, w: usize, col: &mut [R]) {
    let hw = h * w;
    for ci in 0..c_in {
        let plane = &image[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for r in 0..h {
                    let out = &mut dst[r * w..(r + 1) * w];
                    let src_r = r + ky;
                    if src_r == 0 || src_r > h {
                        out.fill(R::zero());
                        continue;
                    }
                    let src = &plane[(src_r - 1) * w..src_r * w];
                    shift_row(out, src, kx);
                }
            }
        }
    }
}

/// `out[x] = src[x + kx − 1]`, zero where out of range.
#[inline(always)]
fn shift_row<R: Real>(out: &mut [R], src: &[R], kx: usize) {
    let w = out.len();
    match kx {
        0 => {
            out[0] = R::zero();
            out[1..].copy_from_slice(&src[..w - 1]);
        }
        1 => out.copy_from_slice(src),
        _ => {
            out[..w - 1].copy_from_slice(&src[1..]);
            out[w - 1] = R::zero();
        }
    }
}

/// Adjoint of [`im2col`]: adds every column entry back onto its source pixel.
fn col2im_add<R: Real>(col: &[R], c_in: usize, h: usize, w: usize, image: &mut [R]) {
    let hw = h * w;
    for ci in 0..c_in {
        let plane = &mut image[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let src = &col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for r in 0..h {
                    let src_r = r + ky;
                    if src_r == 0 || src_r > h {
                        continue;
                    }
                    let row = &src[r * w..(r + 1) * w];
                    let dst = &mut plane[(src_r - 1) * w..src_r * w];
                    match kx {
                        0 => add_into(&mut dst[..w - 1], &row[1..]),
                        1 => add_into(dst, row),
                        _ => add_into(&mut dst[1..], &row[..w - 1]),
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
struct Mat<'a, R> {
    data: &'a [R],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a, R: Real> Mat<'a, R> {
    fn new(data: &'a [R], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols, transposed: false }
    }

    fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    /// `(rows, cols, row stride, col stride)` of the logical operand.
    fn layout(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` with `c` row-major.
fn gemm<R: Real>(a: Mat<'_, R>, b: Mat<'_, R>, beta: R, c: &mut [R]) {
    let (m, k, rsa, csa) = a.layout();
    let (kb, n, rsb, csb) = b.layout();
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!(c.len(), m * n, "gemm output size");
    R::gemm(m, k, n, a.data, rsa, csa, b.data, rsb, csb, beta, c, n as isize, 1);
}

pub(crate) fn conv3x3<R: Real>(
    input: &Tensor<R>,
    kernel: &[R],
    bias: &[R],
    c_out: usize,
) -> Tensor<R> {
    let [n, c_in, h, w] = input.shape();
    let hw = h * w;
    let mut out = vec![R::zero(); n * c_out * hw];
    let mut col = vec![R::zero(); c_in * 9 * hw];
    let weights = Mat::new(kernel, c_out, c_in * 9);
    for b in 0..n {
        im2col(&input.data()[b * c_in * hw..(b + 1) * c_in * hw], c_in, h, w, &mut col);
        let dst = &mut out[b * c_out * hw..(b + 1) * c_out * hw];
        for (co, plane) in dst.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias[co]);
        }
        gemm(weights, Mat::new(&col, c_in * 9, hw), R::one(), dst);
    }
    Tensor::new([n, c_out, h, w], out).expect("conv output shape")
}

/// Gradient of a same-padded 3×3 convolution with respect to its input.
pub(crate) fn conv3x3_grad_input<R: Real>(
    grad_out: &Tensor<R>,
    kernel: &Tensor<R>,
) -> Tensor<R> {
    let [c_out, c_in, _, _] = kernel.shape();
    let [n, _, h, w] = grad_out.shape();
    let hw = h * w;
    let mut grad = vec![R::zero(); n * c_in * hw];
    let mut col = vec![R::zero(); c_in * 9 * hw];
    let weights = Mat::new(kernel.data(), c_out, c_in * 9);
    for b in 0..n {
        let g = Mat::new(&grad_out.data()[b * c_out * hw..(b + 1) * c_out * hw], c_out, hw);
        gemm(weights.t(), g, R::zero(), &mut col);
        col2im_add(&col, c_in, h, w, &mut grad[b * c_in * hw..(b + 1) * c_in * hw]);
    }
    Tensor::new([n, c_in, h, w], grad).expect("conv input grad shape")
}

/// Gradients of a same-padded 3×3 convolution with respect to kernel and bias.
pub(crate) fn conv3x3_grad_params<R: Real>(
    input: &Tensor<R>,
    grad_out: &Tensor<R>,
) -> (Tensor<R>, Tensor<R>) {
    let [n, c_in, h, w] = input.shape();
    let c_out = grad_out.channels();
    let hw = h * w;
    let mut gk = vec![R::zero(); c_out * c_in * 9];
    let mut gb = vec![0.0f64; c_out];
    let mut col = vec![R::zero(); c_in * 9 * hw];
    for b in 0..n {
        im2col(&input.data()[b * c_in * hw..(b + 1) * c_in * hw], c_in, h, w, &mut col);
        let g = &grad_out.data()[b * c_out * hw..(b + 1) * c_out * hw];
        gemm(Mat::new(g, c_out, hw), Mat::new(&col, c_in * 9, hw).t(), R::one(), &mut gk);
        for (co, plane) in g.chunks_exact(hw).enumerate() {
            gb[co] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    let gb = gb.into_iter().map(R::from_f64).collect();
    (
        Tensor::new([c_out, c_in, 3, 3], gk).expect("kernel grad shape"),
        Tensor::new([1, c_out, 1, 1], gb).expect("bias grad shape"),
    )
}

pub fn relu<R: Real>(input: &Tensor<R>) -> Tensor<R> {
    input.map(|v| if v > R::zero() { v } else { R::zero() })
}

pub fn add<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    binary("add", a, b, |x, y| x + y)
}

pub fn sub<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    binary("sub", a, b, |x, y| x - y)
}

pub fn mul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    binary("mul", a, b, |x, y| x * y)
}

/// `a / max(b, DIV_EPS)`
pub fn div_safe<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let eps = R::from_f64(DIV_EPS);
    binary("div_safe", a, b, |x, y| x / y.max(eps))
}

pub fn clamp<R: Real>(input: &Tensor<R>, lo: R, hi: R) -> Tensor<R> {
    input.map(|v| v.max(lo).min(hi))
}

pub fn add_scalar<R: Real>(input: &Tensor<R>, s: R) -> Tensor<R> {
    input.map(|v| v + s)
}

pub fn mul_scalar<R: Real>(input: &Tensor<R>, s: R) -> Tensor<R> {
    input.map(|v| v * s)
}

fn binary<R: Real>(
    op: &'static str,
    a: &Tensor<R>,
    b: &Tensor<R>,
    f: impl Fn(R, R) -> R,
) -> Result<Tensor<R>> {
    a.expect_same_shape(op, b)?;
    a.zip_map(b, f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Reduces a tensor to a scalar, accumulating in 64-bit.
pub fn reduce<R: Real>(op: Reduction, input: &Tensor<R>) -> Result<f64> {
    match op {
        Reduction::Sum => Ok(input.sum()),
        Reduction::Mean => input.mean(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_kernel() -> ConvParams<f64> {
        ConvParams::new(Tensor::ones([1, 1, 3, 3]), vec![0.0]).unwrap()
    }

    fn delta_kernel(c: usize) -> ConvParams<f32> {
        let mut k = Tensor::zeros([c, c, 3, 3]);
        for i in 0..c {
            let idx = k.index([i, i, 1, 1]);
            k.data_mut()[idx] = 1.0;
        }
        ConvParams::new(k, vec![0.0; c]).unwrap()
    }

    #[test]
    fn ones_kernel_counts_valid_neighbours() {
        let out = conv2d(&Tensor::<f64>::ones([1, 1, 3, 3]), &ones_kernel()).unwrap();
        assert_eq!(out.get([0, 0, 1, 1]), 9.0);
        for corner in [[0, 0], [0, 2], [2, 0], [2, 2]] {
            assert_eq!(out.get([0, 0, corner[0], corner[1]]), 4.0);
        }
        for edge in [[0, 1], [1, 0], [1, 2], [2, 1]] {
            assert_eq!(out.get([0, 0, edge[0], edge[1]]), 6.0);
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::<f32>::from_fn([2, 3, 5, 7], |[n, c, h, w]| {
            ((n * 31 + c * 17 + h * 5 + w) % 11) as f32 * 0.1 - 0.3
        });
        assert_eq!(conv2d(&x, &delta_kernel(3)).unwrap(), x);
    }

    #[test]
    fn zero_kernel_broadcasts_bias() {
        let x = Tensor::<f32>::full([1, 2, 4, 4], 0.7);
        let p = ConvParams::new(Tensor::zeros([3, 2, 3, 3]), vec![0.5, -1.0, 2.0]).unwrap();
        let out = conv2d(&x, &p).unwrap();
        for c in 0..3 {
            assert!(out.plane(0, c).iter().all(|&v| v == p.bias[c]));
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let err = conv2d(&x, &delta_kernel(3)).unwrap_err();
        assert!(matches!(err, SciError::Shape { op: "conv2d", .. }));
    }

    #[test]
    fn conv_handles_single_pixel() {
        let x = Tensor::<f64>::full([1, 1, 1, 1], 2.0);
        let out = conv2d(&x, &ones_kernel()).unwrap();
        assert_eq!(out.data(), &[2.0]);
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::<f32>::new([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::<f32>::full([1, 1, 2, 2], 0.3);
        assert_eq!(relu(&pos), pos);
        let neg = Tensor::<f32>::full([1, 1, 2, 2], -0.3);
        assert_eq!(relu(&neg), Tensor::zeros([1, 1, 2, 2]));
    }

    #[test]
    fn elementwise_cases() {
        let y = Tensor::<f32>::from_fn([1, 3, 2, 2], |[_, c, h, w]| 0.1 + (c + h + w) as f32 * 0.2);
        assert!(div_safe(&y, &y).unwrap().data().iter().all(|&v| v == 1.0));
        let x = Tensor::<f32>::new([1, 1, 1, 3], vec![-0.5, 0.5, 1.5]).unwrap();
        assert_eq!(clamp(&x, 1e-4, 1.0).data(), &[1e-4, 0.5, 1.0]);
        assert_eq!(add(&y, &Tensor::zeros(y.shape())).unwrap(), y);
        assert!(add(&y, &x).is_err());
    }

    #[test]
    fn div_safe_floors_denominator() {
        let a = Tensor::<f32>::full([1, 1, 1, 2], 1.0);
        let b = Tensor::<f32>::new([1, 1, 1, 2], vec![0.0, -3.0]).unwrap();
        let q = div_safe(&a, &b).unwrap();
        assert!(q.data().iter().all(|&v| (v - 1e4).abs() < 1e-1));
    }

    #[test]
    fn reductions() {
        let t = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(reduce(Reduction::Sum, &t).unwrap(), 10.0);
        assert_eq!(reduce(Reduction::Mean, &Tensor::<f32>::full([1, 3, 2, 2], 0.5)).unwrap(), 0.5);
        assert!(reduce(Reduction::Mean, &Tensor::<f32>::zeros([1, 0, 2, 2])).is_err());
    }
}
