//! Dense 4-D tensors in `(batch, channel, height, width)` layout.

use std::fmt::Debug;

use crate::error::{Result, SciError};

/// Scalar element type of a [`Tensor`].
///
/// Production code runs in `f32`; `f64` exists so numerical checks can run the
/// exact same kernels without single-precision rounding noise.
pub trait Real:
    num_traits::Float + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a·b + beta·c` for an `m×k` by `k×n` product with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! real_gemm {
    ($f:path) => {
        fn gemm(
            m: usize,
            k: usize,
            n: usize,
            a: &[Self],
            rsa: isize,
            csa: isize,
            b: &[Self],
            rsb: isize,
            csb: isize,
            beta: Self,
            c: &mut [Self],
            rsc: isize,
            csc: isize,
        ) {
            let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
                if rows == 0 || cols == 0 {
                    0
                } else {
                    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
                }
            };
            assert!(a.len() >= extent(m, k, rsa, csa), "gemm: a too short");
            assert!(b.len() >= extent(k, n, rsb, csb), "gemm: b too short");
            assert!(c.len() >= extent(m, n, rsc, csc), "gemm: c too short");
            // SAFETY: the asserts above keep every strided access in bounds.
            unsafe {
                $f(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c.as_mut_ptr(),
                    rsc,
                    csc,
                )
            }
        }
    };
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
    real_gemm!(matrixmultiply::sgemm);
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
    real_gemm!(matrixmultiply::dgemm);
}

pub type Shape = [usize; 4];

#[derive(Clone, PartialEq)]
pub struct Tensor<R: Real = f32> {
    shape: Shape,
    data: Vec<R>,
}

impl<R: Real> Debug for Tensor<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Shape, data: Vec<R>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(SciError::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: Shape, value: R) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, R::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, R::one())
    }

    /// A `1×1×1×1` tensor.
    pub fn scalar(value: R) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> R) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        data.push(f([ni, ci, hi, wi]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }
    #[inline]
    pub fn data(&self) -> &[R] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    #[inline]
    pub fn index(&self, [n, c, h, w]: [usize; 4]) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> R {
        self.data[self.index(idx)]
    }

    /// Contiguous `h×w` plane for one `(batch, channel)` pair.
    pub fn plane(&self, n: usize, c: usize) -> &[R] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Batch item `n` as a `1×c×h×w` tensor.
    pub fn item(&self, n: usize) -> Tensor<R> {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenates tensors of equal `c×h×w` along the batch axis.
    pub fn stack(items: &[Tensor<R>]) -> Result<Tensor<R>> {
        let first = items
            .first()
            .ok_or_else(|| SciError::shape("stack", "no tensors to stack"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.shape;
            if (tc, th, tw) != (c, h, w) {
                return Err(SciError::shape(
                    "stack",
                    format!("{:?} vs {:?}", first.shape, t.shape),
                ));
            }
            data.extend_from_slice(&t.data);
            n += tn;
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| S::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Tensor<R> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<R>, f: impl Fn(R, R) -> R) -> Result<Tensor<R>> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> Option<(R, R)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    /// Sum accumulated in 64-bit.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Mean accumulated in 64-bit; empty tensors are an error.
    pub fn mean(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(SciError::EmptyReduction("mean"));
        }
        Ok(self.sum() / self.data.len() as f64)
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Tensor<R>) -> Result<()> {
        if self.shape != other.shape {
            return Err(SciError::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }
}
