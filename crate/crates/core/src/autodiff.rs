//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value, so node ids are a
//! topological order by construction and [`Graph::backward`] simply walks the
//! tape in reverse.

use std::sync::Arc;

use crate::error::{Result, SciError};
use crate::losses::{self, WeightMap};
use crate::ops::{self, ConvParams, DIV_EPS};
use crate::tensor::{Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Kernel and bias handles of a convolution layer recorded as graph leaves.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub kernel: Var,
    /// Shape `(1, c_out, 1, 1)`.
    pub bias: Var,
}

#[derive(Debug)]
enum Op<R: Real> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    DivSafe(Var, Var),
    Clamp { input: Var, lo: R, hi: R },
    MulScalar(Var, R),
    Square(Var),
    Sum(Var),
    Mean(Var),
    NeighborL1 { input: Var, weights: Arc<WeightMap<R>> },
    Combine(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node<R: Real> {
    value: Tensor<R>,
    /// Full-precision value of scalar reductions.
    scalar: Option<f64>,
    op: Op<R>,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Graph<R: Real = f32> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, scalar: Option<f64>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            scalar,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, None, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor<R>) -> Var {
        self.push(value, None, Op::Leaf, true)
    }

    pub fn conv_parameters(&mut self, params: &ConvParams<R>) -> ConvVars {
        let c_out = params.c_out();
        let bias = Tensor::new([1, c_out, 1, 1], params.bias.clone()).expect("bias shape");
        ConvVars {
            kernel: self.parameter(params.kernel.clone()),
            bias: self.parameter(bias),
        }
    }

    pub fn conv_constants(&mut self, params: &ConvParams<R>) -> ConvVars {
        let c_out = params.c_out();
        let bias = Tensor::new([1, c_out, 1, 1], params.bias.clone()).expect("bias shape");
        ConvVars {
            kernel: self.constant(params.kernel.clone()),
            bias: self.constant(bias),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1×1×1` node, at full precision for reductions.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.scalar.unwrap_or_else(|| node.value.data()[0].as_f64())
    }

    pub fn conv2d(&mut self, input: Var, layer: ConvVars) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(layer.kernel);
        let [c_out, c_in, kh, kw] = k.shape();
        if (kh, kw) != (3, 3) {
            return Err(SciError::shape("conv2d", format!("kernel is {kh}x{kw}, not 3x3")));
        }
        if x.channels() != c_in {
            return Err(SciError::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {c_in}", x.channels()),
            ));
        }
        if x.height() == 0 || x.width() == 0 {
            return Err(SciError::shape("conv2d", "empty spatial extent"));
        }
        let b = self.value(layer.bias);
        if b.len() != c_out {
            return Err(SciError::shape("conv2d", "bias length differs from c_out"));
        }
        let out = ops::conv3x3(x, k.data(), b.data(), c_out);
        let needs = self.needs(input) || self.needs(layer.kernel) || self.needs(layer.bias);
        Ok(self.push(
            out,
            None,
            Op::Conv2d {
                input,
                kernel: layer.kernel,
                bias: layer.bias,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let needs = self.needs(input);
        self.push(out, None, Op::Relu(input), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, None, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, None, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, None, Op::Mul(a, b), needs))
    }

    pub fn div_safe(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::div_safe(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, None, Op::DivSafe(a, b), needs))
    }

    pub fn clamp(&mut self, input: Var, lo: R, hi: R) -> Var {
        let out = ops::clamp(self.value(input), lo, hi);
        let needs = self.needs(input);
        self.push(out, None, Op::Clamp { input, lo, hi }, needs)
    }

    pub fn mul_scalar(&mut self, input: Var, s: R) -> Var {
        let out = ops::mul_scalar(self.value(input), s);
        let needs = self.needs(input);
        self.push(out, None, Op::MulScalar(input, s), needs)
    }

    pub fn square(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v * v);
        let needs = self.needs(input);
        self.push(out, None, Op::Square(input), needs)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(R::from_f64(s)), Some(s), Op::Sum(input), needs)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let m = self.value(input).mean()?;
        let needs = self.needs(input);
        Ok(self.push(Tensor::scalar(R::from_f64(m)), Some(m), Op::Mean(input), needs))
    }

    /// Weighted neighbourhood ℓ1 penalty, see [`losses::smoothness_loss`].
    pub fn neighbor_l1(&mut self, input: Var, weights: Arc<WeightMap<R>>) -> Result<Var> {
        let s = losses::neighbor_l1(self.value(input), &weights)?;
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::scalar(R::from_f64(s)),
            Some(s),
            Op::NeighborL1 { input, weights },
            needs,
        ))
    }

    /// Linear combination `Σ coeff·term` of scalar nodes, evaluated in 64-bit.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            if !self.value(v).is_scalar() {
                return Err(SciError::shape("combine", "terms must be scalar nodes"));
            }
            total += c * self.scalar(v);
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            Tensor::scalar(R::from_f64(total)),
            Some(total),
            Op::Combine(terms.to_vec()),
            needs,
        ))
    }

    /// Per-element branch taken by every non-smooth node (ReLU, clamp, the
    /// div_safe floor, and the sign inside ℓ1 terms).
    ///
    /// Two evaluations with equal patterns lie on the same smooth piece, which
    /// is what a finite-difference check needs to know.
    pub fn branch_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(
                    self.value(*x)
                        .data()
                        .iter()
                        .map(|&v| (v > R::zero()) as i8),
                ),
                Op::Clamp { input, lo, hi } => {
                    out.extend(self.value(*input).data().iter().map(|&v| {
                        if v < *lo {
                            -1
                        } else if v > *hi {
                            1
                        } else {
                            0
                        }
                    }))
                }
                Op::DivSafe(_, b) => {
                    let eps = R::from_f64(DIV_EPS);
                    out.extend(self.value(*b).data().iter().map(|&v| (v >= eps) as i8))
                }
                Op::NeighborL1 { input, weights } => {
                    out.extend(losses::neighbor_l1_signs(self.value(*input), weights))
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(SciError::NonScalarLoss(loss_value.shape()));
        }
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                } => {
                    if self.needs(*input) {
                        let gi = ops::conv3x3_grad_input(&g, self.value(*kernel));
                        accumulate(&mut grads, *input, gi);
                    }
                    if self.needs(*kernel) || self.needs(*bias) {
                        let (gk, gb) = ops::conv3x3_grad_params(self.value(*input), &g);
                        if self.needs(*kernel) {
                            accumulate(&mut grads, *kernel, gk);
                        }
                        if self.needs(*bias) {
                            accumulate(&mut grads, *bias, gb);
                        }
                    }
                }
                Op::Relu(x) => {
                    let gx = self
                        .value(*x)
                        .zip_map(&g, |v, gv| if v > R::zero() { gv } else { R::zero() })?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv)?);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av)?);
                    }
                }
                Op::DivSafe(a, b) => {
                    let eps = R::from_f64(DIV_EPS);
                    let bv = self.value(*b);
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.zip_map(bv, |gv, d| gv / d.max(eps))?);
                    }
                    if self.needs(*b) {
                        let av = self.value(*a);
                        let data = g
                            .data()
                            .iter()
                            .zip(av.data())
                            .zip(bv.data())
                            .map(|((&gv, &n), &d)| {
                                if d >= eps {
                                    -gv * n / (d * d)
                                } else {
                                    R::zero()
                                }
                            })
                            .collect();
                        accumulate(&mut grads, *b, Tensor::new(g.shape(), data)?);
                    }
                }
                Op::Clamp { input, lo, hi } => {
                    let gx = self.value(*input).zip_map(&g, |v, gv| {
                        if v >= *lo && v <= *hi {
                            gv
                        } else {
                            R::zero()
                        }
                    })?;
                    accumulate(&mut grads, *input, gx);
                }
                Op::MulScalar(x, s) => {
                    accumulate(&mut grads, *x, g.map(|v| v * *s));
                }
                Op::Square(x) => {
                    let two = R::from_f64(2.0);
                    let gx = self.value(*x).zip_map(&g, |v, gv| two * v * gv)?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), gv));
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let gv = R::from_f64(g.data()[0].as_f64() / xv.len() as f64);
                    accumulate(&mut grads, *x, Tensor::full(xv.shape(), gv));
                }
                Op::NeighborL1 { input, weights } => {
                    let gx = losses::neighbor_l1_grad(self.value(*input), weights, g.data()[0].as_f64());
                    accumulate(&mut grads, *input, gx);
                }
                Op::Combine(terms) => {
                    let gv = g.data()[0].as_f64();
                    for &(v, c) in terms {
                        if self.needs(v) {
                            accumulate(&mut grads, v, Tensor::scalar(R::from_f64(gv * c)));
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<R: Real>(grads: &mut [Option<Tensor<R>>], v: Var, g: Tensor<R>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`]: gradients of leaf nodes.
#[derive(Debug)]
pub struct Gradients<R: Real = f32> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient for `v`, or `None` when no path reaches the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, with zeros when `v` does not influence the loss.
    pub fn wrt(&self, graph: &Graph<R>, v: Var) -> Tensor<R> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }
}
