//! Reverse-mode autodiff tape.
//!
//! A [`Tape`] records every forward operation in topological order; each
//! node keeps its output value and a backward rule referencing its input
//! node ids. [`Tape::backward`] walks the records in reverse and
//! accumulates gradients into every leaf created with `requires_grad`.
//!
//! Gradients accumulate across repeated `backward` calls; callers zero (or
//! rebuild the tape) between optimizer steps.

use rayon::prelude::*;

use super::kernels;
use super::{strides_of, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    MulConst(Var, T),
    ScalarMul { scalar: Var, x: Var },
    Relu(Var),
    Abs(Var),
    Rsqrt(Var),
    MatMul { a: Var, b: Var },
    SwapLast2(Var),
    Reshape(Var),
    RepeatAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    Conv1dSame { x: Var, kernel: Var, bias: Var },
    ClassMean { x: Var, labels: Vec<usize>, counts: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation graph. Single-writer; values are immutable once
/// pushed, so reading them from other threads is safe.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Work below this many scalar ops stays single-threaded.
const PAR_THRESHOLD: usize = 1 << 15;

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert!(value.is_all_finite(), "non-finite forward output");
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Insert a leaf. Gradient is tracked only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never tracks gradients (inputs, frozen statistics).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated for a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x - *y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let data = self.value(x).data().iter().map(|v| *v + c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.requires(x);
        self.push(value, rg, Op::AddConst(x))
    }

    pub fn mul_const(&mut self, x: Var, c: T) -> Var {
        let data = self.value(x).data().iter().map(|v| *v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.requires(x);
        self.push(value, rg, Op::MulConst(x, c))
    }

    /// Multiply a tensor by a learnable scalar (one-element tensor).
    pub fn scalar_mul(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if self.value(scalar).numel() != 1 {
            return Err(Error::Contract(format!(
                "scalar_mul expects a one-element scalar, got shape {:?}",
                self.shape(scalar)
            )));
        }
        let s = self.value(scalar).data()[0];
        let data = self.value(x).data().iter().map(|v| *v * s).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.requires(scalar) || self.requires(x);
        Ok(self.push(value, rg, Op::ScalarMul { scalar, x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| if *v > T::zero() { *v } else { T::zero() })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.requires(x);
        self.push(value, rg, Op::Relu(x))
    }

    /// Elementwise absolute value; the backward rule uses sign(x) with
    /// subgradient 0 at exactly 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.abs()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.requires(x);
        self.push(value, rg, Op::Abs(x))
    }

    /// Elementwise 1/sqrt(x). Caller guarantees x > 0 (e.g. variance + eps).
    pub fn rsqrt(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| T::one() / v.sqrt())
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.requires(x);
        self.push(value, rg, Op::Rsqrt(x))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.requires(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Tile a unit axis `count` times (the explicit "shape C copies" step).
    pub fn repeat_axis(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { axis, shape });
        }
        if shape[axis] != 1 {
            return Err(Error::Contract(format!(
                "repeat_axis needs extent 1 at axis {axis}, shape is {shape:?}"
            )));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * count);
        for o in 0..outer {
            let block = &src[o * inner..(o + 1) * inner];
            for _ in 0..count {
                data.extend_from_slice(block);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = count;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.requires(x);
        Ok(self.push(value, rg, Op::RepeatAxis { x, axis }))
    }

    /// Transpose the trailing two axes (materialized).
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Contract(format!(
                "swap_last2 needs rank >= 2, shape is {shape:?}"
            )));
        }
        let value = swap_last2_tensor(self.value(x));
        let rg = self.requires(x);
        Ok(self.push(value, rg, Op::SwapLast2(x)))
    }

    // ---- reductions and normalisation ------------------------------------

    /// Softmax along `axis`, computed with max-subtraction for stability.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { axis, shape });
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * extent + e) * inner + i;
                let mut max = src[idx(0)];
                for e in 1..extent {
                    if src[idx(e)] > max {
                        max = src[idx(e)];
                    }
                }
                let mut denom = T::zero();
                for e in 0..extent {
                    let exp = (src[idx(e)] - max).exp();
                    data[idx(e)] = exp;
                    denom += exp;
                }
                for e in 0..extent {
                    data[idx(e)] /= denom;
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.requires(x);
        Ok(self.push(value, rg, Op::Softmax { x, axis }))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn reduce_mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { axis, shape });
        }
        if shape[axis] == 0 {
            return Err(Error::EmptyReduction { axis, shape });
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let inv = T::one() / T::from_f64(extent as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let row = &src[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                kernels::axpy(inv, row, &mut data[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        let rg = self.requires(x);
        Ok(self.push(value, rg, Op::MeanAxis { x, axis }))
    }

    /// Sum along `axis`; the axis is removed from the shape. Summation is
    /// direct (not mean-rescaled), so equal slices add exactly.
    pub fn reduce_sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { axis, shape });
        }
        if shape[axis] == 0 {
            return Err(Error::EmptyReduction { axis, shape });
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let row = &src[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                kernels::axpy(T::one(), row, &mut data[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        let rg = self.requires(x);
        Ok(self.push(value, rg, Op::SumAxis { x, axis }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = kernels::sum_slice(self.value(x).data());
        let rg = self.requires(x);
        self.push(Tensor::scalar(total), rg, Op::SumAll(x))
    }

    // ---- linear algebra ---------------------------------------------------

    /// Batched matrix product `[..., M, K] x [..., K, P] -> [..., M, P]`.
    /// Leading dimensions broadcast against each other.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let plan = MatmulPlan::new(&sa, &sb).ok_or_else(|| Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (m, k, p) = (plan.m, plan.k, plan.p);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = vec![T::zero(); plan.batches * m * p];
        let work = plan.batches * m * k * p;
        let run = |(bi, out): (usize, &mut [T])| {
            let (ai, bi2) = plan.operand_batches(bi);
            kernels::matmul_acc(
                &av[ai * m * k..(ai + 1) * m * k],
                &bv[bi2 * k * p..(bi2 + 1) * k * p],
                out,
                m,
                k,
                p,
            );
        };
        if work >= PAR_THRESHOLD && plan.batches > 1 {
            data.par_chunks_mut(m * p).enumerate().for_each(run);
        } else {
            data.chunks_mut(m * p).enumerate().for_each(run);
        }
        let value = Tensor::new(plan.out_shape.clone(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::MatMul { a, b }))
    }

    // ---- structured ops ---------------------------------------------------

    /// Zero-padded stride-1 "same" convolution.
    ///
    /// `x` is [N, C_in, T], `kernel` [C_out, C_in, k], `bias` [C_out];
    /// output is [N, C_out, T] with pad_left = floor((k-1)/2).
    pub fn conv1d_same(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 3 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_same",
                lhs: sx,
                rhs: sk,
            });
        }
        if sb.len() != 1 || sb[0] != sk[0] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_same bias",
                lhs: sk,
                rhs: sb,
            });
        }
        let (n, c_in, t) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sk[0], sk[2]);
        if k == 0 || t == 0 {
            return Err(Error::Contract(format!(
                "conv1d_same needs k >= 1 and t >= 1, got k={k}, t={t}"
            )));
        }
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let bv = self.value(bias).data();
        let mut data = vec![T::zero(); n * c_out * t];
        let work = n * c_out * c_in * t * k;
        let run = |(i, out): (usize, &mut [T])| {
            kernels::conv1d_same_one(
                &xv[i * c_in * t..(i + 1) * c_in * t],
                kv,
                bv,
                out,
                c_in,
                c_out,
                t,
                k,
            );
        };
        if work >= PAR_THRESHOLD && n > 1 {
            data.par_chunks_mut(c_out * t).enumerate().for_each(run);
        } else {
            data.chunks_mut(c_out * t).enumerate().for_each(run);
        }
        let value = Tensor::new(vec![n, c_out, t], data)?;
        let rg = self.requires(x) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(value, rg, Op::Conv1dSame { x, kernel, bias }))
    }

    /// Per-class mean over the batch axis.
    ///
    /// `x` is [B, ...]; the output is [C, ...] where slice `c` is the mean of
    /// instances labelled `c`, or zeros when the class is absent. Returns the
    /// output node and the per-class presence flags.
    pub fn class_mean(
        &mut self,
        x: Var,
        labels: &[usize],
        num_classes: usize,
    ) -> Result<(Var, Vec<bool>)> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != labels.len() {
            return Err(Error::Contract(format!(
                "class_mean: {} labels for batch shape {:?}",
                labels.len(),
                shape
            )));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    num_classes,
                    index: i,
                });
            }
        }
        let inner: usize = shape[1..].iter().product();
        let mut counts = vec![0usize; num_classes];
        for &l in labels {
            counts[l] += 1;
        }
        let src = self.value(x).data();
        let mut data = vec![T::zero(); num_classes * inner];
        for (i, &l) in labels.iter().enumerate() {
            let inv = T::one() / T::from_f64(counts[l] as f64);
            kernels::axpy(
                inv,
                &src[i * inner..(i + 1) * inner],
                &mut data[l * inner..(l + 1) * inner],
            );
        }
        let mut out_shape = shape;
        out_shape[0] = num_classes;
        let present = counts.iter().map(|&c| c > 0).collect();
        let value = Tensor::new(out_shape, data)?;
        let rg = self.requires(x);
        let labels = labels.to_vec();
        Ok((
            self.push(value, rg, Op::ClassMean { x, labels, counts }),
            present,
        ))
    }

    /// Mean cross-entropy of `logits` [N, C] against integer labels,
    /// stabilised with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Contract(format!(
                "cross_entropy: {} labels for logits shape {:?}",
                labels.len(),
                shape
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    num_classes: c,
                    index: i,
                });
            }
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(row[0], T::max);
            let mut denom = T::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                probs[i * c + j] /= denom;
            }
            let lse = max + denom.ln();
            total += lse - row[labels[i]];
        }
        let loss = total / T::from_f64(n as f64);
        let rg = self.requires(logits);
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulate d(loss)/d(leaf) for every `requires_grad` leaf reachable
    /// from `loss`. The loss must be scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires(loss) {
            // Constant loss: nothing reachable, nothing to write.
            return Ok(());
        }
        // Per-pass scratch gradients; only leaf grads persist (and
        // accumulate) across backward calls.
        let nodes = &self.nodes;
        let mut pass: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(upstream) = pass[i].take() else {
                continue;
            };
            distribute(nodes, &mut pass, i, &upstream);
            pass[i] = Some(upstream);
        }
        for (i, g) in pass.into_iter().enumerate() {
            let (Op::Leaf, Some(g)) = (&self.nodes[i].op, g) else {
                continue;
            };
            let acc = self.grads[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
            for (dst, src) in acc.iter_mut().zip(&g) {
                *dst += *src;
            }
        }
        Ok(())
    }
}

/// Ensure a gradient buffer exists for `v` and return it.
fn ensure<'g, T: Element>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> &'g mut [T] {
    let len = nodes[v.0].value.numel();
    grads[v.0]
        .get_or_insert_with(|| vec![T::zero(); len])
        .as_mut_slice()
}

fn wants<T: Element>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

/// Push the upstream gradient of node `i` into its inputs.
fn distribute<T: Element>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, up: &[T]) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(nodes, *a) {
                kernels::axpy(T::one(), up, ensure(grads, nodes, *a));
            }
            if wants(nodes, *b) {
                kernels::axpy(T::one(), up, ensure(grads, nodes, *b));
            }
        }
        Op::Sub(a, b) => {
            if wants(nodes, *a) {
                kernels::axpy(T::one(), up, ensure(grads, nodes, *a));
            }
            if wants(nodes, *b) {
                kernels::axpy(-T::one(), up, ensure(grads, nodes, *b));
            }
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let bv = nodes[b.0].value.data();
                let g = ensure(grads, nodes, *a);
                for j in 0..up.len() {
                    g[j] += up[j] * bv[j];
                }
            }
            if wants(nodes, *b) {
                let av = nodes[a.0].value.data();
                let g = ensure(grads, nodes, *b);
                for j in 0..up.len() {
                    g[j] += up[j] * av[j];
                }
            }
        }
        Op::AddConst(x) => {
            if wants(nodes, *x) {
                kernels::axpy(T::one(), up, ensure(grads, nodes, *x));
            }
        }
        Op::MulConst(x, c) => {
            if wants(nodes, *x) {
                kernels::axpy(*c, up, ensure(grads, nodes, *x));
            }
        }
        Op::ScalarMul { scalar, x } => {
            let s = nodes[scalar.0].value.data()[0];
            if wants(nodes, *x) {
                kernels::axpy(s, up, ensure(grads, nodes, *x));
            }
            if wants(nodes, *scalar) {
                let xv = nodes[x.0].value.data();
                let contrib = kernels::dot(up, xv);
                ensure(grads, nodes, *scalar)[0] += contrib;
            }
        }
        Op::Relu(x) => {
            if wants(nodes, *x) {
                let xv = nodes[x.0].value.data();
                let g = ensure(grads, nodes, *x);
                for j in 0..up.len() {
                    if xv[j] > T::zero() {
                        g[j] += up[j];
                    }
                }
            }
        }
        Op::Abs(x) => {
            if wants(nodes, *x) {
                let xv = nodes[x.0].value.data();
                let g = ensure(grads, nodes, *x);
                for j in 0..up.len() {
                    // sign rule, subgradient 0 at exactly 0
                    if xv[j] > T::zero() {
                        g[j] += up[j];
                    } else if xv[j] < T::zero() {
                        g[j] -= up[j];
                    }
                }
            }
        }
        Op::Rsqrt(x) => {
            if wants(nodes, *x) {
                let yv = nodes[i].value.data();
                let half = T::from_f64(0.5);
                let g = ensure(grads, nodes, *x);
                for j in 0..up.len() {
                    g[j] -= half * yv[j] * yv[j] * yv[j] * up[j];
                }
            }
        }
        Op::Reshape(x) => {
            if wants(nodes, *x) {
                kernels::axpy(T::one(), up, ensure(grads, nodes, *x));
            }
        }
        Op::RepeatAxis { x, axis } => {
            if wants(nodes, *x) {
                let in_shape = nodes[x.0].value.shape();
                let (outer, _, inner) = axis_split(in_shape, *axis);
                let count = nodes[i].value.shape()[*axis];
                let g = ensure(grads, nodes, *x);
                for o in 0..outer {
                    for e in 0..count {
                        let row = &up[(o * count + e) * inner..(o * count + e + 1) * inner];
                        kernels::axpy(T::one(), row, &mut g[o * inner..(o + 1) * inner]);
                    }
                }
            }
        }
        Op::SwapLast2(x) => {
            if wants(nodes, *x) {
                let out_shape = nodes[i].value.shape().to_vec();
                let up_t = Tensor::new(out_shape, up.to_vec()).expect("upstream shape");
                let transposed = swap_last2_tensor(&up_t);
                kernels::axpy(T::one(), transposed.data(), ensure(grads, nodes, *x));
            }
        }
        Op::Softmax { x, axis } => {
            if wants(nodes, *x) {
                let shape = nodes[i].value.shape();
                let yv = nodes[i].value.data();
                let (outer, extent, inner) = axis_split(shape, *axis);
                let g = ensure(grads, nodes, *x);
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |e: usize| (o * extent + e) * inner + ii;
                        let mut dotv = T::zero();
                        for e in 0..extent {
                            dotv += up[idx(e)] * yv[idx(e)];
                        }
                        for e in 0..extent {
                            g[idx(e)] += yv[idx(e)] * (up[idx(e)] - dotv);
                        }
                    }
                }
            }
        }
        Op::MeanAxis { x, axis } => {
            if wants(nodes, *x) {
                let in_shape = nodes[x.0].value.shape();
                let (outer, extent, inner) = axis_split(in_shape, *axis);
                let inv = T::one() / T::from_f64(extent as f64);
                let g = ensure(grads, nodes, *x);
                for o in 0..outer {
                    let row = &up[o * inner..(o + 1) * inner];
                    for e in 0..extent {
                        kernels::axpy(
                            inv,
                            row,
                            &mut g[(o * extent + e) * inner..(o * extent + e + 1) * inner],
                        );
                    }
                }
            }
        }
        Op::SumAxis { x, axis } => {
            if wants(nodes, *x) {
                let in_shape = nodes[x.0].value.shape();
                let (outer, extent, inner) = axis_split(in_shape, *axis);
                let g = ensure(grads, nodes, *x);
                for o in 0..outer {
                    let row = &up[o * inner..(o + 1) * inner];
                    for e in 0..extent {
                        kernels::axpy(
                            T::one(),
                            row,
                            &mut g[(o * extent + e) * inner..(o * extent + e + 1) * inner],
                        );
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if wants(nodes, *x) {
                let seed = up[0];
                let g = ensure(grads, nodes, *x);
                for gi in g.iter_mut() {
                    *gi += seed;
                }
            }
        }
        Op::MatMul { a, b } => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let plan = MatmulPlan::new(sa, sb).expect("validated in forward");
            let (m, k, p) = (plan.m, plan.k, plan.p);
            let work = plan.batches * m * k * p;
            if wants(nodes, *a) {
                let bv = nodes[b.0].value.data();
                let groups = plan.groups_for_a();
                let g = ensure(grads, nodes, *a);
                let run = |(ai, da): (usize, &mut [T])| {
                    for &obi in &groups[ai] {
                        let (_, bbi) = plan.operand_batches(obi);
                        kernels::matmul_nt_acc(
                            &up[obi * m * p..(obi + 1) * m * p],
                            &bv[bbi * k * p..(bbi + 1) * k * p],
                            da,
                            m,
                            p,
                            k,
                        );
                    }
                };
                if work >= PAR_THRESHOLD && plan.a_batches > 1 {
                    g.par_chunks_mut(m * k).enumerate().for_each(run);
                } else {
                    g.chunks_mut(m * k).enumerate().for_each(run);
                }
            }
            if wants(nodes, *b) {
                let av = nodes[a.0].value.data();
                let groups = plan.groups_for_b();
                let g = ensure(grads, nodes, *b);
                let run = |(bbi, db): (usize, &mut [T])| {
                    for &obi in &groups[bbi] {
                        let (abi, _) = plan.operand_batches(obi);
                        kernels::matmul_tn_acc(
                            &av[abi * m * k..(abi + 1) * m * k],
                            &up[obi * m * p..(obi + 1) * m * p],
                            db,
                            k,
                            m,
                            p,
                        );
                    }
                };
                if work >= PAR_THRESHOLD && plan.b_batches > 1 {
                    g.par_chunks_mut(k * p).enumerate().for_each(run);
                } else {
                    g.chunks_mut(k * p).enumerate().for_each(run);
                }
            }
        }
        Op::Conv1dSame { x, kernel, bias } => {
            let sx = nodes[x.0].value.shape();
            let sk = nodes[kernel.0].value.shape();
            let (n, c_in, t) = (sx[0], sx[1], sx[2]);
            let (c_out, k) = (sk[0], sk[2]);
            let work = n * c_out * c_in * t * k;
            if wants(nodes, *x) {
                let kv = nodes[kernel.0].value.data();
                let flipped = kernels::flip_kernel(kv, c_in, c_out, k);
                let g = ensure(grads, nodes, *x);
                let run = |(ii, dx): (usize, &mut [T])| {
                    kernels::conv1d_same_dx_one(
                        &up[ii * c_out * t..(ii + 1) * c_out * t],
                        &flipped,
                        dx,
                        c_in,
                        c_out,
                        t,
                        k,
                    );
                };
                if work >= PAR_THRESHOLD && n > 1 {
                    g.par_chunks_mut(c_in * t).enumerate().for_each(run);
                } else {
                    g.chunks_mut(c_in * t).enumerate().for_each(run);
                }
            }
            if wants(nodes, *kernel) {
                let xv = nodes[x.0].value.data();
                let cik = c_in * k;
                // One patch matrix for the whole batch, then disjoint
                // per-output-channel rows accumulate over it in fixed order.
                let pad_left = (k - 1) / 2;
                let mut patches = vec![T::zero(); n * t * cik];
                for ii in 0..n {
                    kernels::im2col(
                        &xv[ii * c_in * t..(ii + 1) * c_in * t],
                        &mut patches[ii * t * cik..(ii + 1) * t * cik],
                        c_in,
                        t,
                        k,
                        pad_left,
                    );
                }
                let g = ensure(grads, nodes, *kernel);
                let run = |(co, dk_co): (usize, &mut [T])| {
                    for ii in 0..n {
                        for tt in 0..t {
                            let coef = up[(ii * c_out + co) * t + tt];
                            let p = &patches[(ii * t + tt) * cik..(ii * t + tt + 1) * cik];
                            kernels::axpy(coef, p, dk_co);
                        }
                    }
                };
                if work >= PAR_THRESHOLD && c_out > 1 {
                    g.par_chunks_mut(cik).enumerate().for_each(run);
                } else {
                    g.chunks_mut(cik).enumerate().for_each(run);
                }
            }
            if wants(nodes, *bias) {
                let g = ensure(grads, nodes, *bias);
                for ii in 0..n {
                    for co in 0..c_out {
                        g[co] += kernels::sum_slice(
                            &up[(ii * c_out + co) * t..(ii * c_out + co + 1) * t],
                        );
                    }
                }
            }
        }
        Op::ClassMean { x, labels, counts } => {
            if wants(nodes, *x) {
                let inner: usize = nodes[x.0].value.shape()[1..].iter().product();
                let g = ensure(grads, nodes, *x);
                for (ii, &l) in labels.iter().enumerate() {
                    let inv = T::one() / T::from_f64(counts[l] as f64);
                    kernels::axpy(
                        inv,
                        &up[l * inner..(l + 1) * inner],
                        &mut g[ii * inner..(ii + 1) * inner],
                    );
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if wants(nodes, *logits) {
                let c = nodes[logits.0].value.shape()[1];
                let n = labels.len();
                let scale = up[0] / T::from_f64(n as f64);
                let g = ensure(grads, nodes, *logits);
                for ii in 0..n {
                    for j in 0..c {
                        let indicator = if j == labels[ii] { T::one() } else { T::zero() };
                        g[ii * c + j] += scale * (probs[ii * c + j] - indicator);
                    }
                }
            }
        }
    }
}

fn swap_last2_tensor<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let (r, c) = (shape[rank - 2], shape[rank - 1]);
    let batch: usize = shape[..rank - 2].iter().product();
    let src = x.data();
    let mut data = vec![T::zero(); src.len()];
    for bi in 0..batch {
        let off = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                data[off + j * r + i] = src[off + i * c + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[rank - 2] = c;
    out_shape[rank - 1] = r;
    Tensor::new(out_shape, data).expect("transposed shape")
}

/// (product before axis, extent at axis, product after axis)
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Shape bookkeeping for broadcast-batched matmul.
struct MatmulPlan {
    m: usize,
    k: usize,
    p: usize,
    batches: usize,
    a_batches: usize,
    b_batches: usize,
    lead_out: Vec<usize>,
    lead_a: Vec<usize>,
    lead_b: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Option<Self> {
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let p = sb[sb.len() - 1];
        let lead_a = sa[..sa.len() - 2].to_vec();
        let lead_b = sb[..sb.len() - 2].to_vec();
        let rank = lead_a.len().max(lead_b.len());
        let mut lead_out = vec![0usize; rank];
        for d in 0..rank {
            let da = dim_from_right(&lead_a, rank - 1 - d);
            let db = dim_from_right(&lead_b, rank - 1 - d);
            if da != db && da != 1 && db != 1 {
                return None;
            }
            lead_out[d] = da.max(db);
        }
        let batches = lead_out.iter().product::<usize>().max(1);
        let a_batches = lead_a.iter().product::<usize>().max(1);
        let b_batches = lead_b.iter().product::<usize>().max(1);
        let mut out_shape = lead_out.clone();
        out_shape.push(m);
        out_shape.push(p);
        Some(Self {
            m,
            k,
            p,
            batches,
            a_batches,
            b_batches,
            lead_out,
            lead_a,
            lead_b,
            out_shape,
        })
    }

    /// Map an output batch index to the (a, b) operand batch indices.
    fn operand_batches(&self, obi: usize) -> (usize, usize) {
        if self.lead_out.is_empty() {
            return (0, 0);
        }
        let idx = unflatten(obi, &self.lead_out);
        (
            flatten_clamped(&idx, &self.lead_a),
            flatten_clamped(&idx, &self.lead_b),
        )
    }

    fn groups_for_a(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.a_batches];
        for obi in 0..self.batches {
            groups[self.operand_batches(obi).0].push(obi);
        }
        groups
    }

    fn groups_for_b(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.b_batches];
        for obi in 0..self.batches {
            groups[self.operand_batches(obi).1].push(obi);
        }
        groups
    }
}

fn dim_from_right(shape: &[usize], pos_from_right: usize) -> usize {
    if pos_from_right < shape.len() {
        shape[shape.len() - 1 - pos_from_right]
    } else {
        1
    }
}

fn unflatten(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    idx
}

/// Flatten an output-space index into an operand's leading dims, treating
/// broadcast (size-1 or missing) dims as index 0.
fn flatten_clamped(idx: &[usize], shape: &[usize]) -> usize {
    if shape.is_empty() {
        return 0;
    }
    let strides = strides_of(shape);
    let offset = idx.len() - shape.len();
    let mut flat = 0;
    for d in 0..shape.len() {
        let i = if shape[d] == 1 { 0 } else { idx[offset + d] };
        flat += i * strides[d];
    }
    flat
}
