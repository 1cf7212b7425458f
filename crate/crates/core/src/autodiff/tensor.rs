use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;

use super::scalar::Scalar;
use crate::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Dense row-major tensor, optionally tracked in a reverse-mode graph.
///
/// Handles are cheap to clone; they share the underlying buffer. Scalars use
/// the empty shape. Tensors without a graph node are plain values.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    inner: Rc<RefCell<Inner<S>>>,
}

struct Inner<S: Scalar> {
    shape: Vec<usize>,
    values: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Option<Op<S>>,
}

enum Op<S: Scalar> {
    Add(Tensor<S>, Tensor<S>),
    AddRow(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    Scale(Tensor<S>, S),
    MatMul(Tensor<S>, Tensor<S>),
    Transpose(Tensor<S>),
    Tanh(Tensor<S>),
    Gelu(Tensor<S>),
    Softmax { x: Tensor<S>, axis: usize },
    LayerNorm { x: Tensor<S>, gain: Tensor<S>, bias: Tensor<S>, eps: S },
    CrossEntropy { logits: Tensor<S>, targets: Vec<usize> },
    GatherRows { src: Tensor<S>, idx: Vec<usize> },
    ConcatRows(Vec<Tensor<S>>),
    ConcatCols(Vec<Tensor<S>>),
    SliceCols { src: Tensor<S>, start: usize, len: usize },
    SumAll(Tensor<S>),
}

impl<S: Scalar> Op<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        match self {
            Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::SumAll(a) => vec![a.clone()],
            Op::Softmax { x, .. } => vec![x.clone()],
            Op::LayerNorm { x, gain, bias, .. } => vec![x.clone(), gain.clone(), bias.clone()],
            Op::CrossEntropy { logits, .. } => vec![logits.clone()],
            Op::GatherRows { src, .. } | Op::SliceCols { src, .. } => vec![src.clone()],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

// ── construction ────────────────────────────────────────────────────────────

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape {:?} does not match {} values",
            shape,
            values.len()
        );
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                values,
                grad: None,
                requires_grad: false,
                op: None,
            })),
        }
    }

    /// Leaf tensor tracked for gradients (a learned parameter).
    pub fn param(shape: Vec<usize>, values: Vec<S>) -> Self {
        let t = Tensor::new(shape, values);
        t.inner.borrow_mut().requires_grad = true;
        t
    }

    pub fn scalar(v: S) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![S::zero(); n])
    }

    /// Parameter initialized uniformly in `[lo, hi)`.
    pub fn uniform_param<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| S::from_f64_lossy(rng.gen_range(lo..hi)))
            .collect();
        Tensor::param(shape, values)
    }

    fn from_op(shape: Vec<usize>, values: Vec<S>, op: Op<S>) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        let t = Tensor::new(shape, values);
        if requires_grad {
            let mut inner = t.inner.borrow_mut();
            inner.requires_grad = true;
            inner.op = Some(op);
        }
        t
    }
}

// ── accessors ───────────────────────────────────────────────────────────────

impl<S: Scalar> Tensor<S> {
    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.inner.borrow().shape.is_empty()
    }

    pub fn values(&self) -> Vec<S> {
        self.inner.borrow().values.clone()
    }

    pub fn value_at(&self, i: usize) -> S {
        self.inner.borrow().values[i]
    }

    pub fn set_value_at(&self, i: usize, v: S) {
        self.inner.borrow_mut().values[i] = v;
    }

    pub fn set_values(&self, values: Vec<S>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.values.len(), values.len());
        inner.values = values;
    }

    /// Scalar value; panics if the tensor is not a scalar.
    pub fn item(&self) -> S {
        let inner = self.inner.borrow();
        assert!(inner.shape.is_empty(), "item() on non-scalar {:?}", inner.shape);
        inner.values[0]
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.borrow().op.is_none()
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn parents(&self) -> Vec<Tensor<S>> {
        self.inner
            .borrow()
            .op
            .as_ref()
            .map(|op| op.parents())
            .unwrap_or_default()
    }

    /// In-place gradient update used by optimizers; no-op without a grad.
    pub fn apply_update(&self, f: impl Fn(usize, S, S) -> S) {
        let mut inner = self.inner.borrow_mut();
        if let Some(grad) = inner.grad.clone() {
            for (i, v) in inner.values.iter_mut().enumerate() {
                *v = f(i, *v, grad[i]);
            }
        }
    }

    pub fn scale_grad(&self, factor: S) {
        let mut inner = self.inner.borrow_mut();
        if let Some(grad) = inner.grad.as_mut() {
            for g in grad.iter_mut() {
                *g = *g * factor;
            }
        }
    }

    /// Corrupts one analytic gradient entry; only sensible in verification
    /// harnesses that want to prove a check catches bad gradients.
    pub fn perturb_grad_at(&self, i: usize, delta: S) {
        let mut inner = self.inner.borrow_mut();
        if let Some(grad) = inner.grad.as_mut() {
            grad[i] = grad[i] + delta;
        }
    }

    fn rows_cols(&self) -> (usize, usize) {
        let inner = self.inner.borrow();
        match inner.shape.len() {
            2 => (inner.shape[0], inner.shape[1]),
            1 => (1, inner.shape[0]),
            _ => (1, inner.values.len()),
        }
    }
}

// ── forward ops ─────────────────────────────────────────────────────────────

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.inner.borrow(), other.inner.borrow());
        if a.shape != b.shape {
            return Err(Error::DimensionMismatch {
                op: "add",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let values = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = a.shape.clone();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(shape, values, Op::Add(self.clone(), other.clone())))
    }

    /// Adds `row` (numel = columns of `self`) to every row of `self`.
    pub fn add_row(&self, row: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, r) = (self.inner.borrow(), row.inner.borrow());
        let (n, d) = matrix_dims(&a.shape);
        if r.values.len() != d {
            return Err(Error::DimensionMismatch {
                op: "add_row",
                lhs: a.shape.clone(),
                rhs: r.shape.clone(),
            });
        }
        let mut values = a.values.clone();
        for i in 0..n {
            for j in 0..d {
                values[i * d + j] = values[i * d + j] + r.values[j];
            }
        }
        let shape = a.shape.clone();
        drop(a);
        drop(r);
        Ok(Tensor::from_op(shape, values, Op::AddRow(self.clone(), row.clone())))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.inner.borrow(), other.inner.borrow());
        if a.shape != b.shape {
            return Err(Error::DimensionMismatch {
                op: "mul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let values = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = a.shape.clone();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(shape, values, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, factor: S) -> Tensor<S> {
        let a = self.inner.borrow();
        let values = a.values.iter().map(|&x| x * factor).collect();
        let shape = a.shape.clone();
        drop(a);
        Tensor::from_op(shape, values, Op::Scale(self.clone(), factor))
    }

    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.inner.borrow(), other.inner.borrow());
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let values = matmul_raw(&a.values, &b.values, m, k, n);
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            vec![m, n],
            values,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Tensor<S> {
        let a = self.inner.borrow();
        assert_eq!(a.shape.len(), 2, "transpose expects a matrix");
        let (n, d) = (a.shape[0], a.shape[1]);
        let values = transpose_raw(&a.values, n, d);
        drop(a);
        Tensor::from_op(vec![d, n], values, Op::Transpose(self.clone()))
    }

    pub fn tanh(&self) -> Tensor<S> {
        let a = self.inner.borrow();
        let values = a.values.iter().map(|x| x.tanh()).collect();
        let shape = a.shape.clone();
        drop(a);
        Tensor::from_op(shape, values, Op::Tanh(self.clone()))
    }

    pub fn gelu(&self) -> Tensor<S> {
        let a = self.inner.borrow();
        let values = a.values.iter().map(|&x| gelu_fwd(x)).collect();
        let shape = a.shape.clone();
        drop(a);
        Tensor::from_op(shape, values, Op::Gelu(self.clone()))
    }

    /// Numerically stabilized softmax along `axis` (0 or 1 for matrices,
    /// 0 for vectors). Outputs sum to one along the axis.
    pub fn softmax(&self, axis: usize) -> Tensor<S> {
        let a = self.inner.borrow();
        let values = softmax_raw(&a.values, &a.shape, axis);
        let shape = a.shape.clone();
        drop(a);
        Tensor::from_op(shape, values, Op::Softmax { x: self.clone(), axis })
    }

    /// Per-row normalization over the last axis followed by the affine
    /// `gain * x_hat + bias`.
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        let (a, g, b) = (self.inner.borrow(), gain.inner.borrow(), bias.inner.borrow());
        let (n, d) = matrix_dims(&a.shape);
        if g.values.len() != d || b.values.len() != d {
            return Err(Error::DimensionMismatch {
                op: "layer_norm",
                lhs: a.shape.clone(),
                rhs: g.shape.clone(),
            });
        }
        let mut values = vec![S::zero(); n * d];
        for i in 0..n {
            let row = &a.values[i * d..(i + 1) * d];
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_std;
                values[i * d + j] = g.values[j] * xhat + b.values[j];
            }
        }
        let shape = a.shape.clone();
        drop(a);
        drop(g);
        drop(b);
        Ok(Tensor::from_op(
            shape,
            values,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                eps,
            },
        ))
    }

    /// Mean negative log softmax probability of `targets` under `self`
    /// viewed as `[n, vocab]` logits.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor<S>> {
        let a = self.inner.borrow();
        let (n, v) = matrix_dims(&a.shape);
        if targets.len() != n {
            return Err(Error::DimensionMismatch {
                op: "cross_entropy",
                lhs: a.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= v {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    len: v,
                });
            }
        }
        let mut total = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &a.values[i * v..(i + 1) * v];
            total = total + (log_sum_exp(row) - row[t]);
        }
        let loss = total / S::from_f64_lossy(n as f64);
        drop(a);
        Ok(Tensor::from_op(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
            },
        ))
    }

    /// Gathers rows of a matrix by index; duplicate indices are allowed and
    /// their gradients accumulate.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<S>> {
        let a = self.inner.borrow();
        let (n, d) = matrix_dims(&a.shape);
        let mut values = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows index",
                    index: i,
                    len: n,
                });
            }
            values.extend_from_slice(&a.values[i * d..(i + 1) * d]);
        }
        drop(a);
        Ok(Tensor::from_op(
            vec![idx.len(), d],
            values,
            Op::GatherRows {
                src: self.clone(),
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat_rows(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let d = matrix_dims(&parts[0].shape()).1;
        let mut values = Vec::new();
        let mut n = 0;
        for p in parts {
            let inner = p.inner.borrow();
            let (pn, pd) = matrix_dims(&inner.shape);
            if pd != d {
                return Err(Error::DimensionMismatch {
                    op: "concat_rows",
                    lhs: vec![n, d],
                    rhs: inner.shape.clone(),
                });
            }
            n += pn;
            values.extend_from_slice(&inner.values);
        }
        Ok(Tensor::from_op(
            vec![n, d],
            values,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn concat_cols(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let n = matrix_dims(&parts[0].shape()).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| matrix_dims(&p.shape()).1)
            .collect();
        let d: usize = widths.iter().sum();
        let mut values = vec![S::zero(); n * d];
        let mut col = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let inner = p.inner.borrow();
            let (pn, _) = matrix_dims(&inner.shape);
            if pn != n {
                return Err(Error::DimensionMismatch {
                    op: "concat_cols",
                    lhs: vec![n],
                    rhs: inner.shape.clone(),
                });
            }
            for i in 0..n {
                for j in 0..w {
                    values[i * d + col + j] = inner.values[i * w + j];
                }
            }
            col += w;
        }
        Ok(Tensor::from_op(
            vec![n, d],
            values,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let a = self.inner.borrow();
        let (n, d) = matrix_dims(&a.shape);
        if start + len > d {
            return Err(Error::IndexOutOfRange {
                what: "slice_cols range end",
                index: start + len,
                len: d,
            });
        }
        let mut values = Vec::with_capacity(n * len);
        for i in 0..n {
            values.extend_from_slice(&a.values[i * d + start..i * d + start + len]);
        }
        drop(a);
        Ok(Tensor::from_op(
            vec![n, len],
            values,
            Op::SliceCols {
                src: self.clone(),
                start,
                len,
            },
        ))
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let a = self.inner.borrow();
        let total = a.values.iter().fold(S::zero(), |acc, &x| acc + x);
        drop(a);
        Tensor::from_op(vec![], vec![total], Op::SumAll(self.clone()))
    }

    /// Inverted dropout: multiplies by a 0 / (1-p)^-1 mask drawn from `rng`.
    /// Identity when `p == 0`.
    pub fn dropout<R: Rng>(&self, p: f64, rng: &mut R) -> Result<Tensor<S>> {
        if p <= 0.0 {
            return Ok(self.clone());
        }
        let keep = S::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.mul(&Tensor::new(self.shape(), mask))
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        1 => (1, shape[0]),
        0 => (1, 1),
        _ => panic!("expected at most 2 dimensions, got {shape:?}"),
    }
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
    c
}

fn transpose_raw<S: Scalar>(a: &[S], n: usize, d: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * d];
    for i in 0..n {
        for j in 0..d {
            out[j * n + i] = a[i * d + j];
        }
    }
    out
}

fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::from_f64_lossy(row.len() as f64);
    let mean = row.iter().fold(S::zero(), |acc, &x| acc + x) / n;
    let var = row
        .iter()
        .fold(S::zero(), |acc, &x| acc + (x - mean) * (x - mean))
        / n;
    (mean, (var + eps).sqrt().recip())
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let sum = row
        .iter()
        .fold(S::zero(), |acc, &x| acc + (x - max).exp());
    max + sum.ln()
}

fn softmax_raw<S: Scalar>(values: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (n, d) = matrix_dims(shape);
    assert!(
        axis < shape.len().max(1),
        "softmax axis {axis} invalid for shape {shape:?}"
    );
    // Treat vectors as a single row regardless of the requested axis.
    let row_wise = shape.len() < 2 || axis == 1;
    let mut out = vec![S::zero(); values.len()];
    if row_wise {
        for i in 0..n {
            softmax_slice(&values[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]);
        }
    } else {
        for j in 0..d {
            let col: Vec<S> = (0..n).map(|i| values[i * d + j]).collect();
            let mut tmp = vec![S::zero(); n];
            softmax_slice(&col, &mut tmp);
            for i in 0..n {
                out[i * d + j] = tmp[i];
            }
        }
    }
    out
}

fn softmax_slice<S: Scalar>(x: &[S], out: &mut [S]) {
    let max = x.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

// ── reverse-mode graph ──────────────────────────────────────────────────────

/// Topologically ordered slice of the computation graph reaching `root`.
/// Nodes appear after all of their inputs; `root` is last.
pub struct Graph<S: Scalar> {
    order: Vec<Tensor<S>>,
}

impl<S: Scalar> Graph<S> {
    /// Collects every gradient-tracked node reachable from `root`, inputs
    /// before consumers, visiting each node exactly once.
    pub fn trace(root: &Tensor<S>) -> Graph<S> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.ptr_id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.parents() {
                if p.requires_grad() && !visited.contains(&p.ptr_id()) {
                    stack.push((p, false));
                }
            }
        }
        Graph { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn root(&self) -> &Tensor<S> {
        self.order.last().expect("graph always contains its root")
    }

    pub fn nodes(&self) -> &[Tensor<S>] {
        &self.order
    }
}

impl<S: Scalar> Tensor<S> {
    /// Reverse-mode backprop from a scalar loss. Populates `grad` on every
    /// reachable gradient-tracked leaf; leaf gradients accumulate across
    /// calls until `zero_grad`, intermediate gradients are recomputed fresh.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let graph = Graph::trace(self);
        for node in graph.nodes() {
            if !node.is_leaf() {
                node.inner.borrow_mut().grad = None;
            }
        }
        accumulate(self, vec![S::one()]);
        for node in graph.nodes().iter().rev() {
            let (grad, has_op) = {
                let inner = node.inner.borrow();
                match (&inner.grad, &inner.op) {
                    (Some(g), Some(_)) => (g.clone(), true),
                    _ => (Vec::new(), false),
                }
            };
            if !has_op {
                continue;
            }
            let contribs = {
                let inner = node.inner.borrow();
                node_backward(inner.op.as_ref().unwrap(), &inner.values, &grad)
            };
            for (parent, contrib) in contribs {
                if parent.requires_grad() {
                    accumulate(&parent, contrib);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(t: &Tensor<S>, contrib: Vec<S>) {
    let mut inner = t.inner.borrow_mut();
    match inner.grad.as_mut() {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi = *gi + ci;
            }
        }
        None => inner.grad = Some(contrib),
    }
}

type Contribs<S> = Vec<(Tensor<S>, Vec<S>)>;

fn node_backward<S: Scalar>(op: &Op<S>, out_values: &[S], grad: &[S]) -> Contribs<S> {
    match op {
        Op::Add(a, b) => vec![(a.clone(), grad.to_vec()), (b.clone(), grad.to_vec())],
        Op::AddRow(a, row) => {
            let (n, d) = a.rows_cols();
            let mut drow = vec![S::zero(); d];
            for i in 0..n {
                for j in 0..d {
                    drow[j] = drow[j] + grad[i * d + j];
                }
            }
            vec![(a.clone(), grad.to_vec()), (row.clone(), drow)]
        }
        Op::Mul(a, b) => {
            let av = a.inner.borrow().values.clone();
            let bv = b.inner.borrow().values.clone();
            let da = grad.iter().zip(&bv).map(|(&g, &y)| g * y).collect();
            let db = grad.iter().zip(&av).map(|(&g, &x)| g * x).collect();
            vec![(a.clone(), da), (b.clone(), db)]
        }
        Op::Scale(a, factor) => {
            let da = grad.iter().map(|&g| g * *factor).collect();
            vec![(a.clone(), da)]
        }
        Op::MatMul(a, b) => {
            let ai = a.inner.borrow();
            let bi = b.inner.borrow();
            let (m, k) = (ai.shape[0], ai.shape[1]);
            let n = bi.shape[1];
            // dA = dC · B^T, dB = A^T · dC
            let bt = transpose_raw(&bi.values, k, n);
            let da = matmul_raw(grad, &bt, m, n, k);
            let at = transpose_raw(&ai.values, m, k);
            let db = matmul_raw(&at, grad, k, m, n);
            drop(ai);
            drop(bi);
            vec![(a.clone(), da), (b.clone(), db)]
        }
        Op::Transpose(a) => {
            let (n, d) = a.rows_cols();
            // grad has shape [d, n]
            vec![(a.clone(), transpose_raw(grad, d, n))]
        }
        Op::Tanh(a) => {
            let da = grad
                .iter()
                .zip(out_values)
                .map(|(&g, &y)| g * (S::one() - y * y))
                .collect();
            vec![(a.clone(), da)]
        }
        Op::Gelu(a) => {
            let av = a.inner.borrow().values.clone();
            let da = grad
                .iter()
                .zip(&av)
                .map(|(&g, &x)| g * gelu_bwd(x))
                .collect();
            vec![(a.clone(), da)]
        }
        Op::Softmax { x, axis } => {
            let shape = x.shape();
            let (n, d) = matrix_dims(&shape);
            let row_wise = shape.len() < 2 || *axis == 1;
            let mut dx = vec![S::zero(); grad.len()];
            if row_wise {
                for i in 0..n {
                    let y = &out_values[i * d..(i + 1) * d];
                    let g = &grad[i * d..(i + 1) * d];
                    let dot = y
                        .iter()
                        .zip(g)
                        .fold(S::zero(), |acc, (&yj, &gj)| acc + yj * gj);
                    for j in 0..d {
                        dx[i * d + j] = y[j] * (g[j] - dot);
                    }
                }
            } else {
                for j in 0..d {
                    let dot = (0..n).fold(S::zero(), |acc, i| {
                        acc + out_values[i * d + j] * grad[i * d + j]
                    });
                    for i in 0..n {
                        dx[i * d + j] = out_values[i * d + j] * (grad[i * d + j] - dot);
                    }
                }
            }
            vec![(x.clone(), dx)]
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xi = x.inner.borrow();
            let gv = gain.inner.borrow().values.clone();
            let (n, d) = matrix_dims(&xi.shape);
            let dim = S::from_f64_lossy(d as f64);
            let mut dx = vec![S::zero(); n * d];
            let mut dg = vec![S::zero(); d];
            let mut db = vec![S::zero(); d];
            for i in 0..n {
                let row = &xi.values[i * d..(i + 1) * d];
                let g = &grad[i * d..(i + 1) * d];
                let (mean, inv_std) = row_moments(row, *eps);
                let xhat: Vec<S> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                let dxhat: Vec<S> = g.iter().zip(&gv).map(|(&gj, &gaj)| gj * gaj).collect();
                let m1 = dxhat.iter().fold(S::zero(), |acc, &v| acc + v) / dim;
                let m2 = dxhat
                    .iter()
                    .zip(&xhat)
                    .fold(S::zero(), |acc, (&dv, &xv)| acc + dv * xv)
                    / dim;
                for j in 0..d {
                    dx[i * d + j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
                    dg[j] = dg[j] + g[j] * xhat[j];
                    db[j] = db[j] + g[j];
                }
            }
            drop(xi);
            vec![(x.clone(), dx), (gain.clone(), dg), (bias.clone(), db)]
        }
        Op::CrossEntropy { logits, targets } => {
            let li = logits.inner.borrow();
            let (n, v) = matrix_dims(&li.shape);
            let g = grad[0] / S::from_f64_lossy(n as f64);
            let mut dl = vec![S::zero(); n * v];
            for (i, &t) in targets.iter().enumerate() {
                let row = &li.values[i * v..(i + 1) * v];
                let mut sm = vec![S::zero(); v];
                softmax_slice(row, &mut sm);
                for j in 0..v {
                    let indicator = if j == t { S::one() } else { S::zero() };
                    dl[i * v + j] = g * (sm[j] - indicator);
                }
            }
            drop(li);
            vec![(logits.clone(), dl)]
        }
        Op::GatherRows { src, idx } => {
            let (n, d) = src.rows_cols();
            let mut ds = vec![S::zero(); n * d];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    ds[i * d + j] = ds[i * d + j] + grad[k * d + j];
                }
            }
            vec![(src.clone(), ds)]
        }
        Op::ConcatRows(parts) => {
            let mut contribs = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for p in parts {
                let len = p.numel();
                contribs.push((p.clone(), grad[offset..offset + len].to_vec()));
                offset += len;
            }
            contribs
        }
        Op::ConcatCols(parts) => {
            let n = matrix_dims(&parts[0].shape()).0;
            let total: usize = parts.iter().map(|p| matrix_dims(&p.shape()).1).sum();
            let mut contribs = Vec::with_capacity(parts.len());
            let mut col = 0;
            for p in parts {
                let w = matrix_dims(&p.shape()).1;
                let mut dp = vec![S::zero(); n * w];
                for i in 0..n {
                    for j in 0..w {
                        dp[i * w + j] = grad[i * total + col + j];
                    }
                }
                contribs.push((p.clone(), dp));
                col += w;
            }
            contribs
        }
        Op::SliceCols { src, start, len } => {
            let (n, d) = src.rows_cols();
            let mut ds = vec![S::zero(); n * d];
            for i in 0..n {
                for j in 0..*len {
                    ds[i * d + start + j] = grad[i * len + j];
                }
            }
            vec![(src.clone(), ds)]
        }
        Op::SumAll(a) => {
            let da = vec![grad[0]; a.numel()];
            vec![(a.clone(), da)]
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}
