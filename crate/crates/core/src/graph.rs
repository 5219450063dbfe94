//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node holding its
//! forward value and the ids of its parents, so node order is a topological
//! order by construction. [`Graph::backward`] sweeps the list in reverse and
//! accumulates gradients additively, which handles fan-out.
//!
//! No implicit broadcasting: binary elementwise ops require identical shapes.
//! The only mixed-shape ops are explicit (`scale`, `sub_scalar`,
//! `add_row_bias`).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Tanh,
    Sigmoid,
    Atan,
    Relu,
    Abs,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    SubScalar(Var, Var),
    Unary(Var, Unary),
    PairwiseL1(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    WeightedMean(Var, Tensor<T>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
    AddRowBias(Var, Var),
    Columns {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    MaskCols(Var, Vec<bool>),
    MeanRows(Var, Vec<bool>),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Epsilon added to the variance in [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], keyed by node id.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` if `v` does not reach the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    /// Gradient of `v`, zeros when it does not reach the root.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_matrix(op: &'static str, a: &Tensor<impl Scalar>) -> Result<()> {
    if !a.is_matrix() {
        return Err(Error::dim(op, a.shape(), &[0, 0]));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = self.value(x).matmul(self.value(y))?;
        Ok(self.derived(out, Op::MatMul(x, y), &[x, y]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        check_matrix("transpose", self.value(x))?;
        let out = self.value(x).transpose();
        Ok(self.derived(out, Op::Transpose(x), &[x]))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        check_same("add", self.value(x), self.value(y))?;
        let out = self.value(x).zip_map(self.value(y), |a, b| a + b);
        Ok(self.derived(out, Op::Add(x, y), &[x, y]))
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        check_same("sub", self.value(x), self.value(y))?;
        let out = self.value(x).zip_map(self.value(y), |a, b| a - b);
        Ok(self.derived(out, Op::Sub(x, y), &[x, y]))
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        check_same("mul", self.value(x), self.value(y))?;
        let out = self.value(x).zip_map(self.value(y), |a, b| a * b);
        Ok(self.derived(out, Op::Mul(x, y), &[x, y]))
    }

    /// Multiplies every entry by the constant `factor`.
    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|a| a * factor);
        self.derived(out, Op::Scale(x, factor), &[x])
    }

    /// `x - s` for a one-element `s`, subtracted from every entry.
    pub fn sub_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("sub_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|a| a - sv);
        Ok(self.derived(out, Op::SubScalar(x, s), &[x, s]))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Tanh => T::tanh,
            Unary::Sigmoid => T::sigmoid,
            Unary::Atan => T::atan,
            Unary::Relu => |a: T| a.max(T::zero()),
            Unary::Abs => T::abs,
        };
        let out = self.value(x).map(f);
        self.derived(out, Op::Unary(x, kind), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn atan(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Atan)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    /// `out[i][j] = Σ_k |x[i][k] − y[j][k]|`.
    pub fn pairwise_l1(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        check_matrix("pairwise_l1", xv)?;
        check_matrix("pairwise_l1", yv)?;
        if xv.cols() != yv.cols() {
            return Err(Error::dim("pairwise_l1", xv.shape(), yv.shape()));
        }
        let (m, n) = (xv.rows(), yv.rows());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let xi = xv.row(i);
            for j in 0..n {
                let dist: T = xi.iter().zip(yv.row(j)).map(|(&a, &b)| (a - b).abs()).sum();
                out.set(i, j, dist);
            }
        }
        Ok(self.derived(out, Op::PairwiseL1(x, y), &[x, y]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.derived(out, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Domain("mean_all of an empty tensor".into()));
        }
        let out = Tensor::scalar(xv.sum() / T::of(xv.len() as f64));
        Ok(self.derived(out, Op::MeanAll(x), &[x]))
    }

    /// `Σ w·x / Σ w` with constant non-negative weights `w` of the same shape.
    pub fn weighted_mean(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        check_same("weighted_mean", self.value(x), &weights)?;
        let total = weights.sum();
        if total <= T::zero() {
            return Err(Error::Domain("weighted_mean with zero total weight".into()));
        }
        let num: T = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &w)| a * w)
            .sum();
        let out = Tensor::scalar(num / total);
        Ok(self.derived(out, Op::WeightedMean(x, weights), &[x]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let keep = vec![true; self.value(x).cols()];
        self.masked_softmax_rows(x, &keep)
    }

    /// Row-wise softmax where columns with `keep[j] == false` are treated as
    /// `−∞` logits. A row with every column masked produces zeros.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        check_matrix("softmax_rows", xv)?;
        if keep.len() != xv.cols() {
            return Err(Error::dim("softmax_rows mask", xv.shape(), &[keep.len()]));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = xv.row(i);
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&a, _)| a)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for j in 0..n {
                if keep[j] {
                    let e = (row[j] - max).exp();
                    out.set(i, j, e);
                    total = total + e;
                }
            }
            for j in 0..n {
                out.set(i, j, out.get(i, j) / total);
            }
        }
        Ok(self.derived(out, Op::SoftmaxRows(x), &[x]))
    }

    /// Per-row layer normalisation over the last axis, `gain`/`bias` of
    /// shape `[cols]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        check_matrix("layer_norm", xv)?;
        let n = xv.cols();
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::dim("layer_norm", xv.shape(), self.shape(p)));
            }
        }
        let m = xv.rows();
        let eps = T::of(LAYER_NORM_EPS);
        let count = T::of(n as f64);
        let mut xhat = Tensor::zeros(&[m, n]);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / count;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            for (j, &a) in row.iter().enumerate() {
                xhat.set(i, j, (a - mean) * inv);
            }
            inv_std.push(inv);
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for i in 0..m {
            for j in 0..n {
                out.set(i, j, xhat.get(i, j) * gv[j] + bv[j]);
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.derived(out, op, &[x, gain, bias]))
    }

    /// Softmax cross-entropy of raw `logits` (any shape with `C` entries)
    /// against class index `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits).data();
        if label >= lv.len() {
            return Err(Error::Domain(format!(
                "label {label} out of range for {} classes",
                lv.len()
            )));
        }
        let max = lv.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = lv.iter().map(|&a| (a - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let loss = total.ln() + max - lv[label];
        let probs = exps.into_iter().map(|e| e / total).collect();
        let op = Op::CrossEntropy {
            logits,
            label,
            probs,
        };
        Ok(self.derived(Tensor::scalar(loss), op, &[logits]))
    }

    /// Adds the vector `bias` (shape `[cols]`) to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        check_matrix("add_row_bias", xv)?;
        if self.shape(bias) != [xv.cols()] {
            return Err(Error::dim("add_row_bias", xv.shape(), self.shape(bias)));
        }
        let bv = self.value(bias).data();
        let n = xv.cols();
        let mut out = xv.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + bv[k % n];
        }
        Ok(self.derived(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// `x @ w + b`, the affine map used by every projection.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// Columns `start..start+len` of a matrix.
    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        check_matrix("columns", xv)?;
        if start + len > xv.cols() {
            return Err(Error::dim("columns", xv.shape(), &[start, len]));
        }
        let m = xv.rows();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.derived(out, Op::Columns { x, start }, &[x]))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of zero parts".into()))?;
        let m = {
            let v = self.value(*first);
            check_matrix("concat_cols", v)?;
            v.rows()
        };
        let mut width = 0;
        for &p in parts {
            let v = self.value(p);
            check_matrix("concat_cols", v)?;
            if v.rows() != m {
                return Err(Error::dim("concat_cols", self.shape(*first), v.shape()));
            }
            width += v.cols();
        }
        let mut out = Tensor::zeros(&[m, width]);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for i in 0..m {
                for (j, &a) in v.row(i).iter().enumerate() {
                    out.set(i, offset + j, a);
                }
            }
            offset += v.cols();
        }
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        check_matrix("gather_rows", tv)?;
        let (rows, n) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::Domain(format!("row id {id} out of range 0..{rows}")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.derived(out, op, &[table]))
    }

    /// Zeroes every column `j` with `keep[j] == false`.
    pub fn mask_cols(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        check_matrix("mask_cols", xv)?;
        if keep.len() != xv.cols() {
            return Err(Error::dim("mask_cols", xv.shape(), &[keep.len()]));
        }
        let n = xv.cols();
        let mut out = xv.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            if !keep[k % n] {
                *v = T::zero();
            }
        }
        Ok(self.derived(out, Op::MaskCols(x, keep.to_vec()), &[x]))
    }

    /// Mean over the rows with `keep[i] == true`, as a `1×cols` matrix.
    pub fn mean_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        check_matrix("mean_rows", xv)?;
        if keep.len() != xv.rows() {
            return Err(Error::dim("mean_rows", xv.shape(), &[keep.len()]));
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::Domain("mean_rows with every row masked".into()));
        }
        let n = xv.cols();
        let inv = T::one() / T::of(count as f64);
        let mut out = Tensor::zeros(&[1, n]);
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            for (j, &a) in xv.row(i).iter().enumerate() {
                out.data_mut()[j] = out.data()[j] + a * inv;
            }
        }
        Ok(self.derived(out, Op::MeanRows(x, keep.to_vec()), &[x]))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(Tensor::full(root_value.shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let Some(grad) = slots[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &grad, &mut slots);
            }
            slots[idx] = Some(grad);
        }
        // Constants never carry gradients.
        for (slot, node) in slots.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { slots, shapes })
    }

    fn accumulate(&self, slots: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut slots[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(x, y) => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                if self.requires_grad(*x) {
                    self.accumulate(slots, *x, g.matmul_unchecked(&yv.transpose()));
                }
                if self.requires_grad(*y) {
                    self.accumulate(slots, *y, xv.transpose().matmul_unchecked(g));
                }
            }
            Op::Transpose(x) => self.accumulate(slots, *x, g.transpose()),
            Op::Add(x, y) => {
                self.accumulate(slots, *x, g.clone());
                self.accumulate(slots, *y, g.clone());
            }
            Op::Sub(x, y) => {
                self.accumulate(slots, *x, g.clone());
                self.accumulate(slots, *y, g.map(|a| -a));
            }
            Op::Mul(x, y) => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                self.accumulate(slots, *x, g.zip_map(yv, |a, b| a * b));
                self.accumulate(slots, *y, g.zip_map(xv, |a, b| a * b));
            }
            Op::Scale(x, factor) => {
                let f = *factor;
                self.accumulate(slots, *x, g.map(|a| a * f));
            }
            Op::SubScalar(x, s) => {
                self.accumulate(slots, *x, g.clone());
                let shape = self.shape(*s).to_vec();
                self.accumulate(slots, *s, Tensor::full(&shape, -g.sum()));
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x);
                let local = match kind {
                    Unary::Tanh => out.map(|y| T::one() - y * y),
                    Unary::Sigmoid => out.map(|y| y * (T::one() - y)),
                    Unary::Atan => xv.map(|a| T::one() / (T::one() + a * a)),
                    Unary::Relu => xv.map(|a| if a > T::zero() { T::one() } else { T::zero() }),
                    Unary::Abs => xv.map(T::sign0),
                };
                self.accumulate(slots, *x, g.zip_map(&local, |a, b| a * b));
            }
            Op::PairwiseL1(x, y) => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                let (m, n, d) = (xv.rows(), yv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[m, d]);
                let mut gy = Tensor::zeros(&[n, d]);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.get(i, j);
                        if gij == T::zero() {
                            continue;
                        }
                        for k in 0..d {
                            let s = (xv.get(i, k) - yv.get(j, k)).sign0() * gij;
                            gx.set(i, k, gx.get(i, k) + s);
                            gy.set(j, k, gy.get(j, k) - s);
                        }
                    }
                }
                self.accumulate(slots, *x, gx);
                self.accumulate(slots, *y, gy);
            }
            Op::SumAll(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(slots, *x, Tensor::full(&shape, g.item()));
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let share = g.item() / T::of(xv.len() as f64);
                self.accumulate(slots, *x, Tensor::full(xv.shape(), share));
            }
            Op::WeightedMean(x, w) => {
                let scale = g.item() / w.sum();
                self.accumulate(slots, *x, w.map(|a| a * scale));
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = (out.rows(), out.cols());
                let mut gx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let dot: T = (0..n).map(|j| g.get(i, j) * out.get(i, j)).sum();
                    for j in 0..n {
                        gx.set(i, j, out.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                self.accumulate(slots, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = (xhat.rows(), xhat.cols());
                let gv = self.value(*gain).data();
                let count = T::of(n as f64);
                let mut gx = Tensor::zeros(&[m, n]);
                let mut ggain = vec![T::zero(); n];
                let mut gbias = vec![T::zero(); n];
                for i in 0..m {
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..n {
                        let d = g.get(i, j) * gv[j];
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * xhat.get(i, j);
                        ggain[j] = ggain[j] + g.get(i, j) * xhat.get(i, j);
                        gbias[j] = gbias[j] + g.get(i, j);
                    }
                    for j in 0..n {
                        let d = g.get(i, j) * gv[j];
                        let v = inv_std[i] / count * (count * d - sum_d - xhat.get(i, j) * sum_dx);
                        gx.set(i, j, v);
                    }
                }
                self.accumulate(slots, *x, gx);
                self.accumulate(slots, *gain, Tensor::vector(ggain));
                self.accumulate(slots, *bias, Tensor::vector(gbias));
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let scale = g.item();
                let mut grad: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                grad[*label] = grad[*label] - scale;
                let shape = self.shape(*logits).to_vec();
                let t = Tensor::new(shape, grad).expect("logit gradient shape");
                self.accumulate(slots, *logits, t);
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(slots, *x, g.clone());
                let n = g.cols();
                let mut gb = vec![T::zero(); n];
                for (k, &a) in g.data().iter().enumerate() {
                    gb[k % n] = gb[k % n] + a;
                }
                self.accumulate(slots, *b, Tensor::vector(gb));
            }
            Op::Columns { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        gx.set(i, start + j, g.get(i, j));
                    }
                }
                self.accumulate(slots, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (m, w) = (pv.rows(), pv.cols());
                    if self.requires_grad(p) {
                        let mut gp = Tensor::zeros(&[m, w]);
                        for i in 0..m {
                            for j in 0..w {
                                gp.set(i, j, g.get(i, offset + j));
                            }
                        }
                        self.accumulate(slots, p, gp);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let mut gt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..tv.cols() {
                        gt.set(id, j, gt.get(id, j) + g.get(r, j));
                    }
                }
                self.accumulate(slots, *table, gt);
            }
            Op::MaskCols(x, keep) => {
                let n = g.cols();
                let mut gx = g.clone();
                for (k, v) in gx.data_mut().iter_mut().enumerate() {
                    if !keep[k % n] {
                        *v = T::zero();
                    }
                }
                self.accumulate(slots, *x, gx);
            }
            Op::MeanRows(x, keep) => {
                let xv = self.value(*x);
                let count = keep.iter().filter(|&&k| k).count();
                let inv = T::one() / T::of(count as f64);
                let mut gx = Tensor::zeros(xv.shape());
                for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
                    for j in 0..xv.cols() {
                        gx.set(i, j, g.data()[j] * inv);
                    }
                }
                self.accumulate(slots, *x, gx);
            }
        }
    }
}
