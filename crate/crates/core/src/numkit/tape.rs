//! Reverse-mode gradient tape.
//!
//! Values are appended to an arena as operations execute; [`Var`] is an index
//! into that arena. [`Tape::backward`] walks the arena once in reverse order,
//! so the tape itself is the topological order.

use super::ops;
use super::Tensor2;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `m x n` plus a `1 x n` row broadcast to every row.
    AddRowBias(Var, Var),
    /// Every entry multiplied by the single entry of a `1 x 1` value.
    MulByScalar(Var, Var),
    Exp(Var),
    ClampMax(Var, f64),
    Smooth(Var),
    Relu(Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var, f64),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    /// Mean over rows of `logsumexp(row) - row[label]`.
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of executed operations.
///
/// Leaf gradients persist across [`Tape::backward`] calls and accumulate
/// until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor2>>,
    warnings: Vec<String>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, `None` before any backward
    /// pass reaches it or for constants.
    pub fn grad(&self, v: Var) -> Option<&Tensor2> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Degenerate-input notices raised by operations (e.g. near-zero rows in
    /// normalization).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn take_warnings(&mut self) -> Vec<String> {
        std::mem::take(&mut self.warnings)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor2, op: Op) -> Var {
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor2, op: Op) -> Var {
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.unary(x, value, Op::Transpose(x))
    }

    fn zip(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, op)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor2::new(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.unary(x, value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.unary(x, value, Op::AddScalar(x))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: tx.shape(),
                rhs: tb.shape(),
            });
        }
        let mut value = tx.clone();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.binary(x, bias, value, Op::AddRowBias(x, bias)))
    }

    pub fn mul_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "mul_by_scalar",
                lhs: self.value(x).shape(),
                rhs: ts.shape(),
            });
        }
        let c = ts.item();
        let value = self.value(x).scale(c);
        Ok(self.binary(x, s, value, Op::MulByScalar(x, s)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.unary(x, value, Op::Exp(x))
    }

    /// `min(x, c)`; gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v.min(c));
        self.unary(x, value, Op::ClampMax(x, c))
    }

    /// `x * sigmoid(1.702 x)`, elementwise.
    pub fn smooth(&mut self, x: Var) -> Var {
        let value = ops::smooth_nonlinearity(self.value(x));
        self.unary(x, value, Op::Smooth(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.unary(x, value, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = ops::softmax_rows(self.value(x));
        self.unary(x, value, Op::SoftmaxRows(x))
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (value, degenerate) = ops::l2_normalize_rows(self.value(x), eps)?;
        for row in degenerate {
            self.warnings
                .push(format!("row {row} has norm below {eps:e}; scaled by 1/eps"));
        }
        Ok(self.unary(x, value, Op::L2NormalizeRows(x, eps)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(*first).shape(),
                    rhs: self.value(*p).shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Tensor2::new(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(x, Tensor2::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.unary(x, Tensor2::scalar(s), Op::Mean(x))
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if labels.len() != t.rows() {
            return Err(Error::Contract(format!(
                "{} labels for {} rows",
                labels.len(),
                t.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= t.cols()) {
            return Err(Error::Data(format!(
                "label {bad} out of range [0,{})",
                t.cols()
            )));
        }
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = t.row(i);
            total += ops::log_sum_exp(row) - row[l];
        }
        let value = Tensor2::scalar(total / labels.len() as f64);
        Ok(self.unary(logits, value, Op::CrossEntropy(logits, labels.to_vec())))
    }

    /// Propagates `d loss / d leaf` into every trainable leaf reachable from
    /// `loss`, adding onto previously accumulated gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor2>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor2::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.adjoints(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Per-input adjoint contributions of node `idx` given its output
    /// adjoint `g`.
    fn adjoints(&self, idx: usize, g: &Tensor2) -> Result<Vec<(Var, Tensor2)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let want = |v: &Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(a) {
                    out.push((*a, g.matmul_t(val(b))?));
                }
                if want(b) {
                    out.push((*b, val(a).t_matmul(g)?));
                }
            }
            Op::MatMulT(a, b) => {
                // y = a b^T: da = g b, db = g^T a
                if want(a) {
                    out.push((*a, g.matmul(val(b))?));
                }
                if want(b) {
                    out.push((*b, g.t_matmul(val(a))?));
                }
            }
            Op::Transpose(x) => out.push((*x, g.transpose())),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scale(-1.0)));
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((*a, hadamard(g, val(b))));
                }
                if want(b) {
                    out.push((*b, hadamard(g, val(a))));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.scale(*c))),
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::AddRowBias(x, bias) => {
                out.push((*x, g.clone()));
                if want(bias) {
                    let mut col = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (c, v) in col.iter_mut().zip(g.row(i)) {
                            *c += v;
                        }
                    }
                    out.push((*bias, Tensor2::row_vector(&col)));
                }
            }
            Op::MulByScalar(x, s) => {
                if want(x) {
                    out.push((*x, g.scale(val(s).item())));
                }
                if want(s) {
                    let d = super::tensor::dot(g.data(), val(x).data());
                    out.push((*s, Tensor2::scalar(d)));
                }
            }
            Op::Exp(x) => out.push((*x, hadamard(g, y))),
            Op::ClampMax(x, c) => {
                let xin = val(x);
                let data = g
                    .data()
                    .iter()
                    .zip(xin.data())
                    .map(|(&gv, &xv)| if xv < *c { gv } else { 0.0 })
                    .collect();
                out.push((*x, Tensor2::new(g.rows(), g.cols(), data)?));
            }
            Op::Smooth(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(x).data())
                    .map(|(&gv, &xv)| gv * ops::smooth_derivative(xv))
                    .collect();
                out.push((*x, Tensor2::new(g.rows(), g.cols(), data)?));
            }
            Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(x).data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((*x, Tensor2::new(g.rows(), g.cols(), data)?));
            }
            Op::SoftmaxRows(x) => {
                let mut dx = g.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let s = super::tensor::dot(g.row(i), yr);
                    for (d, &yv) in dx.row_mut(i).iter_mut().zip(yr) {
                        *d = yv * (*d - s);
                    }
                }
                out.push((*x, dx));
            }
            Op::L2NormalizeRows(x, eps) => {
                let xin = val(x);
                let mut dx = g.clone();
                for i in 0..y.rows() {
                    let n = super::tensor::dot(xin.row(i), xin.row(i)).sqrt();
                    let yr = y.row(i);
                    if n < *eps {
                        dx.row_mut(i).iter_mut().for_each(|d| *d /= eps);
                    } else {
                        let s = super::tensor::dot(g.row(i), yr);
                        for (d, &yv) in dx.row_mut(i).iter_mut().zip(yr) {
                            *d = (*d - yv * s) / n;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = val(p).cols();
                    if want(p) {
                        let slice = Tensor2::from_fn(g.rows(), cols, |i, j| g.get(i, offset + j));
                        out.push((*p, slice));
                    }
                    offset += cols;
                }
            }
            Op::Sum(x) => {
                let (r, c) = val(x).shape();
                out.push((*x, Tensor2::filled(r, c, g.item())));
            }
            Op::Mean(x) => {
                let (r, c) = val(x).shape();
                out.push((*x, Tensor2::filled(r, c, g.item() / (r * c) as f64)));
            }
            Op::CrossEntropy(x, labels) => {
                let mut dx = ops::softmax_rows(val(x));
                let w = g.item() / labels.len() as f64;
                for (i, &l) in labels.iter().enumerate() {
                    let row = dx.row_mut(i);
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|d| *d *= w);
                }
                out.push((*x, dx));
            }
        }
        Ok(out)
    }
}

fn hadamard(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor2::new(a.rows(), a.cols(), data).expect("same shape")
}
