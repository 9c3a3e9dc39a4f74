//! Tape-based reverse-mode automatic differentiation over whole matrices.
//!
//! Every operation appends a node to the tape, so node order is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse from
//! the loss node.
//!
//! ```
//! use exdrop_core::{Graph, Matrix};
//!
//! let mut g = Graph::new();
//! let w = g.leaf(Matrix::from_rows(&[[1.0, -2.0]]));
//! let loss = g.frobenius_sq(w);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w), &Matrix::from_rows(&[[2.0, -4.0]]));
//! ```

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::{Matrix, LAYER_NORM_EPS};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive that produced a node.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    /// `a^T * b`
    TMatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    /// Adds a `1 x c` row to every row.
    AddRow(Var, Var),
    Relu(Var),
    RowSoftmax(Var),
    RowNormalize(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    /// Entries where `keep == 0` are replaced by a constant.
    MaskFill { x: Var, keep: Matrix },
    FrobeniusSq(Var),
    Trace(Var),
    Sum(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    DiagFromRow(Var),
    DiagToRow(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    grad: Matrix,
    touched: bool,
    op: Op,
}

/// A single-threaded autodiff tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let (r, c) = value.shape();
        self.nodes.push(Node {
            value,
            grad: Matrix::zeros(r, c),
            touched: false,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf node: a parameter, an input, or a constant.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// The value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    /// `d loss / d v` after the last [`Graph::backward`]; zeros before.
    pub fn grad(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    /// `a^T * b`.
    pub fn t_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).t_matmul(self.value(b))?;
        Ok(self.push(out, Op::TMatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Adds the `1 x c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(bias));
        if bm.rows() != 1 || bm.cols() != am.cols() {
            return Err(Error::shape("add_row", am.shape(), bm.shape()));
        }
        let mut out = am.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bm.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, Op::Relu(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let out = self.value(a).row_softmax();
        self.push(out, Op::RowSoftmax(a))
    }

    /// Divides each row by its sum. Rows must have a nonzero sum.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                return Err(Error::contract("row_normalize on a zero-sum row"));
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(self.push(out, Op::RowNormalize(a)))
    }

    /// Row-wise layer normalization with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xm = self.value(x);
        let d = xm.cols();
        for p in [gain, bias] {
            if self.value(p).shape() != (1, d) {
                return Err(Error::shape("layer_norm", xm.shape(), self.value(p).shape()));
            }
        }
        let mut xhat = xm.clone();
        let mut inv_std = Vec::with_capacity(xm.rows());
        for i in 0..xm.rows() {
            let row = xhat.row_mut(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (gm, bm) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for i in 0..out.rows() {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * gm.get(0, j) + bm.get(0, j);
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Replaces entries of `x` where `keep` is zero by `fill`. The gradient
    /// through replaced entries is zero.
    pub fn mask_fill(&mut self, x: Var, keep: Matrix, fill: f64) -> Result<Var> {
        let xm = self.value(x);
        if keep.shape() != xm.shape() {
            return Err(Error::shape("mask_fill", xm.shape(), keep.shape()));
        }
        let mut out = xm.clone();
        for (o, k) in out.data_mut().iter_mut().zip(keep.data()) {
            if *k == 0.0 {
                *o = fill;
            }
        }
        Ok(self.push(out, Op::MaskFill { x, keep }))
    }

    /// Squared Frobenius norm as a `1 x 1` node.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let v = self.value(a).frobenius_sq();
        self.push(Matrix::scalar(v), Op::FrobeniusSq(a))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).trace()?;
        Ok(self.push(Matrix::scalar(v), Op::Trace(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        self.push(Matrix::scalar(v), Op::Sum(a))
    }

    /// Sums several nodes of identical shape. `parts` must be non-empty.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::contract("add_all of nothing"))?;
        let mut acc = *first;
        for p in rest {
            acc = self.add(acc, *p)?;
        }
        Ok(acc)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    /// Stacks nodes vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.value(*p).cols())
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            if m.cols() != cols {
                return Err(Error::shape("concat_rows", (rows, cols), m.shape()));
            }
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let out = Matrix::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Places nodes side by side; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let mut cols = 0;
        for p in parts {
            let m = self.value(*p);
            if m.rows() != rows {
                return Err(Error::shape("concat_cols", (rows, cols), m.shape()));
            }
            cols += m.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            for i in 0..rows {
                out.row_mut(i)[offset..offset + m.cols()].copy_from_slice(m.row(i));
            }
            offset += m.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// `1 x n` row to an `n x n` diagonal matrix.
    pub fn diag_from_row(&mut self, v: Var) -> Result<Var> {
        let m = self.value(v);
        if m.rows() != 1 {
            return Err(Error::shape("diag_from_row", m.shape(), (1, m.cols())));
        }
        let out = Matrix::diag_from_vector(m.data());
        Ok(self.push(out, Op::DiagFromRow(v)))
    }

    /// Diagonal of a square matrix as a `1 x n` row.
    pub fn diag_to_row(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if !m.is_square() {
            return Err(Error::shape("diag_to_row", m.shape(), m.shape()));
        }
        let out = Matrix::new(1, m.rows(), m.diagonal())?;
        Ok(self.push(out, Op::DiagToRow(a)))
    }

    /// Mean softmax cross-entropy of `logits` (one row per example) against
    /// class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lm = self.value(logits);
        if labels.len() != lm.rows() {
            return Err(Error::shape("cross_entropy", lm.shape(), (labels.len(), 1)));
        }
        if labels.iter().any(|l| *l >= lm.cols()) {
            return Err(Error::contract("label out of range"));
        }
        let probs = lm.row_softmax();
        let mut loss = 0.0;
        for (i, l) in labels.iter().enumerate() {
            let row = lm.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>());
            loss += lse - row[*l];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    fn accumulate(&mut self, v: Var, delta: &Matrix) {
        let node = &mut self.nodes[v.0];
        node.grad.add_assign(delta);
        node.touched = true;
    }

    fn accumulate_scaled(&mut self, v: Var, delta: &Matrix, s: f64) {
        let node = &mut self.nodes[v.0];
        node.grad.add_scaled_assign(delta, s);
        node.touched = true;
    }

    /// Populates `grad` of every node that `loss` depends on with
    /// `d loss / d value`. Gradients from any earlier call are overwritten.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::contract("backward needs a 1x1 loss"));
        }
        for node in &mut self.nodes {
            node.grad.data_mut().fill(0.0);
            node.touched = false;
        }
        self.nodes[loss.0].grad = Matrix::scalar(1.0);
        self.nodes[loss.0].touched = true;

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].touched || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[idx].grad.clone();
            // Temporarily take the op so parents can be borrowed mutably.
            let op = core::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop(idx, &op, &g)?;
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn backprop(&mut self, idx: usize, op: &Op, g: &Matrix) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_t(self.value(*b))?;
                let db = self.value(*a).t_matmul(g)?;
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::MatMulT(a, b) => {
                // out = a b^T: da = g b, db = g^T a
                let da = g.matmul(self.value(*b))?;
                let db = g.t_matmul(self.value(*a))?;
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::TMatMul(a, b) => {
                // out = a^T b: da = b g^T, db = a g
                let da = self.value(*b).matmul_t(g)?;
                let db = self.value(*a).matmul(g)?;
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Transpose(a) => {
                let da = g.transpose();
                self.accumulate(*a, &da);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                self.accumulate_scaled(*b, g, -1.0);
            }
            Op::Hadamard(a, b) => {
                let da = g.hadamard(self.value(*b))?;
                let db = g.hadamard(self.value(*a))?;
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale(a, s) => self.accumulate_scaled(*a, g, *s),
            Op::AddRow(a, bias) => {
                self.accumulate(*a, g);
                let db = Matrix::new(1, g.cols(), g.col_sums())?;
                self.accumulate(*bias, &db);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut da = g.clone();
                for (d, v) in da.data_mut().iter_mut().zip(x.data()) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::RowSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let mut da = g.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let dot: f64 = g.row(i).iter().zip(yr).map(|(gg, yy)| gg * yy).sum();
                    for (d, yy) in da.row_mut(i).iter_mut().zip(yr) {
                        *d = yy * (*d - dot);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::RowNormalize(a) => {
                let y = &self.nodes[idx].value;
                let x = self.value(*a);
                let mut da = g.clone();
                for i in 0..y.rows() {
                    let s: f64 = x.row(i).iter().sum();
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(gg, yy)| gg * yy).sum();
                    for d in da.row_mut(i).iter_mut() {
                        *d = (*d - dot) / s;
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gain).clone();
                let d = xhat.cols() as f64;
                let mut dx = Matrix::zeros(xhat.rows(), xhat.cols());
                let mut dgain = Matrix::zeros(1, xhat.cols());
                for i in 0..xhat.rows() {
                    let xr = xhat.row(i);
                    let gr = g.row(i);
                    let dxhat: Vec<f64> = gr.iter().zip(gm.data()).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d;
                    let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d;
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = inv_std[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                    for (j, o) in dgain.data_mut().iter_mut().enumerate() {
                        *o += gr[j] * xr[j];
                    }
                }
                let dbias = Matrix::new(1, g.cols(), g.col_sums())?;
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*bias, &dbias);
            }
            Op::MaskFill { x, keep } => {
                let dx = g.hadamard(keep)?;
                self.accumulate(*x, &dx);
            }
            Op::FrobeniusSq(a) => {
                let s = 2.0 * g.get(0, 0);
                let a_val = self.value(*a).clone();
                self.accumulate_scaled(*a, &a_val, s);
            }
            Op::Trace(a) => {
                let n = self.value(*a).rows();
                let da = Matrix::identity(n).scale(g.get(0, 0));
                self.accumulate(*a, &da);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                let da = Matrix::filled(r, c, g.get(0, 0));
                self.accumulate(*a, &da);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    da.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(*a, &da);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut da = Matrix::zeros(r, c);
                da.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                self.accumulate(*a, &da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    let dp = g.slice_rows(offset, rows)?;
                    self.accumulate(*p, &dp);
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.shape(*p).1;
                    let dp = g.slice_cols(offset, cols)?;
                    self.accumulate(*p, &dp);
                    offset += cols;
                }
            }
            Op::DiagFromRow(v) => {
                let dv = Matrix::new(1, g.rows(), g.diagonal())?;
                self.accumulate(*v, &dv);
            }
            Op::DiagToRow(a) => {
                let da = Matrix::diag_from_vector(g.data());
                self.accumulate(*a, &da);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.get(0, 0) / labels.len() as f64;
                let mut dl = probs.clone();
                for (i, l) in labels.iter().enumerate() {
                    dl.row_mut(i)[*l] -= 1.0;
                }
                self.accumulate_scaled(*logits, &dl, scale);
            }
        }
        Ok(())
    }
}

/// A `1 x n` row of ones, handy for column sums via `ones * X`.
pub fn ones_row(n: usize) -> Matrix {
    Matrix::filled(1, n, 1.0)
}
