//! Reverse-mode differentiation over recorded matrix operations.
//!
//! A graph is built fresh for every loss evaluation. Nodes are appended in
//! evaluation order, so walking them backwards is a reverse topological order.

use std::sync::Arc;

use super::kernels::{self, RopeTable};
use super::ops::{check_same, TensorOps};
use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a node of a [`DiffGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, eps: f64 },
    NormalizeRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick { x: Var, idx: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    Rope { x: Var, positions: Vec<usize>, table: Arc<RopeTable> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Transpose(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records operations and computes gradients for the leaves registered with [`DiffGraph::param`].
#[derive(Debug, Default)]
pub struct DiffGraph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients of the trainable leaves, in registration order.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(String, Var, Matrix)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.entries.iter().find(|(_, var, _)| *var == v).map(|(_, _, g)| g)
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, _, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, _, g)| (n.as_str(), g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_matrices(self) -> Vec<Matrix> {
        self.entries.into_iter().map(|(_, _, g)| g).collect()
    }
}

impl DiffGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Reverse pass from a scalar (1x1) root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.val(root).shape() != (1, 1) {
            return Err(Error::Shape(format!("backward root must be 1x1, got {:?}", self.val(root).shape())));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        let entries = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads.get_mut(v.0).and_then(Option::take);
                let g = g.unwrap_or_else(|| Matrix::zeros(self.val(*v).rows(), self.val(*v).cols()));
                (name.clone(), *v, g)
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g).expect("gradient shape matches its node"),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.val(*b))?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.val(*a).t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(self.val(*b))?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.val(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.val(*b))?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.val(*a))?);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Exp(a) => self.accumulate(grads, *a, g.hadamard(&node.value)?),
            Op::Silu(a) => {
                let d = self.val(*a).map(kernels::silu_grad);
                self.accumulate(grads, *a, g.hadamard(&d)?);
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = self.val(*x);
                let gv = self.val(*gain);
                let ones = Matrix::filled(1, xv.cols(), 1.0);
                let (normed, inv) = kernels::rms_norm(xv, &ones, *eps)?;
                if self.rg(*gain) {
                    let mut dg = Matrix::zeros(1, xv.cols());
                    for r in 0..xv.rows() {
                        for ((d, &gy), &n) in dg.row_mut(0).iter_mut().zip(g.row(r)).zip(normed.row(r)) {
                            *d += gy * n;
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.rg(*x) {
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let d = xv.cols() as f64;
                    for r in 0..xv.rows() {
                        let dn: Vec<f64> = g.row(r).iter().zip(gv.row(0)).map(|(a, b)| a * b).collect();
                        let n = normed.row(r);
                        let proj = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d;
                        for ((o, &dnj), &nj) in dx.row_mut(r).iter_mut().zip(&dn).zip(n) {
                            *o = inv[r] * (dnj - nj * proj);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::NormalizeRows(x) => {
                let xv = self.val(*x);
                let d = xv.cols() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let ms = xv.row(r).iter().map(|v| v * v).sum::<f64>() / d;
                    if ms == 0.0 {
                        continue;
                    }
                    let inv = 1.0 / ms.sqrt();
                    let n = node.value.row(r);
                    let proj = g.row(r).iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d;
                    for ((o, &gj), &nj) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(n) {
                        *o = inv * (gj - nj * proj);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, &yj), &gj) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = yj * (gj - inner);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for ((o, &yj), &gj) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = gj - yj.exp() * total;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Pick { x, idx } => {
                let (rows, cols) = self.val(*x).shape();
                let mut dx = Matrix::zeros(rows, cols);
                for (r, &c) in idx.iter().enumerate() {
                    dx.set(r, c, g.get(r, 0));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let (rows, cols) = self.val(*x).shape();
                let mut dx = Matrix::zeros(rows, cols);
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &gv) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Rope { x, positions, table } => {
                self.accumulate(grads, *x, table.apply(g, positions, true)?);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.val(*p).rows();
                    if self.rg(*p) {
                        self.accumulate(grads, *p, g.slice_rows(start, start + h));
                    }
                    start += h;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    if self.rg(*p) {
                        self.accumulate(grads, *p, g.slice_cols(start, start + w));
                    }
                    start += w;
                }
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.val(*x).shape();
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..g.rows() {
                    dx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.val(*x).shape();
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Sum(x) => {
                let (rows, cols) = self.val(*x).shape();
                self.accumulate(grads, *x, Matrix::filled(rows, cols, g.get(0, 0)));
            }
        }
        Ok(())
    }
}

impl TensorOps for DiffGraph {
    type T = Var;

    fn value<'a>(&'a self, t: &'a Var) -> &'a Matrix {
        self.val(*t)
    }

    fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).matmul(self.val(*b))?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(v, Op::MatMul(*a, *b), rg))
    }

    fn matmul_t(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).matmul_t(self.val(*b))?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(v, Op::MatMulT(*a, *b), rg))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).add(self.val(*b))?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(v, Op::Add(*a, *b), rg))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).sub(self.val(*b))?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(v, Op::Sub(*a, *b), rg))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        check_same("mul", self.val(*a), self.val(*b))?;
        let v = self.val(*a).hadamard(self.val(*b))?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(v, Op::Mul(*a, *b), rg))
    }

    fn scale(&mut self, a: &Var, s: f64) -> Var {
        let v = self.val(*a).scale(s);
        let rg = self.rg(*a);
        self.push(v, Op::Scale(*a, s), rg)
    }

    fn exp(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(f64::exp);
        let rg = self.rg(*a);
        self.push(v, Op::Exp(*a), rg)
    }

    fn silu(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(kernels::silu);
        let rg = self.rg(*a);
        self.push(v, Op::Silu(*a), rg)
    }

    fn rms_norm(&mut self, x: &Var, gain: &Var, eps: f64) -> Result<Var> {
        let (v, _) = kernels::rms_norm(self.val(*x), self.val(*gain), eps)?;
        let rg = self.rg(*x) || self.rg(*gain);
        Ok(self.push(v, Op::RmsNorm { x: *x, gain: *gain, eps }, rg))
    }

    fn normalize_rows(&mut self, x: &Var) -> Var {
        let v = kernels::normalize_rows(self.val(*x));
        let rg = self.rg(*x);
        self.push(v, Op::NormalizeRows(*x), rg)
    }

    fn softmax_rows(&mut self, x: &Var, causal_offset: Option<usize>) -> Var {
        let v = kernels::softmax_rows(self.val(*x), causal_offset);
        let rg = self.rg(*x);
        self.push(v, Op::Softmax(*x), rg)
    }

    fn log_softmax_rows(&mut self, x: &Var) -> Var {
        let v = kernels::log_softmax_rows(self.val(*x));
        let rg = self.rg(*x);
        self.push(v, Op::LogSoftmax(*x), rg)
    }

    fn pick(&mut self, x: &Var, idx: &[usize]) -> Result<Var> {
        let v = kernels::pick(self.val(*x), idx)?;
        let rg = self.rg(*x);
        Ok(self.push(v, Op::Pick { x: *x, idx: idx.to_vec() }, rg))
    }

    fn gather_rows(&mut self, x: &Var, idx: &[usize]) -> Result<Var> {
        let v = kernels::gather_rows(self.val(*x), idx)?;
        let rg = self.rg(*x);
        Ok(self.push(v, Op::GatherRows { x: *x, idx: idx.to_vec() }, rg))
    }

    fn rope(&mut self, x: &Var, positions: &[usize], table: &Arc<RopeTable>) -> Result<Var> {
        let v = table.apply(self.val(*x), positions, false)?;
        let rg = self.rg(*x);
        Ok(self.push(v, Op::Rope { x: *x, positions: positions.to_vec(), table: Arc::clone(table) }, rg))
    }

    fn concat_rows(&mut self, parts: &[&Var]) -> Result<Var> {
        let refs: Vec<&Matrix> = parts.iter().map(|p| self.val(**p)).collect();
        let v = Matrix::concat_rows(&refs)?;
        let rg = parts.iter().any(|p| self.rg(**p));
        Ok(self.push(v, Op::ConcatRows(parts.iter().map(|p| **p).collect()), rg))
    }

    fn concat_cols(&mut self, parts: &[&Var]) -> Result<Var> {
        let refs: Vec<&Matrix> = parts.iter().map(|p| self.val(**p)).collect();
        let v = Matrix::concat_cols(&refs)?;
        let rg = parts.iter().any(|p| self.rg(**p));
        Ok(self.push(v, Op::ConcatCols(parts.iter().map(|p| **p).collect()), rg))
    }

    fn slice_rows(&mut self, x: &Var, start: usize, end: usize) -> Var {
        let v = self.val(*x).slice_rows(start, end);
        let rg = self.rg(*x);
        self.push(v, Op::SliceRows { x: *x, start }, rg)
    }

    fn slice_cols(&mut self, x: &Var, start: usize, end: usize) -> Var {
        let v = self.val(*x).slice_cols(start, end);
        let rg = self.rg(*x);
        self.push(v, Op::SliceCols { x: *x, start }, rg)
    }

    fn transpose(&mut self, x: &Var) -> Var {
        let v = self.val(*x).transpose();
        let rg = self.rg(*x);
        self.push(v, Op::Transpose(*x), rg)
    }

    fn sum(&mut self, x: &Var) -> Var {
        let v = Matrix::filled(1, 1, self.val(*x).sum());
        let rg = self.rg(*x);
        self.push(v, Op::Sum(*x), rg)
    }

    fn detach(&mut self, x: &Var) -> Var {
        let v = self.val(*x).clone();
        self.push(v, Op::Leaf, false)
    }
}
