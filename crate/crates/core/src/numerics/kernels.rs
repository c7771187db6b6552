//! Elementary forward kernels shared by the eager and recorded evaluators.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Numerically stable softmax of one vector.
pub fn softmax_row(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Contract("softmax of an empty vector".into()));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("softmax input {x}")));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Log-sum-exp of a non-empty slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row softmax where row `i` only sees columns `0..=offset + i` when `offset` is set.
/// Masked columns get probability zero.
pub fn softmax_rows(x: &Matrix, offset: Option<usize>) -> Matrix {
    let mut out = x.clone();
    let cols = x.cols();
    for r in 0..x.rows() {
        let visible = offset.map_or(cols, |o| (o + r + 1).min(cols));
        let row = out.row_mut(r);
        softmax_in_place(&mut row[..visible]);
        row[visible..].fill(0.0);
    }
    out
}

pub fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Per-row `x / sqrt(mean(x²) + eps) * gain`. Returns output and per-row inverse RMS.
pub fn rms_norm(x: &Matrix, gain: &Matrix, eps: f64) -> Result<(Matrix, Vec<f64>)> {
    if gain.rows() != 1 || gain.cols() != x.cols() {
        return Err(Error::Shape(format!("rms_norm gain {:?} for input {:?}", gain.shape(), x.shape())));
    }
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    let g = gain.row(0);
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let s = 1.0 / (ms + eps).sqrt();
        for (v, gv) in row.iter_mut().zip(g) {
            *v *= s * gv;
        }
        inv.push(s);
    }
    Ok((out, inv))
}

/// Scales each row to unit RMS; an all-zero row stays zero.
pub fn normalize_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        if ms > 0.0 {
            let s = 1.0 / ms.sqrt();
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Picks `x[r, idx[r]]` into an `n x 1` column.
pub fn pick(x: &Matrix, idx: &[usize]) -> Result<Matrix> {
    if idx.len() != x.rows() {
        return Err(Error::Shape(format!("pick: {} indices for {} rows", idx.len(), x.rows())));
    }
    let mut out = Vec::with_capacity(idx.len());
    for (r, &c) in idx.iter().enumerate() {
        if c >= x.cols() {
            return Err(Error::Contract(format!("pick: index {c} outside {} columns", x.cols())));
        }
        out.push(x.get(r, c));
    }
    Matrix::from_vec(idx.len(), 1, out)
}

pub fn gather_rows(x: &Matrix, idx: &[usize]) -> Result<Matrix> {
    if let Some(&i) = idx.iter().find(|&&i| i >= x.rows()) {
        return Err(Error::Contract(format!("gather_rows: row {i} outside {} rows", x.rows())));
    }
    Ok(x.select_rows(idx))
}

/// Precomputed rotary angles for adjacent-pair rotation within each head.
#[derive(Debug)]
pub struct RopeTable {
    n_heads: usize,
    d_head: usize,
    max_positions: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(n_heads: usize, d_head: usize, max_positions: usize, base: f64) -> Arc<Self> {
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for pos in 0..max_positions {
            for i in 0..half {
                let theta = pos as f64 * base.powf(-2.0 * i as f64 / d_head as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        Arc::new(Self { n_heads, d_head, max_positions, cos, sin })
    }

    pub fn width(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Rotates each row by its position; `inverse` rotates by the negated angle.
    pub fn apply(&self, x: &Matrix, positions: &[usize], inverse: bool) -> Result<Matrix> {
        if x.cols() != self.width() || positions.len() != x.rows() {
            return Err(Error::Shape(format!(
                "rope: input {:?} with {} positions, width {}",
                x.shape(),
                positions.len(),
                self.width()
            )));
        }
        let half = self.d_head / 2;
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut out = x.clone();
        for (r, &pos) in positions.iter().enumerate() {
            if pos >= self.max_positions {
                return Err(Error::Capacity { position: pos, max: self.max_positions });
            }
            let cos = &self.cos[pos * half..(pos + 1) * half];
            let sin = &self.sin[pos * half..(pos + 1) * half];
            let row = out.row_mut(r);
            for h in 0..self.n_heads {
                let head = &mut row[h * self.d_head..(h + 1) * self.d_head];
                for i in 0..half {
                    let (a, b) = (head[2 * i], head[2 * i + 1]);
                    let (c, s) = (cos[i], sign * sin[i]);
                    head[2 * i] = a * c - b * s;
                    head[2 * i + 1] = a * s + b * c;
                }
            }
        }
        Ok(out)
    }
}
