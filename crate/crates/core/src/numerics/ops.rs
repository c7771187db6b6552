//! The tensor-operation interface the model is written against.
//!
//! [`Eager`] evaluates immediately on owned matrices (sampling, evaluation).
//! [`DiffGraph`](super::DiffGraph) records the same operations for a reverse pass.

use std::sync::Arc;

use super::kernels::{self, RopeTable};
use super::Matrix;
use crate::error::{Error, Result};

pub trait TensorOps {
    type T: Clone;

    fn value<'a>(&'a self, t: &'a Self::T) -> &'a Matrix;
    fn constant(&mut self, m: Matrix) -> Self::T;

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    /// `a · bᵀ`
    fn matmul_t(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn scale(&mut self, a: &Self::T, s: f64) -> Self::T;
    fn exp(&mut self, a: &Self::T) -> Self::T;
    fn silu(&mut self, a: &Self::T) -> Self::T;
    fn rms_norm(&mut self, x: &Self::T, gain: &Self::T, eps: f64) -> Result<Self::T>;
    fn normalize_rows(&mut self, x: &Self::T) -> Self::T;
    fn softmax_rows(&mut self, x: &Self::T, causal_offset: Option<usize>) -> Self::T;
    fn log_softmax_rows(&mut self, x: &Self::T) -> Self::T;
    fn pick(&mut self, x: &Self::T, idx: &[usize]) -> Result<Self::T>;
    fn gather_rows(&mut self, x: &Self::T, idx: &[usize]) -> Result<Self::T>;
    fn rope(&mut self, x: &Self::T, positions: &[usize], table: &Arc<RopeTable>) -> Result<Self::T>;
    fn concat_rows(&mut self, parts: &[&Self::T]) -> Result<Self::T>;
    fn concat_cols(&mut self, parts: &[&Self::T]) -> Result<Self::T>;
    fn slice_rows(&mut self, x: &Self::T, start: usize, end: usize) -> Self::T;
    fn slice_cols(&mut self, x: &Self::T, start: usize, end: usize) -> Self::T;
    fn transpose(&mut self, x: &Self::T) -> Self::T;
    fn sum(&mut self, x: &Self::T) -> Self::T;
    /// Same value, no gradient path.
    fn detach(&mut self, x: &Self::T) -> Self::T;

    fn shape(&self, t: &Self::T) -> (usize, usize) {
        self.value(t).shape()
    }
}

/// Immediate evaluation on owned matrices.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl TensorOps for Eager {
    type T = Matrix;

    fn value<'a>(&'a self, t: &'a Matrix) -> &'a Matrix {
        t
    }

    fn constant(&mut self, m: Matrix) -> Matrix {
        m
    }

    fn matmul(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.matmul(b)
    }

    fn matmul_t(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.matmul_t(b)
    }

    fn add(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.add(b)
    }

    fn sub(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.sub(b)
    }

    fn mul(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.hadamard(b)
    }

    fn scale(&mut self, a: &Matrix, s: f64) -> Matrix {
        a.scale(s)
    }

    fn exp(&mut self, a: &Matrix) -> Matrix {
        a.map(f64::exp)
    }

    fn silu(&mut self, a: &Matrix) -> Matrix {
        a.map(kernels::silu)
    }

    fn rms_norm(&mut self, x: &Matrix, gain: &Matrix, eps: f64) -> Result<Matrix> {
        Ok(kernels::rms_norm(x, gain, eps)?.0)
    }

    fn normalize_rows(&mut self, x: &Matrix) -> Matrix {
        kernels::normalize_rows(x)
    }

    fn softmax_rows(&mut self, x: &Matrix, causal_offset: Option<usize>) -> Matrix {
        kernels::softmax_rows(x, causal_offset)
    }

    fn log_softmax_rows(&mut self, x: &Matrix) -> Matrix {
        kernels::log_softmax_rows(x)
    }

    fn pick(&mut self, x: &Matrix, idx: &[usize]) -> Result<Matrix> {
        kernels::pick(x, idx)
    }

    fn gather_rows(&mut self, x: &Matrix, idx: &[usize]) -> Result<Matrix> {
        kernels::gather_rows(x, idx)
    }

    fn rope(&mut self, x: &Matrix, positions: &[usize], table: &Arc<RopeTable>) -> Result<Matrix> {
        table.apply(x, positions, false)
    }

    fn concat_rows(&mut self, parts: &[&Matrix]) -> Result<Matrix> {
        Matrix::concat_rows(parts)
    }

    fn concat_cols(&mut self, parts: &[&Matrix]) -> Result<Matrix> {
        Matrix::concat_cols(parts)
    }

    fn slice_rows(&mut self, x: &Matrix, start: usize, end: usize) -> Matrix {
        x.slice_rows(start, end)
    }

    fn slice_cols(&mut self, x: &Matrix, start: usize, end: usize) -> Matrix {
        x.slice_cols(start, end)
    }

    fn transpose(&mut self, x: &Matrix) -> Matrix {
        x.transpose()
    }

    fn sum(&mut self, x: &Matrix) -> Matrix {
        Matrix::filled(1, 1, x.sum())
    }

    fn detach(&mut self, x: &Matrix) -> Matrix {
        x.clone()
    }
}

pub(crate) fn check_same(op: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}
