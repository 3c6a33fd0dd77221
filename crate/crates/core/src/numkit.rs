//! Dense vectors and matrices plus the elementwise kernels the recurrent
//! cells are assembled from.
//!
//! Storage is row-major `f64`. The checked entry points (`sigmoid`, `tanh_v`,
//! `hadamard`, `affine`, `softmax_xent`) validate shapes and finiteness; the
//! cells validate shapes once per step and then use the unchecked helpers on
//! [`Matrix`] for the inner loops.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn ones(len: usize) -> Self {
        Vector(vec![1.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &[f64]) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += alpha * b;
        }
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn concat(a: &[f64], b: &[f64]) -> Self {
        let mut out = Vec::with_capacity(a.len() + b.len());
        out.extend_from_slice(a);
        out.extend_from_slice(b);
        Vector(out)
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self * x + bias`, shapes assumed valid.
    pub fn mul_vec_bias(&self, x: &[f64], bias: &[f64]) -> Vector {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(bias.len(), self.rows);
        self.data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .zip(bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// `out += selfᵀ * dy`
    pub fn tmul_vec_acc(&self, dy: &[f64], out: &mut [f64]) {
        debug_assert_eq!(dy.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (row, &g) in self.data.chunks_exact(self.cols.max(1)).zip(dy) {
            if g == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += g * w;
            }
        }
    }

    /// `self += dy ⊗ x`
    pub fn add_outer(&mut self, dy: &[f64], x: &[f64]) {
        debug_assert_eq!(dy.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        let cols = self.cols.max(1);
        for (row, &g) in self.data.chunks_exact_mut(cols).zip(dy) {
            if g == 0.0 {
                continue;
            }
            for (w, v) in row.iter_mut().zip(x) {
                *w += g * v;
            }
        }
    }
}

/// Shape of a named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }
}

pub struct TensorRef<'a> {
    pub name: &'static str,
    pub shape: Shape,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: &'static str,
    pub shape: Shape,
    pub data: &'a mut [f64],
}

impl<'a> TensorRef<'a> {
    pub fn vector(name: &'static str, v: &'a Vector) -> Self {
        TensorRef {
            name,
            shape: Shape::Vector(v.len()),
            data: v.as_slice(),
        }
    }

    pub fn matrix(name: &'static str, m: &'a Matrix) -> Self {
        TensorRef {
            name,
            shape: Shape::Matrix(m.rows(), m.cols()),
            data: m.data(),
        }
    }
}

impl<'a> TensorMut<'a> {
    pub fn vector(name: &'static str, v: &'a mut Vector) -> Self {
        TensorMut {
            name,
            shape: Shape::Vector(v.len()),
            data: v.as_mut_slice(),
        }
    }

    pub fn matrix(name: &'static str, m: &'a mut Matrix) -> Self {
        let shape = Shape::Matrix(m.rows(), m.cols());
        TensorMut {
            name,
            shape,
            data: m.data_mut(),
        }
    }
}

/// A collection of named parameter tensors in a fixed, stable order.
///
/// Gradients use the same type as the parameters they belong to, so the
/// optimizer, projection, checkpointing and finite-difference checks can all
/// walk parameters and gradients in lockstep.
pub trait ParamSet {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.shape.numel()).sum()
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.data.fill(value);
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data);
        }
        out
    }

    /// `self += scale * other`; both must enumerate identical shapes.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t.data.iter_mut() {
                *v *= factor;
            }
        }
    }

    fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn check_finite(op: &'static str, x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

/// One formula on both sides of zero: every operation in it is monotone
/// under rounding, so σ is non-decreasing in f64 too, and the left tail keeps
/// full relative precision. For x < -709 the exponential overflows and the
/// result is exactly 0.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(x: &[f64]) -> Result<Vector> {
    check_finite("sigmoid", x)?;
    Ok(x.iter().map(|&v| sigmoid_scalar(v)).collect())
}

pub fn tanh_v(x: &[f64]) -> Result<Vector> {
    check_finite("tanh", x)?;
    Ok(x.iter().map(|v| v.tanh()).collect())
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Result<Vector> {
    if a.len() != b.len() {
        return Err(Error::dim("hadamard", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Result<Vector> {
    if w.cols() != x.len() {
        return Err(Error::dim("affine (W.cols vs x)", w.cols(), x.len()));
    }
    if w.rows() != b.len() {
        return Err(Error::dim("affine (W.rows vs b)", w.rows(), b.len()));
    }
    let out = w.mul_vec_bias(x, b);
    check_finite("affine", &out)?;
    Ok(out)
}

/// Row-wise softmax probabilities with max subtraction.
pub fn softmax(logits: &[f64]) -> Vector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vector = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= z;
    }
    p
}

/// Cross-entropy of `softmax(logits)` against a one-hot `target`, returning
/// the loss and its gradient with respect to the logits.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vector)> {
    if target >= logits.len() {
        return Err(Error::Index {
            what: "softmax_xent logits",
            index: target,
            len: logits.len(),
        });
    }
    check_finite("softmax_xent", logits)?;
    let (arg, max) =
        logits.iter().copied().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
        );
    // log-sum-exp as max + ln(1 + Σ_{j≠argmax} e^{l_j - max}) keeps tiny losses exact
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &l)| (l - max).exp())
        .sum();
    let loss = (max - logits[target]) + rest.ln_1p();
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok((loss, grad))
}
