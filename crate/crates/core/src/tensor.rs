//! Dense row-major matrices and the handful of layer primitives the pipeline
//! needs. Storage is whatever `T` is; every reduction accumulates in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(cols: usize, rows: &[Vec<T>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on zero-width rows
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Rows gathered in the order given by `index`.
    pub fn gather_rows(&self, index: &[usize]) -> Self {
        let mut data = Vec::with_capacity(index.len() * self.cols);
        for &i in index {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: index.len(),
            cols: self.cols,
            data,
        }
    }

    /// Inverse of [`Matrix::gather_rows`] for a permutation: row `perm[i]` of
    /// the output is row `i` of `self`.
    pub fn scatter_rows(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, self.cols);
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(p).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Matrix<f32> {
    pub fn to_f64(&self) -> Matrix<f64> {
        self.map(f64::from)
    }
}

impl Matrix<f64> {
    pub fn to_f32(&self) -> Matrix<f32> {
        self.map(|v| v as f32)
    }
}

/// Affine map `y = W x + b` with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(weight: Matrix<f32>, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(shape("Linear bias", weight.rows(), bias.len()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// One input vector, full-precision output.
    pub fn apply(&self, x: &[f32]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim());
        (0..self.out_dim())
            .map(|o| {
                let w = self.weight.row(o);
                let mut acc = f64::from(self.bias[o]);
                for (wi, xi) in w.iter().zip(x) {
                    acc += f64::from(*wi) * f64::from(*xi);
                }
                acc
            })
            .collect()
    }

    /// Same as [`Linear::apply`] for an `f64` input.
    pub fn apply_f64(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim());
        (0..self.out_dim())
            .map(|o| {
                let w = self.weight.row(o);
                let mut acc = f64::from(self.bias[o]);
                for (wi, xi) in w.iter().zip(x) {
                    acc += f64::from(*wi) * xi;
                }
                acc
            })
            .collect()
    }

    pub fn forward(&self, x: &Matrix<f32>) -> Result<Matrix<f32>> {
        if x.cols() != self.in_dim() {
            return Err(shape("Linear input width", self.in_dim(), x.cols()));
        }
        let mut out = Matrix::zeros(x.rows(), self.out_dim());
        for i in 0..x.rows() {
            let y = self.apply(x.row(i));
            for (o, v) in out.row_mut(i).iter_mut().zip(y) {
                *o = v as f32;
            }
        }
        Ok(out)
    }

    /// Number of multiply-adds counted as two FLOPs each, bias ignored.
    pub fn flops(&self, tokens: usize) -> u64 {
        2 * tokens as u64 * self.in_dim() as u64 * self.out_dim() as u64
    }
}

/// Epsilon added to the variance in every standardization.
pub const NORM_EPS: f64 = 1e-5;

/// Mean and `1 / sqrt(var + NORM_EPS)` of `n` values.
fn moments(n: usize, get: impl Fn(usize) -> f64) -> (f64, f64) {
    let mean = (0..n).map(&get).sum::<f64>() / n as f64;
    let var = (0..n).map(|i| (get(i) - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

/// Standardize each column of `x` to zero mean, unit variance over the rows.
pub fn standardize_columns(x: &mut Matrix<f32>) {
    if x.rows() == 0 {
        return;
    }
    for j in 0..x.cols() {
        let (mean, inv) = moments(x.rows(), |i| f64::from(x.get(i, j)));
        for i in 0..x.rows() {
            let v = (f64::from(x.get(i, j)) - mean) * inv;
            x.set(i, j, v as f32);
        }
    }
}

/// [`standardize_columns`] without leaving f64.
pub fn standardize_columns_f64(x: &mut Matrix<f64>) {
    if x.rows() == 0 {
        return;
    }
    for j in 0..x.cols() {
        let (mean, inv) = moments(x.rows(), |i| x.get(i, j));
        for i in 0..x.rows() {
            x.set(i, j, (x.get(i, j) - mean) * inv);
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
