//! Dense row-major `f32` matrices and the handful of `f64` linear-algebra
//! helpers the solvers share.
//!
//! Storage stays in single precision; anything that factors or inverts goes
//! through `nalgebra::DMatrix<f64>`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite entry at flat index {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f32> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a * b)
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f32, f32) -> f32) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: f32) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::shape("vstack of matrices with different widths"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn cols_range(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    pub fn rows_range(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j) as f64)
    }

    pub fn from_f64(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] as f32)
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, rhs: &Matrix) -> f32 {
        assert_eq!(self.shape(), rhs.shape());
        self.data.iter().zip(&rhs.data).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// `Xᵀ X` in double precision.
pub fn gram(x: &Matrix) -> DMatrix<f64> {
    let n = x.cols();
    let mut g = DMatrix::<f64>::zeros(n, n);
    for t in 0..x.rows() {
        let row = x.row(t);
        for a in 0..n {
            let xa = row[a] as f64;
            if xa == 0.0 {
                continue;
            }
            for b in a..n {
                g[(a, b)] += xa * row[b] as f64;
            }
        }
    }
    symmetrize_upper(&mut g);
    g
}

/// `Aᵀ B` in double precision for matrices with the same row count.
pub fn cross_gram(a: &Matrix, b: &Matrix) -> Result<DMatrix<f64>> {
    if a.rows() != b.rows() {
        return Err(Error::shape("cross gram of matrices with different row counts"));
    }
    let mut g = DMatrix::<f64>::zeros(a.cols(), b.cols());
    for t in 0..a.rows() {
        let ra = a.row(t);
        let rb = b.row(t);
        for (i, &x) in ra.iter().enumerate() {
            let x = x as f64;
            if x == 0.0 {
                continue;
            }
            for (j, &y) in rb.iter().enumerate() {
                g[(i, j)] += x * y as f64;
            }
        }
    }
    Ok(g)
}

fn symmetrize_upper(g: &mut DMatrix<f64>) {
    let n = g.nrows();
    for a in 0..n {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
}

pub fn mean_diag(h: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    if n == 0 {
        return 0.0;
    }
    h.diagonal().iter().sum::<f64>() / n as f64
}

/// Solves `(h + ridge·I) x = rhs` through a Cholesky factorization.
pub fn cholesky_solve(h: &DMatrix<f64>, ridge: f64, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut a = h.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += ridge;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::numerical("matrix not positive definite after regularization"))?;
    Ok(chol.solve(rhs))
}

/// `tr(Eᵀ H E)` for an `N×M` error matrix and `N×N` weighting.
pub fn weighted_sq_norm(err: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    let he = h * err;
    err.iter().zip(he.iter()).map(|(a, b)| a * b).sum()
}

pub fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    let sym = (h + h.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}
