//! Row-major dense matrices with just enough linear algebra for the
//! learners: products, the matrix exponential, and a jittered Cholesky.

use crate::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match data length");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    /// Column vector from a slice.
    pub fn col_vec(v: &[f64]) -> Self {
        Matrix { rows: v.len(), cols: 1, data: v.to_vec() }
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn abs(&self) -> Matrix {
        self.map(f64::abs)
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow.iter()) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        assert!(self.is_square(), "trace of non-square matrix");
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Matrix exponential by scaling-and-squaring around a truncated power
    /// series. The series is summed until the term norm drops below 1e-16,
    /// well under the 1e-12 tail bound for inputs with norm up to 64.
    pub fn expm(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::Contract("matrix_exp requires a square matrix".into()));
        }
        if !self.all_finite() {
            return Err(Error::Numeric("matrix_exp input contains non-finite entries".into()));
        }
        let norm = self.frob_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric("matrix_exp input norm overflowed".into()));
        }
        // Scale so the series argument has norm <= 0.5.
        let mut squarings = 0u32;
        let mut scaled = self.clone();
        if norm > 0.5 {
            squarings = (norm / 0.5).log2().ceil() as u32;
            scaled = self.scale(0.5f64.powi(squarings as i32));
        }
        let n = self.rows;
        let mut result = Matrix::identity(n);
        let mut term = Matrix::identity(n);
        let mut k = 1u64;
        loop {
            term = term.matmul(&scaled).scale(1.0 / k as f64);
            let tnorm = term.frob_norm();
            if tnorm == 0.0 {
                break; // nilpotent: series terminated exactly
            }
            result = result.add(&term);
            if tnorm < 1e-16 || k > 64 {
                break;
            }
            k += 1;
        }
        for _ in 0..squarings {
            result = result.matmul(&result);
        }
        if !result.all_finite() {
            return Err(Error::Numeric("matrix_exp overflowed".into()));
        }
        Ok(result)
    }

    /// Cholesky factorization `L L^T = K + jitter * I`. The jitter starts at
    /// zero and escalates 1e-10, 1e-9, ... up to 1e-4 before giving up.
    pub fn cholesky(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::Contract("cholesky requires a square matrix".into()));
        }
        let mut jitter = 0.0;
        loop {
            match self.try_cholesky(jitter) {
                Some(l) => return Ok(l),
                None => {
                    jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
                    if jitter > 1e-4 {
                        return Err(Error::Decomposition(
                            "matrix not positive definite after max jitter 1e-4".into(),
                        ));
                    }
                }
            }
        }
    }

    fn try_cholesky(&self, jitter: f64) -> Option<Matrix> {
        let n = self.rows;
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self.get(i, j) + if i == j { jitter } else { 0.0 };
                for k in 0..j {
                    sum -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return None;
                    }
                    l.set(i, i, sum.sqrt());
                } else {
                    l.set(i, j, sum / l.get(j, j));
                }
            }
        }
        Some(l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_zero_is_identity() {
        let m = Matrix::zeros(3, 3);
        let e = m.expm().unwrap();
        assert_eq!(e, Matrix::identity(3));
    }

    #[test]
    fn expm_nilpotent_terminates() {
        let m = Matrix::from_vec(2, 2, vec![0.0, 1.0, 0.0, 0.0]);
        let e = m.expm().unwrap();
        let want = Matrix::from_vec(2, 2, vec![1.0, 1.0, 0.0, 1.0]);
        assert!(e.sub(&want).max_abs() < 1e-14);
    }

    #[test]
    fn expm_symmetric_involution() {
        let m = Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let e = m.expm().unwrap();
        let (c, s) = (1f64.cosh(), 1f64.sinh());
        let want = Matrix::from_vec(2, 2, vec![c, s, s, c]);
        assert!(e.sub(&want).max_abs() < 1e-12);
    }

    #[test]
    fn expm_rejects_non_square() {
        assert!(Matrix::zeros(2, 3).expm().is_err());
    }

    #[test]
    fn cholesky_identity() {
        let l = Matrix::identity(4).cholesky().unwrap();
        assert_eq!(l, Matrix::identity(4));
    }

    #[test]
    fn cholesky_hand_case() {
        let k = Matrix::from_vec(2, 2, vec![4.0, 2.0, 2.0, 3.0]);
        let l = k.cholesky().unwrap();
        let want = Matrix::from_vec(2, 2, vec![2.0, 0.0, 1.0, 2f64.sqrt()]);
        assert!(l.sub(&want).max_abs() < 1e-12);
        let rec = l.matmul(&l.transpose());
        assert!(rec.sub(&k).frob_norm() / k.frob_norm() < 1e-10);
    }

    #[test]
    fn cholesky_indefinite_fails() {
        // eigenvalues 1 and -1
        let k = Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert!(k.cholesky().is_err());
    }
}
