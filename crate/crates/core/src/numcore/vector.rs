//! Dense 64-bit vector and row-major matrix containers.
//!
//! Constructors reject non-finite entries; the arithmetic helpers assume
//! matching shapes and panic on programmer error, while the spec-level
//! operations in the rest of the crate return `Result` for contract
//! violations.

use crate::error::{Error, Result};

/// Dense vector of finite 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct RealVector {
    data: Vec<f64>,
}

impl RealVector {
    /// Build from raw data, rejecting NaN/Inf entries.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("RealVector::from_vec"));
        }
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn validate_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(context));
        }
        Ok(())
    }

    pub fn dot(&self, other: &RealVector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add(&self, other: &RealVector) -> RealVector {
        assert_eq!(self.len(), other.len(), "add: length mismatch");
        RealVector {
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &RealVector) -> RealVector {
        assert_eq!(self.len(), other.len(), "sub: length mismatch");
        RealVector {
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, c: f64) -> RealVector {
        RealVector {
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// self += c * other, in place.
    pub fn add_scaled(&mut self, c: f64, other: &RealVector) {
        assert_eq!(self.len(), other.len(), "add_scaled: length mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealVector {
        RealVector {
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn linf_distance(&self, other: &RealVector) -> f64 {
        assert_eq!(self.len(), other.len(), "linf_distance: length mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl std::ops::Index<usize> for RealVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for RealVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Dense row-major matrix of finite 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                context: "RealMatrix::from_vec",
                left: data.len(),
                right: rows * cols,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("RealMatrix::from_vec"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert!(r < self.rows);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> RealVector {
        RealVector {
            data: self.row(r).to_vec(),
        }
    }

    /// y = M x
    pub fn matvec(&self, x: &RealVector) -> RealVector {
        assert_eq!(self.cols, x.len(), "matvec: dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            *o = row.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        }
        RealVector { data: out }
    }

    /// y = M^T x, without materializing the transpose.
    pub fn transpose_matvec(&self, x: &RealVector) -> RealVector {
        assert_eq!(self.rows, x.len(), "transpose_matvec: dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            let row = self.row(r);
            for (o, m) in out.iter_mut().zip(row.iter()) {
                *o += xr * m;
            }
        }
        RealVector { data: out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        assert!(RealVector::from_vec(vec![1.0, f64::NAN]).is_err());
        assert!(RealMatrix::from_vec(1, 2, vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn matrix_shape_checked() {
        assert!(RealMatrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn matvec_and_transpose() {
        let m = RealMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = RealVector::from_vec(vec![1.0, 0.0, -1.0]).unwrap();
        let y = m.matvec(&x);
        assert_eq!(y.as_slice(), &[-2.0, -2.0]);
        let z = RealVector::from_vec(vec![1.0, 1.0]).unwrap();
        let t = m.transpose_matvec(&z);
        assert_eq!(t.as_slice(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn linf_norms() {
        let v = RealVector::from_vec(vec![0.5, -2.0, 1.0]).unwrap();
        assert_eq!(v.linf_norm(), 2.0);
        let w = RealVector::zeros(3);
        assert_eq!(v.linf_distance(&w), 2.0);
    }
}
