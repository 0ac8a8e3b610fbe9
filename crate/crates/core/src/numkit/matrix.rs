//! Dense row-major matrices.
//!
//! Every public operation returns either a finite matrix or an error. Kernels
//! use a fixed loop order so results are bit-reproducible across runs.

use std::fmt;

use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix<{}x{}>", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMsg(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        let m = Self { rows, cols, data };
        m.check_finite("from_vec")?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMsg("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.iter().flatten().copied().collect())
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

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn check_finite(&self, label: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} in {label} at ({}, {})",
                self.data[pos],
                pos / self.cols.max(1),
                pos % self.cols.max(1)
            )));
        }
        Ok(())
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// Matrix product `self · b`.
    pub fn matmul(&self, b: &Self) -> Result<Self> {
        if self.cols != b.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: b.shape(),
            });
        }
        let out = self.matmul_unchecked(b);
        out.check_finite("matmul")?;
        Ok(out)
    }

    pub(crate) fn matmul_unchecked(&self, b: &Self) -> Self {
        let (n, k, m) = (self.rows, self.cols, b.cols);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &b.data[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + a * bv;
                }
            }
        }
        Self::from_vec_unchecked(n, m, out)
    }

    /// `self · bᵀ`.
    pub(crate) fn matmul_bt_unchecked(&self, b: &Self) -> Self {
        let (n, k, m) = (self.rows, self.cols, b.rows);
        debug_assert_eq!(k, b.cols);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &b.data[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc = acc + x * y;
                }
                out.push(acc);
            }
        }
        Self::from_vec_unchecked(n, m, out)
    }

    /// `selfᵀ · b`.
    pub(crate) fn matmul_at_unchecked(&self, b: &Self) -> Self {
        let (k, n, m) = (self.rows, self.cols, b.cols);
        debug_assert_eq!(k, b.rows);
        let mut out = vec![T::zero(); n * m];
        for p in 0..k {
            let arow = &self.data[p * n..(p + 1) * n];
            let brow = &b.data[p * m..(p + 1) * m];
            for (i, &a) in arow.iter().enumerate() {
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + a * bv;
                }
            }
        }
        Self::from_vec_unchecked(n, m, out)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let out = self.zip_map(other, |a, b| a + b);
        out.check_finite("add")?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let out = self.zip_map(other, |a, b| a - b);
        out.check_finite("sub")?;
        Ok(out)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "hadamard")?;
        let out = self.zip_map(other, |a, b| a * b);
        out.check_finite("hadamard")?;
        Ok(out)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        let out = self.map(|v| v * s);
        out.check_finite("scale")?;
        Ok(out)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        self.check_finite("add_assign")
    }

    pub(crate) fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub(crate) fn add_in_place_unchecked(&mut self, other: &Self) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Population standard deviation over all elements (divides by n).
    pub fn std_all(&self) -> Result<T> {
        if self.data.is_empty() {
            return Err(Error::ShapeMsg("std_all of an empty matrix".into()));
        }
        let first = self.data[0];
        if self.data.iter().all(|&v| v == first) {
            return Ok(T::zero());
        }
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|v| v.to_f64_lossless()).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|v| {
                let d = v.to_f64_lossless() - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        Ok(T::from_f64_lossy(var.sqrt()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64_lossless();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64_lossless().abs())
            .fold(0.0, f64::max)
    }

    /// ∞-norm of the elementwise difference, computed in f64.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossless() - b.to_f64_lossless()).abs())
            .fold(0.0, f64::max))
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64_lossless().to_bits() == b.to_f64_lossless().to_bits())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossless())).collect(),
        )
    }

    pub fn to_f64(&self) -> Matrix<f64> {
        self.cast()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec_unchecked(indices.len(), self.cols, data)
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }
}
