//! Dense row-major `f64` tensors.
//!
//! Only the handful of operations the network layers need are provided. Most
//! of them are defined for rank-2 tensors (`rows x cols`); higher ranks exist
//! only as storage.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) && !data.is_empty() {
            return Err(NnError::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        if expected != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a `rows x cols` matrix from row slices of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(NnError::Shape(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(&[rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), NnError> {
        if self.shape != other.shape {
            return Err(NnError::Shape(format!(
                "add {:?} += {:?}",
                self.shape, other.shape
            )));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// `self (m x k) * other (k x n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Self, NnError> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(NnError::Shape(format!(
                "matmul {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = Self::zeros(&[m, n]);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ (k x m)ᵀ * other (m x n)`, i.e. sums of outer products of rows.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Self, NnError> {
        let (m, k) = (self.rows(), self.cols());
        let (m2, n) = (other.rows(), other.cols());
        if m != m2 {
            return Err(NnError::Shape(format!(
                "matmul_tn ({m}x{k})ᵀ by {m2}x{n}"
            )));
        }
        let mut out = Self::zeros(&[k, n]);
        for r in 0..m {
            let a_row = &self.data[r * k..(r + 1) * k];
            let b_row = &other.data[r * n..(r + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self (m x k) * otherᵀ`, where `other` is `n x k`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Self, NnError> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        if k != k2 {
            return Err(NnError::Shape(format!(
                "matmul_nt {m}x{k} by ({n}x{k2})ᵀ"
            )));
        }
        let mut out = Self::zeros(&[m, n]);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out.data[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }

    /// Adds a bias vector to every row.
    pub fn add_row_vector(&mut self, bias: &Tensor) -> Result<(), NnError> {
        let c = self.cols();
        if bias.len() != c {
            return Err(NnError::Shape(format!(
                "bias of length {} on {c} columns",
                bias.len()
            )));
        }
        for row in self.data.chunks_mut(c.max(1)) {
            row.iter_mut().zip(&bias.data).for_each(|(v, b)| *v += b);
        }
        Ok(())
    }

    /// Column sums of a matrix, returned as a vector of length `cols`.
    pub fn sum_rows(&self) -> Tensor {
        let c = self.cols();
        let mut out = Tensor::zeros(&[c]);
        for row in self.data.chunks(c.max(1)) {
            out.data.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out
    }

    /// Copies the column range `cols` into a new `rows x cols.len()` matrix.
    pub fn columns(&self, cols: Range<usize>) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let w = cols.len();
        let mut out = Tensor::zeros(&[r, w]);
        for i in 0..r {
            out.data[i * w..(i + 1) * w].copy_from_slice(&self.data[i * c + cols.start..i * c + cols.end]);
        }
        out
    }

    /// Adds `block` into the column range starting at `start`.
    pub fn add_into_columns(&mut self, start: usize, block: &Tensor) {
        let c = self.cols();
        let w = block.cols();
        for i in 0..self.rows() {
            let dst = &mut self.data[i * c + start..i * c + start + w];
            dst.iter_mut()
                .zip(&block.data[i * w..(i + 1) * w])
                .for_each(|(d, s)| *d += s);
        }
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn hcat(parts: &[Tensor]) -> Result<Tensor, NnError> {
        let rows = parts.first().map_or(0, Tensor::rows);
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(NnError::Shape("hcat row mismatch".into()));
        }
        let width: usize = parts.iter().map(Tensor::cols).sum();
        let mut out = Tensor::zeros(&[rows, width]);
        let mut offset = 0;
        for p in parts {
            out.add_into_columns(offset, p);
            offset += p.cols();
        }
        Ok(out)
    }

    /// Selects rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(0);
        }
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor, NnError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NnError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}
