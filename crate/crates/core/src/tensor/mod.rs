//! Dense f64 matrices and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the storage type used across the crate: a row-major
//! rows x cols grid of f64 values with an optional same-shape gradient
//! buffer. Differentiable computation happens on a [`tape::Tape`], which is
//! rebuilt for every forward pass (define-by-run): leaves are copied in from
//! tensors, ops are recorded, and `backward` fills gradients that are then
//! copied back out.

pub mod optim;
pub mod tape;

pub use optim::{adam_step, sgd_step, Adam, Optimizer};
pub use tape::{DropoutKey, Tape, Var};

use crate::error::CoreError;

/// Dense row-major matrix of f64 values with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, CoreError> {
        if data.len() != rows * cols {
            return Err(CoreError::Shape(format!(
                "expected {rows}x{cols}={} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as differentiable and allocates its gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor, CoreError> {
        if self.shape() != other.shape() {
            return Err(CoreError::Shape(format!(
                "sub: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_vec(self.rows, self.cols, data)
    }

    /// Elementwise sum `self + other`.
    pub fn add(&self, other: &Tensor) -> Result<Tensor, CoreError> {
        if self.shape() != other.shape() {
            return Err(CoreError::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_vec(self.rows, self.cols, data)
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Tensor) -> Result<Tensor, CoreError> {
        if self.rows != other.rows {
            return Err(CoreError::Shape(format!(
                "hcat: {} vs {} rows",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Tensor::from_vec(self.rows, cols, data)
    }

    /// Copies of the given rows, stacked in order.
    pub fn take_rows(&self, rows: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(rows.len(), self.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.data[i * self.cols..(i + 1) * self.cols].copy_from_slice(self.row(r));
        }
        out
    }

    /// The explicit finiteness guard: values (and gradient, if present) must
    /// be free of NaN/Inf.
    pub fn check_finite(&self, context: &str) -> Result<(), CoreError> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(format!(
                "{context}: value at flat index {pos} is {}",
                self.data[pos]
            )));
        }
        if let Some(g) = self.grad.as_ref() {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite(format!(
                    "{context}: gradient at flat index {pos} is {}",
                    g[pos]
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let t = Tensor::zeros(3, 4).with_grad();
        assert_eq!(t.grad.as_ref().unwrap().len(), 12);
    }

    #[test]
    fn finiteness_guard_catches_nan() {
        let mut t = Tensor::zeros(2, 2);
        t.set(1, 0, f64::NAN);
        assert!(t.check_finite("test").is_err());
        t.set(1, 0, 0.0);
        assert!(t.check_finite("test").is_ok());
    }

    #[test]
    fn hcat_and_take_rows() {
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(2, 1, vec![9.0, 8.0]).unwrap();
        let c = a.hcat(&b).unwrap();
        assert_eq!(c.row(0), &[1.0, 2.0, 9.0]);
        assert_eq!(c.row(1), &[3.0, 4.0, 8.0]);
        let r = c.take_rows(&[1]);
        assert_eq!(r.row(0), &[3.0, 4.0, 8.0]);
    }
}
