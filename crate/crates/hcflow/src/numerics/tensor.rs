//! Rank-4 tensors in (batch, channel, row, column) row-major layout.
//!
//! `Tensor4` (= `Tensor<f32>`) is the universal value type of the crate;
//! the generic form exists so the autodiff graph can re-run in `f64` for the
//! finite-difference oracles.

use crate::error::{Error, Result};
use crate::numerics::real::Real;
use std::fmt;

/// Shape of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { b, c, h, w }
    }

    /// Total number of elements.
    pub fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    /// Elements per batch item.
    pub fn item_numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.b, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Shape4,
    data: Vec<R>,
}

/// The crate-wide value type: single-precision rank-4 tensor.
pub type Tensor4 = Tensor<f32>;

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor {
            shape,
            data: vec![R::ZERO; shape.numel()],
        }
    }

    pub fn full(shape: Shape4, v: R) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    /// Validating constructor: length must match the shape and every value
    /// must be finite.
    pub fn from_vec(shape: Shape4, data: Vec<R>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "from_vec",
                format!(
                    "data length {} does not match shape {} ({} elements)",
                    data.len(),
                    shape,
                    shape.numel()
                ),
            ));
        }
        let t = Tensor { shape, data };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    /// Non-validating constructor for internal hot paths; debug builds still
    /// assert the length.
    pub(crate) fn from_raw(shape: Shape4, data: Vec<R>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor { shape, data }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> R) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.b {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> R {
        self.data[self.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: R) {
        let i = self.index(b, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous row slice, the unit of work for the convolution kernels.
    #[inline]
    pub(crate) fn row(&self, b: usize, c: usize, y: usize) -> &[R] {
        let start = ((b * self.shape.c + c) * self.shape.h + y) * self.shape.w;
        &self.data[start..start + self.shape.w]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, b: usize, c: usize, y: usize) -> &mut [R] {
        let start = ((b * self.shape.c + c) * self.shape.h + y) * self.shape.w;
        &mut self.data[start..start + self.shape.w]
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum_f64() / self.data.len() as f64
        }
    }

    pub fn scale_in_place(&mut self, s: R) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Precision conversion (f32 → f64 for oracle evaluation and back).
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| S::from_f64(v.to_f64())).collect(),
        }
    }
}
