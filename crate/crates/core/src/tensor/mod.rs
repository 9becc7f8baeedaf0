//! Minimal reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value is a `rows × cols` matrix; the only broadcasting supported is
//! a `1 × cols` bias added to each row. Parameters live in a [`ParamStore`]
//! and are copied onto a [`Tape`] at the start of each step.

mod adam;
mod dense;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use dense::{Activation, DenseLayer, DenseNet};
pub use params::{Param, ParamId, ParamStore};
pub(crate) use tape::std_normal_interval;
pub use tape::{binary_rate, clamp_frequency, GatherPlan, SteReference, Tape, Var, HF_MIN};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("layer {layer}: expected input width {expected}, got {actual}")]
    LayerInput {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("malformed weight stream: {0}")]
    Weights(String),
}

/// Dense row-major matrix with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<S>,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(rows: usize, cols: usize, values: Vec<S>) -> Self {
        assert_eq!(rows * cols, values.len(), "tensor size");
        Tensor {
            rows,
            cols,
            values,
            grad: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![S::zero(); rows * cols])
    }

    pub fn from_row(values: Vec<S>) -> Self {
        let n = values.len();
        Self::new(1, n, values)
    }

    pub fn scalar(v: S) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Selects a contiguous column range into a new tensor.
    pub fn cols_range(&self, start: usize, end: usize) -> Self {
        let w = end - start;
        let mut out = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            out.extend_from_slice(&self.row(r)[start..end]);
        }
        Self::new(self.rows, w, out)
    }
}
