//! Differentiable-computation substrate: a tape-based reverse-mode autodiff
//! graph over dense tensors, the Adam optimizer, and the step learning-rate
//! schedule. Everything learnable in this crate runs through [`Graph`].
//!
//! Precision is selected by the scalar type parameter: `f32` for training,
//! `f64` for gradient verification.

mod adam;
mod gradcheck;
mod graph;

#[cfg(test)]
mod tests;

pub use adam::{adam_learning_rate, AdamParams, OptimizerState};
pub use gradcheck::{directional_derivative, finite_difference_gradient, relative_error};
pub use graph::{value_and_grad, Gradients, Graph, Var};

use ndarray::{LinalgScalar, ScalarOperand};
use thiserror::Error;

/// Floating-point scalar usable as tensor element type.
///
/// `f32` is the default compute precision; `f64` is used by the
/// finite-difference verification suite.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op} in `{scope}`: shape mismatch: {details}")]
    ShapeMismatch {
        op: &'static str,
        scope: String,
        details: String,
    },
    #[error("{op} in `{scope}` produced a non-finite value")]
    NonFinite { op: &'static str, scope: String },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("optimizer: {0}")]
    Optimizer(String),
}

pub type Result<V> = std::result::Result<V, NumericsError>;
