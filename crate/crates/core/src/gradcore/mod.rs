//! Minimal dense-tensor arithmetic with reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar node sweeps the tape once in reverse and returns
//! the adjoint of every leaf. Primitives that are needed to differentiate
//! *through* a gradient computation (`conv2d_transpose`, `smoothed_relu_grad`,
//! `channel_norm`) are themselves recorded, so a gradient built from them can be
//! differentiated again with respect to parameters.

mod kernels;
mod tape;
mod tensor;

pub use kernels::{conv2d, conv2d_kernel_grad, conv2d_transpose, rot90};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("division by zero at flat index {index}")]
    ZeroDivision { index: usize },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
}

/// A fixed linear map usable as a tape primitive (and its exact adjoint).
pub trait LinearOperator: Send + Sync {
    fn input_shape(&self) -> Vec<usize>;
    fn output_shape(&self) -> Vec<usize>;
    /// `out = M x` (out is overwritten).
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// `out = M^T y` (out is overwritten).
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]);
}

#[cfg(test)]
mod tests;
