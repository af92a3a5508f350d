//! A small dense-tensor engine with reverse-mode differentiation.
//!
//! Computation is recorded on a [`Tape`] as coarse operations (matrix
//! products, layer norm, fused multi-head attention, ...). Parameters live
//! in a [`ParamSet`] that the tape borrows; [`Tape::backward`] returns
//! gradients for every parameter that took part in the computation.
//!
//! Everything is generic over [`Scalar`], so the same model code runs in
//! `f32` for training and `f64` for finite-difference verification.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod scalar;
pub mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState, StepDecay};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use gradcheck::{grad_check, grad_check_params, relative_error};
pub use scalar::{max_of, pairwise_sum, Scalar};
pub use kernels::Segment;
pub use tape::{Gradients, ParamId, ParamSet, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
