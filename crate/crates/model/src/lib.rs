//! The netFound model: a hierarchical transformer over tokenized flows,
//! with masked-token pre-training and supervised fine-tuning.
//!
//! Each flow is a grid of 12 bursts. Burst layers attend within a burst;
//! flow layers see only the 12 burst summaries (CLS_B) plus a flow summary
//! (CLS_F), and the updated summaries are written back into their bursts
//! before the next burst layer.

pub mod attention;
pub mod batch;
pub mod config;
pub mod finetune;
pub mod io;
pub mod masking;
pub mod metrics;
mod model;
pub mod noise;
pub mod pretrain;

pub use batch::FlowBatch;
pub use config::{ModelConfig, NormStats};
pub use model::{expected_param_count, Encoded, FlowOutput, Model, TaskLevel, FLOW_WIDTH};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("flow {flow}: token {token} at grid index {index} is outside the vocabulary")]
    TokenOutOfRange { flow: usize, index: usize, token: u32 },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name}: expected shape {expected:?}, found {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("model has no classification head")]
    NoHead,
    #[error("{0}")]
    Data(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Tensor(#[from] netfound_tensor::TensorError),
    #[error(transparent)]
    Checkpoint(#[from] netfound_tensor::CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ModelError {
    /// Numeric failures (as opposed to bad input or configuration).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ModelError::NonFiniteLoss { .. } | ModelError::Tensor(netfound_tensor::TensorError::NonFiniteGradient(_))
        )
    }
}
