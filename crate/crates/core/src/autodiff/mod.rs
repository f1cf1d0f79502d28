//! Reverse-mode automatic differentiation over dense tensors, with a
//! parameter store, Adam, finite-difference checking and checkpoints.

mod check;
mod checkpoint;
mod params;
mod real;
mod tape;
mod tensor;

pub use check::{finite_diff_check, finite_diff_params, GradCheckReport, Probe};
pub use checkpoint::{config_digest, read_checkpoint, write_checkpoint, Checkpoint};
pub use params::{AdamConfig, AdamState, ParamId, ParamSet};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("backward already ran on this tape; reset it before reuse")]
    DoubleBackward,
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
