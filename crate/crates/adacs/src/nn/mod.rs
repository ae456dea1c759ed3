//! Tensors, reverse-mode autodiff, and the transformer building blocks the
//! model composes.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::AttnParams;
pub use optim::Adam;
pub use params::{ParameterStore, TapeParams};
pub use tape::{Grads, NodeId, Tape};
pub use tensor::{argmax, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] checkpoint::CheckpointError),
}
