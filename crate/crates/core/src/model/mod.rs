//! The fusion network: GIN encoder, knowledge projection, gated
//! cross-attention fusion block and prediction head.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_VERSION,
};
pub use config::{FusionConfig, GinConfig, HeadConfig, ModelConfig, TaskType, Variant};
pub use network::{Batch, Forward, GraphBatch, KnowledgeBatch, Mode, Network, Prediction};

use thiserror::Error;

use crate::numkit::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
