//! Contrastive fine-tuning with low-rank adapters over optionally quantized weights.

mod adam;
mod checkpoint;
mod loss;
pub mod lora;
pub mod quant;
mod trainer;

use thiserror::Error;

pub use adam::Adam;
pub use checkpoint::{AdapterCheckpoint, AdapterLayer, BaseModelRef, CHECKPOINT_FORMAT};
pub use loss::{
    contrastive_loss, contrastive_loss_with_grad, loss_gradient_check, relative_error,
    ContrastiveBatch, LossGradients, LossOutput,
};
pub use lora::{apply_adapters, merge_adapters, trainable_parameter_count, LoraAdapter, LoraConfig};
pub use quant::{dequantize_blockwise, quantize_blockwise, QuantizedTensor, BLOCK_SIZE};
pub use trainer::{train_cse, StepLog, TrainConfig, TrainingLog};

use crate::backend::BackendError;
use crate::types::DataError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("backend {0} does not expose linear layers for adapters")]
    AdapterUnsupported(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("non-finite loss{}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFiniteLoss { step: Option<usize> },
    #[error("checkpoint field {field}: {reason}")]
    Checkpoint { field: String, reason: String },
    #[error("I/O: {0}")]
    Io(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Data(#[from] DataError),
}
