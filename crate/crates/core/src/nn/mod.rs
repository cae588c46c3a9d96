//! Deterministic neural substrate: tensors, dense/ReLU/dropout layers, a
//! pre-norm self-attention encoder block, softmax cross-entropy, Adam and a
//! plateau learning-rate scheduler.
//!
//! Parameters live in a flat [`ParamStore`] and are addressed by [`ParamId`];
//! layers only hold ids. This keeps freezing, optimizer state, checkpoints and
//! finite-difference checks uniform across layer kinds.

pub mod attention;
pub mod checkpoint;
pub mod init;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
mod params;
pub mod tensor;

pub use model::{ForwardOptions, ForwardOutput, LayerKind, LayerSpec, ModelSpec, PartitionedModel, Pooling};
pub use optim::{adam_step, reduce_lr_on_plateau, AdamConfig, OptimizerState, PlateauConfig};
pub use params::{Gradients, ParamBlock, ParamId, ParamStore, Partition};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward called without a recorded forward trace")]
    MissingTrace,
    #[error("forward trace does not match the current model structure")]
    StaleTrace,
    #[error("non-finite gradient in parameter `{0}`; optimizer step aborted")]
    NonFiniteGradient(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
