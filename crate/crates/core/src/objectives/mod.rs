//! Adversarial losses, the optimizer, checkpoints and the training step.

mod adam;
mod checkpoint;
mod losses;
mod train;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use losses::{
    combined_adv, discriminator_loss, generator_loss, hinge_term, object_weights, semi_weighted_adv, GenLossTerms,
    LossConfig, DEFAULT_TAU, MARGIN,
};
pub use train::{Batch, StepMetrics, TrainMode, Trainer, TrainerConfig};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("confidence {value} of instance {instance} is below the threshold {tau}")]
    Confidence { instance: usize, value: f64, tau: f64 },
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("{phase} step produced a non-finite value; first offending op `{op}` (node {node})")]
    NonFinite { phase: &'static str, op: &'static str, node: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
