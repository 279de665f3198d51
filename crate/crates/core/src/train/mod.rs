//! Optimization recipe: cosine learning-rate decay, global-norm gradient
//! clipping, adaptive-moment updates, scheduled sampling, early stopping
//! and resumable checkpoints.

mod checkpoint;
mod config;
mod optim;
mod run;
mod schedule;
mod step;

pub use checkpoint::{
    load_checkpoint, load_for_inference, load_model, save_checkpoint, Checkpoint, TrainState,
};
pub use config::{RunConfig, TrainConfig};
pub use optim::{clip_gradients, grad_norm, Adam};
pub use run::{
    load_clips, split_validation, train, LogRecord, RunOptions, RunSummary, StopCause,
    LAST_CHECKPOINT, LOG_FILE,
};
pub use schedule::{cosine_lr, early_stop, tf_ratio, FINE_TUNE_DIVISOR, MIN_IMPROVEMENT};
pub use step::{teacher_forced_loss, train_step, StepReport};

use std::path::{Path, PathBuf};

use crate::data::DataError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss at step {step} on clips {ids:?}")]
    NonFiniteLoss { step: usize, ids: Vec<String> },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("checkpoint was written under a different configuration; pass the override flag to resume anyway")]
    HashMismatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True when the root cause is a filesystem failure.
    pub fn is_io(&self) -> bool {
        match self {
            TrainError::Io { .. } => true,
            TrainError::Data(d) => d.is_io(),
            TrainError::Tensor(TensorError::Io(_)) => true,
            TrainError::Model(ModelError::Tensor(TensorError::Io(_))) => true,
            _ => false,
        }
    }

    /// True for a non-finite loss or gradient.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[cfg(test)]
mod tests;
