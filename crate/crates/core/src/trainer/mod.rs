//! Training: configuration, schedule, augmentation, checkpoints and
//! cross-validation.

mod augment;
mod checkpoint;
mod config;
mod cv;
mod data;
mod run;

use std::path::PathBuf;

use thiserror::Error;

use crate::heads::HeadsError;
use crate::model::ModelError;
use crate::volume_store::VolumeError;

pub use augment::{augment, crop_sample, flip, rotate_z};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LatestCheckpoint, CHECKPOINT_MAGIC};
pub use config::{lr_at, ConfigError, DeskOverrides, ExperimentConfig};
pub use cv::{run_cross_validation, CvOutcome, FoldSplit};
pub use data::{load_dataset, load_sample, TrainSample};
pub use run::{EpochRecord, Trainer};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Heads(#[from] HeadsError),
    #[error("epoch {epoch} outside schedule of {epochs} epochs")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("non-finite loss or gradient at epoch {epoch}, step {step} (volume {volume}); state dumped to {dump:?}")]
    Diverged {
        epoch: usize,
        step: usize,
        volume: String,
        dump: Option<PathBuf>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no training volumes")]
    EmptyDataset,
    #[error("i/o error: {0}")]
    Io(String),
}

impl std::error::Error for ConfigError {}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e.to_string())
    }
}
