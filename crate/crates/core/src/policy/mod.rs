//! Desk-scale policy learning on a synthetic reach benchmark.

pub mod eval;
pub mod model;
pub mod scene;
pub mod sweep;
pub mod train;

use thiserror::Error;

use crate::augment::AugmentError;
use crate::dataset::DatasetError;
use crate::rcl::RclError;

pub use eval::{evaluate, evaluate_ood, EvalMetrics, Policy, RandomPolicy, ScriptedExpert, ZeroPolicy};
pub use model::{AdamW, OptimizerConfig, PolicyArch, ToyPolicy};
pub use scene::{generate_reach_dataset, ReachDataset, SceneRenderer, Split, SyntheticSceneConfig, TextureId};
pub use sweep::{ratio_sweep, SweepConfig, SweepResult, SweepRow};
pub use train::{train_policy, TrainConfig, TrainLogRecord, TrainOutcome};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training dataset has no frames")]
    EmptyDataset,
    #[error("trajectory `{trajectory}` frame {frame} has no region masks")]
    MissingMasks { trajectory: String, frame: usize },
    #[error("annotation category `{0}` is not in the category registry")]
    UnknownCategory(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("augmentation failed: {0}")]
    Augment(String),
    #[error(transparent)]
    Rcl(#[from] RclError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<AugmentError> for PolicyError {
    fn from(e: AugmentError) -> Self {
        PolicyError::Augment(e.to_string())
    }
}
