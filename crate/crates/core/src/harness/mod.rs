//! End-to-end orchestration: configuration, image-space preprocessing, the
//! training loop, checkpoints and evaluation.

pub mod config;
pub mod eval;
pub mod model;
pub mod preprocess;
pub mod train;

pub use config::{lr_at, AgmMode, BranchMode, KeyValues, Profile, Schedule, TrainConfig};
pub use eval::{cross_modality_split, embed_set, evaluate, same_camera_mask, write_metrics, Evaluation};
pub use model::{ReidCheckpoint, ReidModel};
pub use preprocess::{modality_gap, preprocess_agm};
pub use train::{train, StepRecord, TrainOutputs, TrainRun};
