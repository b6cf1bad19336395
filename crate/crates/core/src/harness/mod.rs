//! Training, checkpointing and the end-to-end pipeline.

pub mod checkpoint;
pub mod config;
pub mod objective;
pub mod pipeline;
pub mod selftest;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState};
pub use config::{Profile, TrainConfig};
pub use pipeline::{dump_attention, evaluate_split, infer_split, predict};
pub use train::{StepRecord, Trainer};
