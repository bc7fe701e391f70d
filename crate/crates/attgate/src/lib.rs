//! File formats, the training harness and the `attgate` command-line tool.
//!
//! The numerical work lives in `attgate-core`; this crate adds TMOV movie
//! files, checkpoints, manifests, a prefetching loader and the train/eval/predict
//! drivers.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod generate;
pub mod tmov;
pub mod trainer;

pub use attgate_core as core;
pub use checkpoint::Checkpoint;
pub use config::{ConfigLayer, RunConfig};
pub use dataset::{Dataset, Loader, ManifestEntry, Prepared};
pub use error::{Error, Result};
pub use tmov::{read_tmov, write_tmov, Role, Tmov};
pub use trainer::{evaluate, evaluate_persistence, predict, TrainOptions, Trainer};
