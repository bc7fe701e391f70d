#![cfg_attr(not(feature = "std"), no_std)]
//! Numerical core of the attention-gated U-Net traffic forecaster: tensors,
//! reverse-mode differentiation, layers, the model, feature assembly,
//! synthetic data and the optimizer. Needs only `alloc`.

extern crate alloc;

pub mod autograd;
pub mod data;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod synth;
pub mod tensor;
pub mod training;

pub use autograd::{Margins, Tape, Var};
pub use data::{extract_sample, DatasetIndex, Sample, Split, StaticMap, TrafficMovie};
pub use error::{Error, Result};
pub use features::{assemble_input, assemble_target, ChannelLayout, FeatureFlags};
pub use model::{ModelConfig, UNetModel, UNetParams};
pub use optim::{adam_step, AdamState};
pub use real::Real;
pub use tensor::Tensor;
pub use training::{MetricsRecord, TrainConfig};
