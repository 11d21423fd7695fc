//! Source-free domain adaptation of a small image classifier against a frozen
//! mock vision-language teacher.
//!
//! The crate provides everything the adaptation pipeline needs in one place:
//!
//! - [`tensor`]: a dense f64 tensor type with tape-based reverse-mode
//!   differentiation and a finite-difference gradient checker;
//! - [`models`]: the adapting target model (conv backbone, bottleneck,
//!   classifier) and the frozen teacher (vision encoder, projection,
//!   unit-normalized class-embedding matrix), each with image-level and
//!   patch-level probability heads, plus binary checkpoints;
//! - [`losses`]: the batch mutual-information estimator and the loss terms
//!   built on it (distillation, forgetting-resistant, patch-level) together
//!   with the attenuating patch-loss schedule;
//! - [`bank`]: the per-sample probability memory bank refreshed before each
//!   epoch;
//! - [`patches`]: teacher patch-probability filtering against confident bank
//!   labels and class-balance rectification;
//! - [`data`]: the synthetic lesion-bearing dataset generator with
//!   controllable domain shift, augmentations, and a portable on-disk format;
//! - [`train`]: source/teacher pretraining, the adaptation loop, per-class
//!   evaluation, and CAM export;
//! - [`config`]: the flat key=value run configuration shared by the CLI.

pub mod bank;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod patches;
pub mod rng;
pub mod tensor;
pub mod train;

pub use bank::MemoryBank;
pub use config::RunConfig;
pub use data::{DomainShift, LabeledDataset, SynthSpec, UnlabeledView};
pub use error::{Error, Result};
pub use losses::{JointDistribution, LossReport};
pub use models::{MockViL, ModelArch, TargetModel};
pub use patches::PatchBatch;
pub use tensor::{Tape, Tensor, TensorId};
pub use train::{Metrics, RunLog};
