//! On-the-fly test-time adaptation for image segmentation.
//!
//! An Adaptive UNet renormalizes its features per test instance against a
//! domain code produced by a frozen, pre-trained autoencoder encoder (the
//! domain prior generator). Adaptation happens in a single forward pass with
//! no gradient steps and no state carried between instances.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod dpg;
pub mod error;
pub mod eval;
pub mod inference;
pub mod io;
pub mod model;
pub mod nn;
pub mod normalization;
pub mod tensor;
pub mod training;
pub mod transforms;

pub use checkpoint::{Architecture, EpochLog, ModelCheckpoint, TrainingMetadata};
pub use data::{DatasetManifest, Mask, SegSample, ShiftSpec, Split, SynthSpec};
pub use dpg::{AugSpec, DomainPriorGenerator, DpgConfig};
pub use error::{Error, Result};
pub use eval::{DiceReport, RegionSpec};
pub use inference::{EpisodeResult, TestInstance};
pub use model::{ArchConfig, Dimensionality, NormKind, UNet};
pub use normalization::{AdaBnState, ChannelStats, DomainCode, StatsMode};
pub use tensor::{Real, Tensor};
pub use training::TrainConfig;
pub use baselines::TentConfig;
