//! Stability-aware feature pruning for gradient-boosted quality classifiers
//! trained on repeated snapshots of the same entities.

pub mod data;
pub mod error;
pub mod flipflop;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod stability;
pub mod synth;

pub use data::{Label, Sample, SnapshotDataset, SnapshotId};
pub use error::{Error, Result};
pub use model::{BoostedModel, FeatureMask, TrainConfig};
pub use pipeline::{fortress_run, FortressConfig, FortressOutcome, PruneMode};
