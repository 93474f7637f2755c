//! Interaction loading, k-core filtering, leave-one-out splits, training
//! batches, the binary feature store, and planted-signal synthetic data.

mod batch;
mod features;
mod interactions;
mod kcore;
mod split;
mod synth;

pub use batch::{build_instances, make_batches, Stage, TrainingBatch, TrainingInstance};
pub use features::{load_feature_store, write_feature_store, FeatureStore, FeatureTable, ItemFeatures, FEATURE_MAGIC, MAX_ROWS};
pub use interactions::{load_interactions, write_interactions, Interaction, InteractionDataset, UserSequence};
pub use kcore::kcore_filter;
pub use split::{cold_item_partition, leave_one_out_split, ItemPartition, SplitBundle, UserSplit, COLD_THRESHOLD};
pub use synth::{synth_generate, SynthConfig};

use std::path::PathBuf;

use thiserror::Error;

/// Reserved item index for padding. Real items are `1..=n_items`.
pub const PAD: usize = 0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty dataset: {0}")]
    Empty(String),
    #[error("feature store format error{}: {msg}", item.as_ref().map(|i| format!(" (item {i})")).unwrap_or_default())]
    Format { item: Option<String>, msg: String },
    #[error("item {item} has no {modality} features")]
    MissingFeatures { item: String, modality: &'static str },
    #[error("configuration error: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io { path: path.into(), source }
    }
}
