//! Optimization loops, checkpoints and ablation dispatch.

mod adam;
mod checkpoint;
mod config;
mod log;
mod loops;
mod variants;

use thiserror::Error;

pub use adam::{adam_step, AdamState, ADAM_EPS, BETA1, BETA2};
pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ablation_table, TableRefresh, TrainConfig, Variant};
pub use log::{EpochRecord, TrainLog, TRAIN_LOG_HEADER};
pub use loops::{
    finetune, finetune_batch_loss, finetune_init, finetune_step, ids_for, initial_params, pretrain,
    pretrain_batch_loss, pretrain_step, train_end_to_end, EarlyStopper, FinetuneOutcome, PretrainOutcome, Session,
    STAGE_E2E, STAGE_FINETUNE, STAGE_PRETRAIN,
};
pub use variants::{grid_search, run_variant, Grid, GridPoint, VariantOutcome};

use crate::dataio::DataError;
use crate::evaluator::EvalError;
use crate::numkernel::KernelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    /// Training diverged; `last_good` holds the state at the start of `epoch`.
    #[error("non-finite loss or gradient in epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String, last_good: Box<Checkpoint> },
}
