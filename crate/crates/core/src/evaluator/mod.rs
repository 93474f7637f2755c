//! Full-ranking leave-one-out evaluation.

mod metrics;
mod report;
mod scorer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{ItemPartition, SplitBundle, TrainingInstance};
use crate::m2se::IdMode;
use crate::numkernel::KernelError;

pub use metrics::{ndcg_at_k, ndcg_from_rank, rank_of, recall_at_k, recall_from_rank, RankedList, KS};
pub use report::{export_loss_trajectory, MetricRow, MetricsReport, UserResult, CSV_HEADER, LOSS_TRAJECTORY_HEADER};
pub use scorer::{item_tables, M2seScorer, Scorer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Valid,
    Test,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Valid => "valid",
            EvalMode::Test => "test",
        }
    }
}

/// One ranking query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub user: usize,
    pub input: Vec<usize>,
    pub target: usize,
    /// Length of the user's training sequence, for grouping.
    pub train_len: usize,
}

pub fn cases_for(split: &SplitBundle, mode: EvalMode) -> Vec<EvalCase> {
    split
        .users
        .iter()
        .map(|u| EvalCase {
            user: u.user,
            input: match mode {
                EvalMode::Valid => u.valid_input().to_vec(),
                EvalMode::Test => u.test_input(),
            },
            target: match mode {
                EvalMode::Valid => u.valid,
                EvalMode::Test => u.test,
            },
            train_len: u.train.len(),
        })
        .collect()
}

/// Cases built from training instances (prefix → next item).
pub fn cases_from_instances(instances: &[TrainingInstance]) -> Vec<EvalCase> {
    instances
        .iter()
        .enumerate()
        .map(|(k, t)| EvalCase { user: k, input: t.prefix.clone(), target: t.target, train_len: t.prefix.len() })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions<'a> {
    pub ids: IdMode,
    /// Adds cold/warm breakdown rows.
    pub partition: Option<&'a ItemPartition>,
    /// Keep only users whose target is cold, scored without ID embeddings.
    pub cold_only: bool,
    /// Adds five equal-frequency user groups by training length.
    pub groups: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self { ids: IdMode::Learned, partition: None, cold_only: false, groups: false, batch_size: 256 }
    }
}

pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    split: &SplitBundle,
    mode: EvalMode,
    opts: &EvalOptions,
) -> Result<MetricsReport, EvalError> {
    evaluate_cases(scorer, &cases_for(split, mode), mode.name(), opts)
}

/// Ranks every case against the full catalog and aggregates.
pub fn evaluate_cases<S: Scorer + ?Sized>(
    scorer: &S,
    cases: &[EvalCase],
    label: &str,
    opts: &EvalOptions,
) -> Result<MetricsReport, EvalError> {
    if opts.batch_size == 0 {
        return Err(EvalError::Contract("evaluation batch size must be positive".into()));
    }
    let n = scorer.n_items();
    if let Some(c) = cases.iter().find(|c| c.target == 0 || c.target > n) {
        return Err(EvalError::Contract(format!("target item {} is not in the catalog", c.target)));
    }
    let (selected, ids): (Vec<&EvalCase>, IdMode) = if opts.cold_only {
        let part = opts
            .partition
            .ok_or_else(|| EvalError::Contract("cold evaluation needs an item partition".into()))?;
        (cases.iter().filter(|c| part.is_cold(c.target)).collect(), IdMode::Zero)
    } else {
        (cases.iter().collect(), opts.ids)
    };
    let label = if opts.cold_only { format!("{label}-cold") } else { label.to_string() };

    let mut users = Vec::with_capacity(selected.len());
    for chunk in selected.chunks(opts.batch_size) {
        let prefixes: Vec<&[usize]> = chunk.iter().map(|c| c.input.as_slice()).collect();
        let logits = scorer.score(&prefixes, ids)?;
        for (r, c) in chunk.iter().enumerate() {
            users.push(UserResult {
                user: c.user,
                target: c.target,
                train_len: c.train_len,
                rank: rank_of(logits.row(r), c.target - 1),
            });
        }
    }
    Ok(MetricsReport::from_users(label, users, opts.groups, opts.partition))
}

/// Mean cross-entropy of each case's target under the scorer's logits.
pub fn mean_cross_entropy<S: Scorer + ?Sized>(
    scorer: &S,
    cases: &[EvalCase],
    ids: IdMode,
    batch_size: usize,
) -> Result<f64, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::Contract("no cases to score".into()));
    }
    let mut total = 0.0;
    for chunk in cases.chunks(batch_size.max(1)) {
        let prefixes: Vec<&[usize]> = chunk.iter().map(|c| c.input.as_slice()).collect();
        let logits = scorer.score(&prefixes, ids)?;
        for (r, c) in chunk.iter().enumerate() {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[c.target - 1];
        }
    }
    Ok(total / cases.len() as f64)
}
