use log::info;

use super::config::{TrainConfig, Variant};
use super::log::TrainLog;
use super::loops::{finetune, ids_for, pretrain, train_end_to_end, FinetuneOutcome};
use super::TrainError;
use crate::dataio::{cold_item_partition, FeatureTable, SplitBundle};
use crate::evaluator::{evaluate, EvalMode, EvalOptions, M2seScorer, MetricsReport};
use crate::numkernel::Real;

/// One trained and tested configuration.
#[derive(Debug, Clone)]
pub struct VariantOutcome<T: Real> {
    pub pretrain_log: Option<TrainLog>,
    pub finetune: FinetuneOutcome<T>,
    pub test: MetricsReport,
}

/// Runs the full protocol selected by `cfg.variants`: optional pre-training,
/// fine-tuning (or joint training for `e2e`), then test evaluation.
///
/// `cold-start` pre-trains on warm items only, fine-tunes without the ID
/// table and tests only users whose target is cold.
pub fn run_variant<T: Real>(
    cfg: &TrainConfig,
    split: &SplitBundle,
    features: &FeatureTable<T>,
) -> Result<VariantOutcome<T>, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    let cold = cfg.has(Variant::ColdStart);
    let partition = cold_item_partition(split);
    let (pretrain_log, ft) = if cfg.has(Variant::E2e) {
        (None, train_end_to_end(cfg, split, features)?)
    } else if cfg.has(Variant::NoPretrain) {
        (None, finetune(cfg, split, features, None)?)
    } else {
        let pre_split = if cold { split.restrict_train(&partition.warm) } else { split.clone() };
        let pre = pretrain(cfg, &pre_split, features, None)?;
        let ft = finetune(cfg, split, features, Some(&pre.params))?;
        (Some(pre.log), ft)
    };
    let scorer = M2seScorer::new(&ft.params, features)?;
    let opts = EvalOptions {
        ids: ids_for(cfg),
        partition: Some(&partition),
        cold_only: cold,
        groups: true,
        batch_size: cfg.eval_batch_size,
    };
    let test = evaluate(&scorer, split, EvalMode::Test, &opts)?;
    drop(scorer);
    Ok(VariantOutcome { pretrain_log, finetune: ft, test })
}

/// Hyper-parameter sets searched jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub weight_decays: Vec<f64>,
}

impl Grid {
    /// The configuration's own values only.
    pub fn single(cfg: &TrainConfig) -> Self {
        Self { learning_rates: vec![cfg.learning_rate], batch_sizes: vec![cfg.batch_size], weight_decays: vec![cfg.weight_decay] }
    }

    /// 27 points: learning rate × batch size × weight decay.
    pub fn full() -> Self {
        Self {
            learning_rates: vec![0.0001, 0.0005, 0.001],
            batch_sizes: vec![256, 512, 1024],
            weight_decays: vec![0.0001, 0.0005, 0.001],
        }
    }

    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &lr in &self.learning_rates {
            for &bs in &self.batch_sizes {
                for &wd in &self.weight_decays {
                    out.push(TrainConfig { learning_rate: lr, batch_size: bs, weight_decay: wd, ..base.clone() });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub config: TrainConfig,
    pub best_val_r20: f64,
}

/// Trains every grid point and returns them all with the index of the best
/// validation R@20 (first on ties).
pub fn grid_search<T: Real>(
    base: &TrainConfig,
    grid: &Grid,
    split: &SplitBundle,
    features: &FeatureTable<T>,
) -> Result<(usize, Vec<GridPoint>), TrainError> {
    let configs = grid.configs(base);
    if configs.is_empty() {
        return Err(TrainError::Config("empty search grid".into()));
    }
    let mut points = Vec::with_capacity(configs.len());
    for config in configs {
        let out = run_variant(&config, split, features)?;
        info!(
            "grid lr {} batch {} wd {}: val R@20 {:.4}",
            config.learning_rate, config.batch_size, config.weight_decay, out.finetune.best_val_r20
        );
        points.push(GridPoint { config, best_val_r20: out.finetune.best_val_r20 });
    }
    let mut best = 0;
    for (k, p) in points.iter().enumerate() {
        if p.best_val_r20 > points[best].best_val_r20 {
            best = k;
        }
    }
    Ok((best, points))
}
