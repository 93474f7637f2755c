use log::info;

use super::adam::{adam_step, AdamState};
use super::checkpoint::{Checkpoint, CheckpointHeader};
use super::config::{TableRefresh, TrainConfig};
use super::log::{EpochRecord, TrainLog};
use super::TrainError;
use crate::dataio::{build_instances, make_batches, FeatureTable, SplitBundle, Stage, TrainingBatch};
use crate::evaluator::{
    cases_for, cases_from_instances, evaluate, item_tables, mean_cross_entropy, EvalMode, EvalOptions, M2seScorer,
};
use crate::m2se::{
    encode_catalog, m2se_forward, prepare_prefixes, sequence_forward, Binding, ForwardStage, IdMode,
    ItemEncodings, M2seParams, Modality,
};
use crate::numkernel::rng::{stream, Rng};
use crate::numkernel::{KernelError, Real, Tape, Tensor, Var};
use crate::objectives::{finetune_logits, finetune_loss, pretrain_loss, score_logits};

pub const STAGE_PRETRAIN: &str = "pretrain";
pub const STAGE_FINETUNE: &str = "finetune";
pub const STAGE_E2E: &str = "e2e";

/// Everything needed to continue optimization exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Session<T: Real> {
    pub params: M2seParams<T>,
    pub adam: AdamState<T>,
    pub rng: Rng,
    /// Epochs completed.
    pub epoch: usize,
}

impl<T: Real> Session<T> {
    pub fn new(params: M2seParams<T>, rng: Rng) -> Self {
        let adam = AdamState::new(&params.store);
        Self { params, adam, rng, epoch: 0 }
    }

    pub fn checkpoint(&self, stage: &str, cfg: &TrainConfig, best_metric: Option<f64>) -> Checkpoint {
        let header = CheckpointHeader {
            stage: stage.to_string(),
            epoch: self.epoch,
            best_metric,
            train_config: cfg.clone(),
            model: self.params.config.clone(),
            rng: Some(self.rng.clone()),
            adam_step: self.adam.step,
        };
        Checkpoint::new(header, &self.params, Some(&self.adam))
    }

    pub fn from_checkpoint(ck: &Checkpoint, fallback_rng: Rng) -> Result<Self, TrainError> {
        let params = ck.model::<T>()?;
        let adam = ck.adam_state::<T>().unwrap_or_else(|| AdamState::new(&params.store));
        if adam.m.len() != params.store.len() {
            return Err(TrainError::Config("optimizer state does not match the parameters".into()));
        }
        Ok(Self { params, adam, rng: ck.header.rng.clone().unwrap_or(fallback_rng), epoch: ck.header.epoch })
    }
}

/// Gradients for every parameter in store order.
fn gather_grads<T: Real>(tape: &Tape<T>, loss: Var, bind: &Binding, params: &M2seParams<T>) -> Result<Vec<Tensor<T>>, KernelError> {
    let grads = tape.backward(loss)?;
    Ok(params.store.iter().map(|(id, _)| grads.get(bind.var(id))).collect())
}

fn loss_value<T: Real>(tape: &Tape<T>, loss: Var) -> Result<f64, KernelError> {
    let v = tape.value(loss).item()?.as_f64();
    if !v.is_finite() {
        return Err(KernelError::NonFinite { op: "loss" });
    }
    Ok(v)
}

/// Cold-start runs fine-tune without the ID table.
pub fn ids_for(cfg: &TrainConfig) -> IdMode {
    if cfg.has(super::Variant::ColdStart) {
        IdMode::Zero
    } else {
        IdMode::Learned
    }
}

fn batch_prefixes(batch: &TrainingBatch) -> Vec<&[usize]> {
    (0..batch.len()).map(|r| batch.prefix(r)).collect()
}

fn pretrain_stage(cfg: &TrainConfig) -> ForwardStage {
    ForwardStage::Pretrain { rho: cfg.rho, mixup: cfg.mixup() }
}

/// Summed pre-training loss of one batch on `tape`.
pub fn pretrain_batch_loss<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    params: &M2seParams<T>,
    features: &FeatureTable<T>,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Var, KernelError> {
    let prefixes = batch_prefixes(batch);
    let acts = m2se_forward(tape, bind, params, features, &prefixes, &batch.targets, &pretrain_stage(cfg), true, rng)?;
    Ok(pretrain_loss(tape, bind, params, &acts, &batch.targets, cfg.tau, cfg.lambda, cfg.pretrain_flags())?.total)
}

/// Summed fine-tuning cross-entropy of one batch on `tape`.
///
/// With `stale` item tables the catalog side of the logits uses those fixed
/// encodings (plus the live ID table), while the input sequences are encoded
/// live.
#[allow(clippy::too_many_arguments)]
pub fn finetune_batch_loss<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    params: &M2seParams<T>,
    features: &FeatureTable<T>,
    prefixes: &[&[usize]],
    targets: &[usize],
    ids: IdMode,
    stale: Option<&(Tensor<T>, Tensor<T>)>,
    rng: &mut Rng,
) -> Result<Var, KernelError> {
    let stage = ForwardStage::Finetune { ids };
    let logits = match stale {
        None => {
            let acts = m2se_forward(tape, bind, params, features, prefixes, &[], &stage, true, rng)?;
            finetune_logits(tape, bind, params, &acts, ids)?
        }
        Some((ft, fv)) => {
            let cfg = &params.config;
            let seqs = prepare_prefixes(prefixes, cfg.max_len, cfg.n_items)?;
            let mut items: Vec<usize> = seqs.iter().flatten().copied().collect();
            items.sort_unstable();
            items.dedup();
            let enc = encode_catalog(tape, bind, params, features, &items, true, rng)?;
            let acts = sequence_forward(tape, bind, params, enc, seqs, &stage, true, rng)?;
            let all = crate::m2se::all_items(cfg.n_items);
            let table = ItemEncodings::constant(tape, all.clone(), cfg.n_items, ft.clone(), fv.clone())?;
            let gt = table.var(Modality::Text);
            let gv = table.var(Modality::Image);
            let (gt, gv) = match ids {
                IdMode::Zero => (gt, gv),
                IdMode::Learned => {
                    let e = tape.gather_rows(bind.var(params.item_emb), all.iter().map(|&i| Some(i)).collect())?;
                    (tape.add(gt, e)?, tape.add(gv, e)?)
                }
            };
            score_logits(tape, acts.ht, acts.hv, gt, gv)?
        }
    };
    finetune_loss(tape, logits, targets)
}

/// One optimizer step of pre-training; returns the summed batch loss.
pub fn pretrain_step<T: Real>(
    session: &mut Session<T>,
    features: &FeatureTable<T>,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
) -> Result<f64, KernelError> {
    let mut tape = Tape::new();
    let bind = session.params.store.bind(&mut tape, true)?;
    let loss = pretrain_batch_loss(&mut tape, &bind, &session.params, features, batch, cfg, &mut session.rng)?;
    let value = loss_value(&tape, loss)?;
    let grads = gather_grads(&tape, loss, &bind, &session.params)?;
    adam_step(&mut session.params.store, &grads, &mut session.adam, cfg.learning_rate, cfg.weight_decay)?;
    Ok(value)
}

/// One optimizer step of fine-tuning, or of joint training when `joint` adds
/// the pre-training loss of the same batch.
pub fn finetune_step<T: Real>(
    session: &mut Session<T>,
    features: &FeatureTable<T>,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
    stale: Option<&(Tensor<T>, Tensor<T>)>,
    joint: bool,
) -> Result<f64, KernelError> {
    let mut tape = Tape::new();
    let bind = session.params.store.bind(&mut tape, true)?;
    let prefixes = batch_prefixes(batch);
    let ids = ids_for(cfg);
    let mut loss = finetune_batch_loss(
        &mut tape,
        &bind,
        &session.params,
        features,
        &prefixes,
        &batch.targets,
        ids,
        stale,
        &mut session.rng,
    )?;
    if joint {
        let pre = pretrain_batch_loss(&mut tape, &bind, &session.params, features, batch, cfg, &mut session.rng)?;
        loss = tape.add(loss, pre)?;
    }
    let value = loss_value(&tape, loss)?;
    let grads = gather_grads(&tape, loss, &bind, &session.params)?;
    adam_step(&mut session.params.store, &grads, &mut session.adam, cfg.learning_rate, cfg.weight_decay)?;
    Ok(value)
}

fn checked(cfg: &TrainConfig, split: &SplitBundle, features: &FeatureTable<impl Real>) -> Result<(), TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    if features.n_items() != split.n_items {
        return Err(TrainError::Config(format!(
            "feature table covers {} items, dataset has {}",
            features.n_items(),
            split.n_items
        )));
    }
    Ok(())
}

fn instances_or_err(split: &SplitBundle, stage: Stage, cfg: &TrainConfig) -> Result<Vec<crate::dataio::TrainingInstance>, TrainError> {
    let instances = build_instances(split, stage, cfg.max_len);
    if instances.is_empty() {
        return Err(TrainError::Config("no training instances: every training sequence is shorter than 2".into()));
    }
    Ok(instances)
}

fn non_finite(epoch: usize, e: KernelError, last_good: Checkpoint) -> TrainError {
    match e {
        KernelError::NonFinite { .. } => {
            TrainError::NonFinite { epoch, detail: e.to_string(), last_good: Box::new(last_good) }
        }
        other => TrainError::Kernel(other),
    }
}

/// Freshly initialized parameters for `cfg` on this catalog.
pub fn initial_params<T: Real>(cfg: &TrainConfig, n_items: usize, d: usize) -> Result<M2seParams<T>, TrainError> {
    Ok(M2seParams::init(cfg.model_config(n_items, d), &mut stream(cfg.seed, "init"))?)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<T: Real> {
    pub params: M2seParams<T>,
    pub log: TrainLog,
    /// Final state, resumable.
    pub checkpoint: Checkpoint,
}

/// Pre-training for `cfg.pretrain_epochs` epochs, optionally continuing from
/// a pre-training checkpoint. The log covers the epochs run by this call.
pub fn pretrain<T: Real>(
    cfg: &TrainConfig,
    split: &SplitBundle,
    features: &FeatureTable<T>,
    resume: Option<&Checkpoint>,
) -> Result<PretrainOutcome<T>, TrainError> {
    checked(cfg, split, features)?;
    let instances = instances_or_err(split, Stage::Pretrain, cfg)?;
    let mut s = match resume {
        Some(ck) => {
            if ck.header.stage != STAGE_PRETRAIN {
                return Err(TrainError::Config(format!("cannot resume pre-training from a {} checkpoint", ck.header.stage)));
            }
            Session::from_checkpoint(ck, stream(cfg.seed, STAGE_PRETRAIN))?
        }
        None => Session::new(initial_params(cfg, split.n_items, features.d)?, stream(cfg.seed, STAGE_PRETRAIN)),
    };
    let mut log = TrainLog::default();
    while s.epoch < cfg.pretrain_epochs {
        let epoch = s.epoch + 1;
        let last_good = s.checkpoint(STAGE_PRETRAIN, cfg, None);
        let batches = make_batches(&instances, cfg.batch_size, cfg.max_len, &mut s.rng);
        let mut total = 0.0;
        for b in &batches {
            total += pretrain_step(&mut s, features, b, cfg).map_err(|e| non_finite(epoch, e, last_good.clone()))?;
        }
        s.epoch = epoch;
        let train_loss = total / instances.len() as f64;
        info!("pretrain epoch {epoch}: loss {train_loss:.6}");
        log.push(EpochRecord { epoch, train_loss, val_r20: None, test_loss: None });
    }
    let checkpoint = s.checkpoint(STAGE_PRETRAIN, cfg, None);
    Ok(PretrainOutcome { params: s.params, log, checkpoint })
}

/// Patience counter over a maximized metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best_epoch: Option<usize>,
    pub best: f64,
    since: usize,
}

impl EarlyStopper {
    /// `patience == 0` never stops.
    pub fn new(patience: usize) -> Self {
        Self { patience, best_epoch: None, best: f64::NEG_INFINITY, since: 0 }
    }

    /// Records `metric` for `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best_epoch.is_none() || metric > self.best {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.since = 0;
            true
        } else {
            self.since += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.since >= self.patience
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T: Real> {
    /// Parameters of the best validation epoch.
    pub params: M2seParams<T>,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_r20: f64,
    pub epochs_run: usize,
    pub checkpoint: Checkpoint,
}

/// Fine-tuning starting point: a fresh initialization, overwritten by every
/// tensor of `init` whose name and shape match.
pub fn finetune_init<T: Real>(
    cfg: &TrainConfig,
    n_items: usize,
    d: usize,
    init: Option<&M2seParams<T>>,
) -> Result<M2seParams<T>, TrainError> {
    let mut params = initial_params(cfg, n_items, d)?;
    if let Some(src) = init {
        let copied = params.store.load_matching(&src.store);
        if copied.is_empty() {
            return Err(TrainError::Config("initial checkpoint shares no parameters with this model".into()));
        }
        info!("initialized {} of {} tensors from checkpoint", copied.len(), params.store.len());
    }
    Ok(params)
}

/// Fine-tuning with validation R@20 early stopping. Returns the best epoch's
/// parameters.
pub fn finetune<T: Real>(
    cfg: &TrainConfig,
    split: &SplitBundle,
    features: &FeatureTable<T>,
    init: Option<&M2seParams<T>>,
) -> Result<FinetuneOutcome<T>, TrainError> {
    checked(cfg, split, features)?;
    let params = finetune_init(cfg, split.n_items, features.d, init)?;
    supervised_loop(cfg, split, features, params, STAGE_FINETUNE, false)
}

/// Pre-training and fine-tuning losses summed and optimized together from a
/// fresh initialization, with the fine-tuning stopping rule.
pub fn train_end_to_end<T: Real>(
    cfg: &TrainConfig,
    split: &SplitBundle,
    features: &FeatureTable<T>,
) -> Result<FinetuneOutcome<T>, TrainError> {
    checked(cfg, split, features)?;
    let params = initial_params(cfg, split.n_items, features.d)?;
    supervised_loop(cfg, split, features, params, STAGE_E2E, true)
}

fn supervised_loop<T: Real>(
    cfg: &TrainConfig,
    split: &SplitBundle,
    features: &FeatureTable<T>,
    params: M2seParams<T>,
    stage: &str,
    joint: bool,
) -> Result<FinetuneOutcome<T>, TrainError> {
    let instances = instances_or_err(split, Stage::Finetune, cfg)?;
    let ids = ids_for(cfg);
    let opts = EvalOptions { ids, batch_size: cfg.eval_batch_size, ..EvalOptions::default() };
    let train_cases = cases_from_instances(&instances);
    let test_cases = cases_for(split, EvalMode::Test);

    let mut s = Session::new(params, stream(cfg.seed, stage));
    let mut log = TrainLog::default();
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best = s.params.clone();
    while s.epoch < cfg.finetune_epochs {
        let epoch = s.epoch + 1;
        let last_good = s.checkpoint(stage, cfg, stopper.best_epoch.map(|_| stopper.best));
        let stale = match cfg.table_refresh {
            TableRefresh::Step => None,
            TableRefresh::Epoch => Some(item_tables(&s.params, features)?),
        };
        let batches = make_batches(&instances, cfg.batch_size, cfg.max_len, &mut s.rng);
        let mut total = 0.0;
        for b in &batches {
            total += finetune_step(&mut s, features, b, cfg, stale.as_ref(), joint)
                .map_err(|e| non_finite(epoch, e, last_good.clone()))?;
        }
        s.epoch = epoch;

        let scorer = M2seScorer::new(&s.params, features)?;
        let val = evaluate(&scorer, split, EvalMode::Valid, &opts)?;
        let val_r20 = if val.empty { 0.0 } else { val.overall.recall_at(20).unwrap_or(0.0) };
        let (train_loss, test_loss) = if cfg.diagnostic {
            let tr = mean_cross_entropy(&scorer, &train_cases, ids, cfg.eval_batch_size)?;
            let te = mean_cross_entropy(&scorer, &test_cases, ids, cfg.eval_batch_size)?;
            (tr, Some(te))
        } else {
            (total / instances.len() as f64, None)
        };
        info!("{stage} epoch {epoch}: loss {train_loss:.6} val R@20 {val_r20:.4}");
        log.push(EpochRecord { epoch, train_loss, val_r20: Some(val_r20), test_loss });
        drop(scorer);
        if stopper.observe(epoch, val_r20) {
            best = s.params.clone();
        }
        if stopper.should_stop() {
            info!("{stage}: no improvement for {} epochs, stopping", stopper.patience);
            break;
        }
    }
    // Without early stopping there is no model selection: keep the final state.
    let (best_epoch, best_val_r20) = if cfg.early_stop_patience == 0 {
        best = s.params.clone();
        (s.epoch, log.records.last().and_then(|r| r.val_r20).unwrap_or(0.0))
    } else {
        let e = stopper.best_epoch.unwrap_or(0);
        (e, if e == 0 { 0.0 } else { stopper.best })
    };
    let mut header = s.checkpoint(stage, cfg, Some(best_val_r20)).header;
    header.epoch = best_epoch;
    header.adam_step = 0;
    let checkpoint = Checkpoint::new(header, &best, None);
    Ok(FinetuneOutcome { params: best, log, best_epoch, best_val_r20, epochs_run: s.epoch, checkpoint })
}
