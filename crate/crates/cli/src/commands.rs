use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use mp4sr::dataio::{
    cold_item_partition, kcore_filter, leave_one_out_split, load_feature_store, load_interactions, synth_generate,
    write_feature_store, write_interactions, DataError, FeatureTable, SplitBundle,
};
use mp4sr::evaluator::{
    evaluate as eval_split, export_loss_trajectory, EvalError, EvalMode, EvalOptions, M2seScorer, MetricsReport, KS,
};
use mp4sr::numkernel::Real;
use mp4sr::trainer::{
    ablation_table, finetune as train_finetune, ids_for, pretrain as train_pretrain, run_variant, train_end_to_end,
    Checkpoint, TrainConfig, TrainError, TrainLog, Variant,
};
use serde::Serialize;

use crate::config::RunConfigFile;
use crate::{CliError, Common, Mode};

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Data(d) => d.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Fixed output layout: `config.toml`, `checkpoints/`, `logs/`, `reports/`.
pub struct OutDir(PathBuf);

impl OutDir {
    fn create(root: PathBuf, cfg: &RunConfigFile) -> Result<Self, CliError> {
        for sub in ["checkpoints", "logs", "reports"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        }
        let out = OutDir(root);
        out.write("config.toml", &cfg.to_toml())?;
        Ok(out)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.0.join(rel)
    }

    fn write(&self, rel: &str, text: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        fs::write(&p, text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        Ok(p)
    }

    fn save(&self, rel: &str, ck: &Checkpoint) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        ck.save(&p)?;
        Ok(p)
    }
}

/// Config file with command-line overrides applied and validated.
fn resolve(common: &Common) -> Result<(RunConfigFile, OutDir), CliError> {
    let mut cfg = RunConfigFile::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    let mut variants = common
        .variants
        .iter()
        .map(|v| v.parse::<Variant>().map_err(CliError::Config))
        .collect::<Result<Vec<_>, _>>()?;
    if common.cold_start {
        variants.push(Variant::ColdStart);
    }
    cfg.train = cfg.train.with_variants(&variants);
    cfg.train.validate().map_err(CliError::Config)?;
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    let root = cfg.out.clone().ok_or_else(|| CliError::Config("no output directory: pass --out".into()))?;
    let out = OutDir::create(root, &cfg)?;
    Ok((cfg, out))
}

fn load_data<T: Real>(cfg: &RunConfigFile) -> Result<(SplitBundle, FeatureTable<T>), CliError> {
    let ds = load_interactions(cfg.interactions()?)?;
    let store = load_feature_store(cfg.features()?)?;
    let features = store.align::<T>(&ds)?;
    Ok((leave_one_out_split(&ds), features))
}

fn test_report<T: Real>(
    train: &TrainConfig,
    split: &SplitBundle,
    features: &FeatureTable<T>,
    params: &mp4sr::m2se::M2seParams<T>,
    mode: EvalMode,
    cold_only: bool,
) -> Result<MetricsReport, CliError> {
    let partition = cold_item_partition(split);
    let scorer = M2seScorer::new(params, features).map_err(TrainError::from)?;
    let opts = EvalOptions {
        ids: ids_for(train),
        partition: Some(&partition),
        cold_only,
        groups: true,
        batch_size: train.eval_batch_size,
    };
    Ok(eval_split(&scorer, split, mode, &opts)?)
}

pub fn synth(common: &Common) -> Result<(), CliError> {
    let (cfg, out) = resolve(common)?;
    let (ds, store) = synth_generate(&cfg.synth)?;
    write_interactions(&ds, out.path("interactions.tsv"))?;
    write_feature_store(&store, out.path("features.bin"))?;
    println!(
        "wrote {} interactions ({} users, {} items) and features for {} items to {}",
        ds.n_interactions(),
        ds.n_users(),
        ds.n_items(),
        store.items.len(),
        out.0.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Manifest {
    k: usize,
    users: usize,
    items: usize,
    interactions: usize,
    avg_len: f64,
    train_interactions: usize,
    valid_targets: usize,
    test_targets: usize,
    cold_items: usize,
    warm_items: usize,
}

pub fn preprocess(common: &Common, k: usize, input: Option<PathBuf>) -> Result<(), CliError> {
    let (cfg, out) = resolve(common)?;
    let input = match input {
        Some(p) => p,
        None => cfg.interactions()?.to_path_buf(),
    };
    let raw = load_interactions(&input)?;
    let ds = kcore_filter(&raw, k)?;
    let split = leave_one_out_split(&ds);
    let part = cold_item_partition(&split);
    let manifest = Manifest {
        k,
        users: ds.n_users(),
        items: ds.n_items(),
        interactions: ds.n_interactions(),
        avg_len: ds.avg_len(),
        train_interactions: split.users.iter().map(|u| u.train.len()).sum(),
        valid_targets: split.users.len(),
        test_targets: split.users.len(),
        cold_items: part.cold.len(),
        warm_items: part.warm.len(),
    };
    write_interactions(&ds, out.path("interactions.tsv"))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    out.write("manifest.json", &json)?;
    println!("{}-core: {} users, {} items, {} interactions", k, manifest.users, manifest.items, manifest.interactions);
    Ok(())
}

pub fn pretrain<T: Real>(common: &Common, init: Option<&Path>) -> Result<(), CliError> {
    let (cfg, out) = resolve(common)?;
    let train = &cfg.train;
    for v in [Variant::NoPretrain, Variant::E2e] {
        if train.has(v) {
            return Err(CliError::Config(format!("variant {v} has no separate pre-training stage")));
        }
    }
    let resume = init.map(Checkpoint::load).transpose()?;
    let (split, features) = load_data::<T>(&cfg)?;
    let split = if train.has(Variant::ColdStart) { split.restrict_train(&cold_item_partition(&split).warm) } else { split };
    match train_pretrain(train, &split, &features, resume.as_ref()) {
        Ok(o) => {
            out.write("logs/pretrain.csv", &o.log.to_csv())?;
            let p = out.save("checkpoints/pretrain.ckpt", &o.checkpoint)?;
            println!("pre-trained {} epochs; checkpoint {}", o.checkpoint.header.epoch, p.display());
            Ok(())
        }
        Err(TrainError::NonFinite { epoch, detail, last_good }) => {
            let p = out.save("checkpoints/last_good.ckpt", &last_good)?;
            Err(CliError::Runtime(format!(
                "training diverged in epoch {epoch} ({detail}); last good state saved to {}",
                p.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn finetune<T: Real>(common: &Common, init: Option<&Path>) -> Result<(), CliError> {
    let (cfg, out) = resolve(common)?;
    let train = &cfg.train;
    if init.is_some() && (train.has(Variant::NoPretrain) || train.has(Variant::E2e)) {
        return Err(CliError::Config("--init cannot be combined with variants no-pretrain or e2e".into()));
    }
    let (split, features) = load_data::<T>(&cfg)?;
    let result = if train.has(Variant::E2e) {
        train_end_to_end(train, &split, &features)
    } else {
        let start = match init {
            Some(p) => Some(Checkpoint::load(p)?.model::<T>()?),
            None => None,
        };
        train_finetune(train, &split, &features, start.as_ref())
    };
    let o = match result {
        Err(TrainError::NonFinite { epoch, detail, last_good }) => {
            let p = out.save("checkpoints/last_good.ckpt", &last_good)?;
            return Err(CliError::Runtime(format!(
                "training diverged in epoch {epoch} ({detail}); last good state saved to {}",
                p.display()
            )));
        }
        r => r?,
    };
    out.write("logs/finetune.csv", &o.log.to_csv())?;
    let ck = out.save("checkpoints/finetune.ckpt", &o.checkpoint)?;
    let report = test_report(train, &split, &features, &o.params, EvalMode::Test, train.has(Variant::ColdStart))?;
    out.write("reports/test.csv", &report.to_csv())?;
    println!("best epoch {} (val R@20 {:.4}); checkpoint {}", o.best_epoch, o.best_val_r20, ck.display());
    print!("{}", report.to_table());
    Ok(())
}

pub fn evaluate<T: Real>(common: &Common, init: &Path, mode: Mode) -> Result<(), CliError> {
    let (mut cfg, out) = resolve(common)?;
    let ck = Checkpoint::load(init)?;
    let params = ck.model::<T>()?;
    let cold = cfg.train.has(Variant::ColdStart) || ck.header.train_config.has(Variant::ColdStart);
    if cold {
        cfg.train = cfg.train.with_variants(&[Variant::ColdStart]);
    }
    let (split, features) = load_data::<T>(&cfg)?;
    let mode = match mode {
        Mode::Valid => EvalMode::Valid,
        Mode::Test => EvalMode::Test,
    };
    let report = test_report(&cfg.train, &split, &features, &params, mode, cold)?;
    let p = out.write(&format!("reports/{}.csv", report.label), &report.to_csv())?;
    print!("{}", report.to_table());
    println!("report {}", p.display());
    Ok(())
}

fn slug(label: &str) -> String {
    let s: String = label
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect();
    s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-")
}

pub const ABLATION_HEADER: &str = "variant,users,R@5,R@10,R@20,N@5,N@10,N@20";

pub fn ablate<T: Real>(common: &Common) -> Result<(), CliError> {
    let (cfg, out) = resolve(common)?;
    let (split, features) = load_data::<T>(&cfg)?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut table = format!("{:<14} {:>6}", "variant", "users");
    for k in KS {
        let _ = write!(table, " {:>7}", format!("R@{k}"));
    }
    for k in KS {
        let _ = write!(table, " {:>7}", format!("N@{k}"));
    }
    table.push('\n');
    for (label, variants) in ablation_table() {
        let train = cfg.train.with_variants(&variants);
        train.validate().map_err(CliError::Config)?;
        info!("ablation row {label}");
        let o = run_variant(&train, &split, &features)?;
        let name = slug(label);
        if let Some(log) = &o.pretrain_log {
            out.write(&format!("logs/{name}.pretrain.csv"), &log.to_csv())?;
        }
        out.write(&format!("logs/{name}.finetune.csv"), &o.finetune.log.to_csv())?;
        out.write(&format!("reports/{name}.csv"), &o.test.to_csv())?;
        let row = &o.test.overall;
        let _ = write!(csv, "{label},{}", row.users);
        let _ = write!(table, "{label:<14} {:>6}", row.users);
        for v in row.recall.iter().chain(&row.ndcg) {
            let _ = write!(csv, ",{v}");
            let _ = write!(table, " {v:>7.4}");
        }
        csv.push('\n');
        table.push('\n');
    }
    out.write("reports/ablation.csv", &csv)?;
    out.write("reports/ablation.txt", &table)?;
    print!("{table}");
    Ok(())
}

pub fn report(common: &Common, logs: &[String]) -> Result<(), CliError> {
    let (_, out) = resolve(common)?;
    let mut runs: Vec<(String, TrainLog)> = Vec::with_capacity(logs.len());
    for arg in logs {
        let (id, p) = match arg.split_once('=') {
            Some((id, p)) => (id.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(arg);
                (p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), p)
            }
        };
        if runs.iter().any(|(other, _)| *other == id) {
            return Err(CliError::Config(format!("run id `{id}` given twice; name runs as RUN_ID=PATH")));
        }
        let p = &p;
        let text = fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        let log = TrainLog::from_csv(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        runs.push((id, log));
    }
    let refs: Vec<(&str, &TrainLog)> = runs.iter().map(|(id, l)| (id.as_str(), l)).collect();
    let csv = export_loss_trajectory(&refs)?;
    let p = out.write("reports/loss_trajectory.csv", &csv)?;
    println!("wrote {}", p.display());
    Ok(())
}
