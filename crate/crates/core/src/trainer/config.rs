use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::m2se::{MixupConfig, ModelConfig};
use crate::objectives::PretrainFlags;

/// Ablation and protocol switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    ResnetFeatures,
    NoNip,
    NoCmcl,
    NoCmixup,
    NoPretrain,
    NoProj,
    E2e,
    SharedEncoders,
    ColdStart,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::ResnetFeatures,
        Variant::NoNip,
        Variant::NoCmcl,
        Variant::NoCmixup,
        Variant::NoPretrain,
        Variant::NoProj,
        Variant::E2e,
        Variant::SharedEncoders,
        Variant::ColdStart,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ResnetFeatures => "resnet-features",
            Variant::NoNip => "no-nip",
            Variant::NoCmcl => "no-cmcl",
            Variant::NoCmixup => "no-cmixup",
            Variant::NoPretrain => "no-pretrain",
            Variant::NoProj => "no-proj",
            Variant::E2e => "e2e",
            Variant::SharedEncoders => "shared-encoders",
            Variant::ColdStart => "cold-start",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                format!("unknown variant `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// The eight ablation rows: the full model and seven variants.
pub fn ablation_table() -> Vec<(&'static str, Vec<Variant>)> {
    vec![
        ("MP4SR", vec![]),
        ("w/o NIP", vec![Variant::NoNip]),
        ("w/o CMCL", vec![Variant::NoCmcl]),
        ("w/o C-Mixup", vec![Variant::NoCmixup]),
        ("w/o Pre-train", vec![Variant::NoPretrain]),
        ("w/o Proj", vec![Variant::NoProj]),
        ("E2E", vec![Variant::E2e]),
        ("Shared", vec![Variant::SharedEncoders]),
    ]
}

/// When fine-tuning recomputes the item tables `F^t`, `F^v` used for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TableRefresh {
    /// Live tables every optimizer step.
    #[default]
    Step,
    /// Frozen snapshot taken at the start of each epoch.
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    /// Upper bound; early stopping usually ends fine-tuning sooner.
    pub finetune_epochs: usize,
    pub rho: f64,
    pub tau: f64,
    pub lambda: f64,
    pub mixup_p_max: f64,
    pub n_experts: usize,
    pub d_a: usize,
    pub d_0: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub variants: Vec<Variant>,
    /// 0 disables early stopping; fine-tuning then keeps the final parameters.
    pub early_stop_patience: usize,
    pub table_refresh: TableRefresh,
    /// Log eval-mode train and test cross-entropy every fine-tuning epoch.
    pub diagnostic: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 1024,
            pretrain_epochs: 300,
            finetune_epochs: 300,
            rho: 0.2,
            tau: 0.07,
            lambda: 0.01,
            mixup_p_max: 0.5,
            n_experts: 8,
            d_a: 64,
            d_0: 64,
            n_layers: 2,
            n_heads: 2,
            max_len: 50,
            dropout: 0.2,
            weight_decay: 0.0001,
            seed: 0,
            variants: Vec::new(),
            early_stop_patience: 10,
            table_refresh: TableRefresh::Step,
            diagnostic: false,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn has(&self, v: Variant) -> bool {
        self.variants.contains(&v)
    }

    pub fn with_variants(&self, variants: &[Variant]) -> Self {
        let mut c = self.clone();
        for &v in variants {
            if !c.has(v) {
                c.variants.push(v);
            }
        }
        c.variants.sort();
        c
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.has(Variant::ResnetFeatures) {
            return Err("variant resnet-features is not supported: it needs image features from a separate extractor".into());
        }
        if self.has(Variant::E2e) && self.has(Variant::NoPretrain) {
            return Err("variants e2e and no-pretrain contradict each other".into());
        }
        if self.has(Variant::NoNip) && self.has(Variant::NoCmcl) {
            return Err("variants no-nip and no-cmcl together leave no pre-training objective".into());
        }
        let positive = [
            ("batch_size", self.batch_size),
            ("n_experts", self.n_experts),
            ("d_a", self.d_a),
            ("d_0", self.d_0),
            ("n_heads", self.n_heads),
            ("max_len", self.max_len),
            ("eval_batch_size", self.eval_batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.d_0 % self.n_heads != 0 {
            return Err(format!("d_0 = {} is not divisible by n_heads = {}", self.d_0, self.n_heads));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(format!("rho {} outside [0, 1)", self.rho));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(format!("tau {} must be positive", self.tau));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.mixup_p_max) {
            return Err(format!("mixup_p_max {} outside [0, 1]", self.mixup_p_max));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        Ok(())
    }

    pub fn model_config(&self, n_items: usize, d: usize) -> ModelConfig {
        ModelConfig {
            d,
            d_a: self.d_a,
            d_0: self.d_0,
            n_experts: self.n_experts,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_len: self.max_len,
            dropout: self.dropout,
            shared_encoders: self.has(Variant::SharedEncoders),
            n_items,
        }
    }

    pub fn pretrain_flags(&self) -> PretrainFlags {
        PretrainFlags {
            no_nip: self.has(Variant::NoNip),
            no_cmcl: self.has(Variant::NoCmcl),
            no_proj: self.has(Variant::NoProj),
        }
    }

    pub fn mixup(&self) -> MixupConfig {
        MixupConfig { p_max: self.mixup_p_max, active: !self.has(Variant::NoCmixup) }
    }
}
