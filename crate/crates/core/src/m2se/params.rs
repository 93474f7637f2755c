use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numkernel::{KernelError, Real, Tape, Tensor, Var};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

/// Shape hyperparameters of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input feature width.
    pub d: usize,
    /// Attention width of the pooling layer.
    pub d_a: usize,
    /// Hidden width.
    pub d_0: usize,
    pub n_experts: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    /// Dropout inside the experts and the Transformer.
    pub dropout: f64,
    pub shared_encoders: bool,
    pub n_items: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), KernelError> {
        let bad = |m: String| Err(KernelError::Config(m));
        if self.d == 0 || self.d_a == 0 || self.d_0 == 0 {
            return bad("d, d_a and d_0 must be positive".into());
        }
        if self.n_experts == 0 {
            return bad("need at least one expert".into());
        }
        if self.n_heads == 0 || self.d_0 % self.n_heads != 0 {
            return bad(format!("d_0 = {} not divisible by {} heads", self.d_0, self.n_heads));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.n_items == 0 {
            return bad("catalog is empty".into());
        }
        Ok(())
    }
}

/// Which optimizer treatment a parameter receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }

    pub fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::Norm => 2,
            ParamKind::Embedding => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::Norm,
            3 => ParamKind::Embedding,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named learnable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Puts every parameter on `tape`; differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Binding, KernelError> {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect::<Result<_, _>>()?;
        Ok(Binding { vars })
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, value: p.value.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies values of same-named, same-shaped parameters from `other`.
    /// Returns the names that were copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Vec<String> {
        let mut copied = Vec::new();
        for p in self.params.iter_mut() {
            if let Some(&j) = other.index.get(&p.name) {
                if other.params[j].value.shape() == p.value.shape() {
                    p.value = other.params[j].value.clone();
                    copied.push(p.name.clone());
                }
            }
        }
        copied
    }
}

/// Tape handles of a [`ParamStore`] for one forward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps handles already on a tape, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Truncated normal: resample anything beyond two standard deviations.
pub fn truncated_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::of(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub w: ParamId,
    pub b: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

/// Attention-pooling layer plus mixture of experts for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEncoderParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub experts: Vec<ExpertParams>,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    /// Learned positional table, `max_len × d_0`.
    pub pos: ParamId,
    pub layers: Vec<LayerParams>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub w_t: ParamId,
    pub b_t: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
}

/// Every learnable tensor of the model and the handles to find them.
#[derive(Debug, Clone, PartialEq)]
pub struct M2seParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub text: ModalityEncoderParams,
    /// Same handles as `text` when encoders are shared.
    pub image: ModalityEncoderParams,
    pub transformer: TransformerParams,
    pub proj: ProjectionParams,
    /// Item ID table, `(n_items + 1) × d_0`, row 0 (padding) fixed at zero.
    pub item_emb: ParamId,
}

struct Init<'a, T, R: ?Sized> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Real, R: Rng + ?Sized> Init<'_, T, R> {
    fn weight(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let v = truncated_normal(shape, INIT_STD, self.rng);
        self.store.add(name, ParamKind::Weight, v)
    }

    fn bias(&mut self, name: &str, n: usize) -> ParamId {
        self.store.add(name, ParamKind::Bias, Tensor::zeros(&[n]))
    }

    fn norm(&mut self, prefix: &str, n: usize) -> (ParamId, ParamId) {
        let g = self.store.add(format!("{prefix}.g"), ParamKind::Norm, Tensor::full(&[n], T::one()));
        let b = self.store.add(format!("{prefix}.b"), ParamKind::Norm, Tensor::zeros(&[n]));
        (g, b)
    }

    fn encoder(&mut self, prefix: &str, c: &ModelConfig) -> ModalityEncoderParams {
        let w1 = self.weight(&format!("{prefix}.attn.w1"), &[c.d, c.d_a]);
        let b1 = self.bias(&format!("{prefix}.attn.b1"), c.d_a);
        let w2 = self.weight(&format!("{prefix}.attn.w2"), &[c.d_a, 1]);
        let b2 = self.bias(&format!("{prefix}.attn.b2"), 1);
        let experts = (0..c.n_experts)
            .map(|k| {
                let w = self.weight(&format!("{prefix}.expert{k}.w"), &[c.d, c.d_0]);
                let b = self.bias(&format!("{prefix}.expert{k}.b"), c.d_0);
                let (ln_g, ln_b) = self.norm(&format!("{prefix}.expert{k}.ln"), c.d_0);
                ExpertParams { w, b, ln_g, ln_b }
            })
            .collect();
        let gate_w = self.weight(&format!("{prefix}.gate.w"), &[c.d, c.n_experts]);
        let gate_b = self.bias(&format!("{prefix}.gate.b"), c.n_experts);
        ModalityEncoderParams { w1, b1, w2, b2, experts, gate_w, gate_b }
    }
}

impl<T: Real> M2seParams<T> {
    /// Fresh parameters: truncated normal(0, 0.02) weights and embeddings,
    /// zero biases, unit/zero layer-norm affines.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, KernelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = &config;
        let mut init = Init { store: &mut store, rng };
        let (text, image) = if c.shared_encoders {
            let shared = init.encoder("enc.shared", c);
            (shared.clone(), shared)
        } else {
            (init.encoder("enc.text", c), init.encoder("enc.image", c))
        };
        let pos = {
            let v = truncated_normal(&[c.max_len, c.d_0], INIT_STD, init.rng);
            init.store.add("tf.pos", ParamKind::Embedding, v)
        };
        let layers = (0..c.n_layers)
            .map(|l| {
                let p = format!("tf.layer{l}");
                let (ln1_g, ln1_b) = init.norm(&format!("{p}.ln1"), c.d_0);
                let wq = init.weight(&format!("{p}.wq"), &[c.d_0, c.d_0]);
                let bq = init.bias(&format!("{p}.bq"), c.d_0);
                let wk = init.weight(&format!("{p}.wk"), &[c.d_0, c.d_0]);
                let bk = init.bias(&format!("{p}.bk"), c.d_0);
                let wv = init.weight(&format!("{p}.wv"), &[c.d_0, c.d_0]);
                let bv = init.bias(&format!("{p}.bv"), c.d_0);
                let wo = init.weight(&format!("{p}.wo"), &[c.d_0, c.d_0]);
                let bo = init.bias(&format!("{p}.bo"), c.d_0);
                let (ln2_g, ln2_b) = init.norm(&format!("{p}.ln2"), c.d_0);
                let ff1_w = init.weight(&format!("{p}.ff1.w"), &[c.d_0, 4 * c.d_0]);
                let ff1_b = init.bias(&format!("{p}.ff1.b"), 4 * c.d_0);
                let ff2_w = init.weight(&format!("{p}.ff2.w"), &[4 * c.d_0, c.d_0]);
                let ff2_b = init.bias(&format!("{p}.ff2.b"), c.d_0);
                LayerParams { ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b }
            })
            .collect();
        let (lnf_g, lnf_b) = init.norm("tf.lnf", c.d_0);
        let transformer = TransformerParams { pos, layers, lnf_g, lnf_b };
        let proj = ProjectionParams {
            w_t: init.weight("proj.t.w", &[c.d_0, c.d_0]),
            b_t: init.bias("proj.t.b", c.d_0),
            w_v: init.weight("proj.v.w", &[c.d_0, c.d_0]),
            b_v: init.bias("proj.v.b", c.d_0),
        };
        let mut emb = truncated_normal::<T, _>(&[c.n_items + 1, c.d_0], INIT_STD, init.rng);
        emb.row_mut(0).iter_mut().for_each(|v| *v = T::zero());
        let item_emb = init.store.add("item_emb", ParamKind::Embedding, emb);
        Ok(Self { config, store, text, image, transformer, proj, item_emb })
    }

    /// Rebuilds the handle layout for `config` and fills it from `store` by name.
    /// Every expected tensor must be present with the right shape, and nothing else.
    pub fn from_store(config: ModelConfig, store: &ParamStore<T>) -> Result<Self, KernelError> {
        let mut p = Self::init(config, &mut crate::numkernel::rng::seeded(0))?;
        if store.len() != p.store.len() {
            return Err(KernelError::Config(format!(
                "expected {} parameter tensors, found {}",
                p.store.len(),
                store.len()
            )));
        }
        let ids: Vec<ParamId> = p.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let want = p.store.get(id);
            let src = store
                .id(&want.name)
                .map(|j| store.get(j))
                .ok_or_else(|| KernelError::Config(format!("missing parameter {}", want.name)))?;
            if src.value.shape() != want.value.shape() || src.kind != want.kind {
                return Err(KernelError::Config(format!(
                    "parameter {} is {:?} {:?}, expected {:?} {:?}",
                    want.name,
                    src.kind,
                    src.value.shape(),
                    want.kind,
                    want.value.shape()
                )));
            }
            *p.store.value_mut(id) = src.value.clone();
        }
        Ok(p)
    }

    /// Same layout in another scalar type.
    pub fn cast<U: Real>(&self) -> M2seParams<U> {
        M2seParams {
            config: self.config.clone(),
            store: self.store.cast(),
            text: self.text.clone(),
            image: self.image.clone(),
            transformer: self.transformer.clone(),
            proj: self.proj.clone(),
            item_emb: self.item_emb,
        }
    }

    pub fn encoder(&self, m: super::Modality) -> &ModalityEncoderParams {
        match m {
            super::Modality::Text => &self.text,
            super::Modality::Image => &self.image,
        }
    }
}
