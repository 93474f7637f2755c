use rand::Rng;

use super::encoder::encode_items;
use super::mixup::{complementary_mixup, sequence_dropout, MixupConfig};
use super::params::{Binding, M2seParams};
use super::transformer::{transformer_encode, TransformerOutput};
use super::Modality;
use crate::dataio::{FeatureTable, PAD};
use crate::numkernel::{KernelError, Real, Tape, Tensor, Var};

/// How the ID table enters a fine-tuning forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdMode {
    Learned,
    /// Cold-start: the table is treated as all zeros.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardStage {
    Pretrain { rho: f64, mixup: MixupConfig },
    Finetune { ids: IdMode },
}

impl ForwardStage {
    pub fn validate(&self) -> Result<(), KernelError> {
        if let ForwardStage::Pretrain { rho, mixup } = self {
            if !(0.0..1.0).contains(rho) {
                return Err(KernelError::Config(format!("sequence dropout {rho} outside [0, 1)")));
            }
            if !(0.0..=1.0).contains(&mixup.p_max) {
                return Err(KernelError::Config(format!("mixup p_max {} outside [0, 1]", mixup.p_max)));
            }
        }
        Ok(())
    }
}

/// Encoder outputs for a set of catalog items.
#[derive(Debug, Clone)]
pub struct ItemEncodings {
    pub items: Vec<usize>,
    row_of: Vec<Option<usize>>,
    /// `[U, d_0]`, row `u` encodes `items[u]`.
    pub zt: Var,
    pub zv: Var,
}

impl ItemEncodings {
    /// Wraps precomputed `[U, d_0]` encodings as tape constants.
    pub fn constant<T: Real>(
        tape: &mut Tape<T>,
        items: Vec<usize>,
        n_items: usize,
        zt: Tensor<T>,
        zv: Tensor<T>,
    ) -> Result<Self, KernelError> {
        let row_of = row_index(&items, n_items)?;
        let zt = tape.constant(zt)?;
        let zv = tape.constant(zv)?;
        Ok(Self { items, row_of, zt, zv })
    }

    pub fn row(&self, item: usize) -> Option<usize> {
        self.row_of.get(item).copied().flatten()
    }

    /// Row indices for `items`; pad maps to `None` (a zero row).
    pub fn rows(&self, items: &[usize]) -> Result<Vec<Option<usize>>, KernelError> {
        items
            .iter()
            .map(|&i| {
                if i == PAD {
                    Ok(None)
                } else {
                    self.row(i)
                        .map(Some)
                        .ok_or_else(|| KernelError::Config(format!("item {i} was not encoded")))
                }
            })
            .collect()
    }

    pub fn var(&self, m: Modality) -> Var {
        match m {
            Modality::Text => self.zt,
            Modality::Image => self.zv,
        }
    }

    pub fn gather<T: Real>(&self, tape: &mut Tape<T>, m: Modality, items: &[usize]) -> Result<Var, KernelError> {
        let idx = self.rows(items)?;
        tape.gather_rows(self.var(m), idx)
    }
}

fn row_index(items: &[usize], n_items: usize) -> Result<Vec<Option<usize>>, KernelError> {
    let mut row_of = vec![None; n_items + 1];
    for (u, &i) in items.iter().enumerate() {
        if i == PAD || i > n_items {
            return Err(KernelError::Config(format!("item index {i} outside 1..={n_items}")));
        }
        if row_of[i].replace(u).is_some() {
            return Err(KernelError::Config(format!("item {i} listed twice")));
        }
    }
    Ok(row_of)
}

/// Runs both modality encoders over `items` (distinct, non-pad).
pub fn encode_catalog<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bind: &Binding,
    params: &M2seParams<T>,
    features: &FeatureTable<T>,
    items: &[usize],
    training: bool,
    rng: &mut R,
) -> Result<ItemEncodings, KernelError> {
    let cfg = &params.config;
    if features.d != cfg.d || features.n_items() != cfg.n_items {
        return Err(KernelError::Config(format!(
            "feature table ({} items, d={}) does not match model ({} items, d={})",
            features.n_items(),
            features.d,
            cfg.n_items,
            cfg.d
        )));
    }
    let row_of = row_index(items, cfg.n_items)?;
    let text: Vec<&Tensor<T>> = items.iter().map(|&i| &features.text[i]).collect();
    let image: Vec<&Tensor<T>> = items.iter().map(|&i| &features.image[i]).collect();
    let zt = encode_items(tape, bind, &params.text, cfg, &text, training, rng)?.z;
    let zv = encode_items(tape, bind, &params.image, cfg, &image, training, rng)?.z;
    Ok(ItemEncodings { items: items.to_vec(), row_of, zt, zv })
}

/// Every item of the catalog, in index order.
pub fn all_items(n_items: usize) -> Vec<usize> {
    (1..=n_items).collect()
}

/// Tape handles of one batched forward pass.
#[derive(Debug, Clone)]
pub struct SequenceActivations {
    /// Input sequences after truncation and sequence dropout.
    pub prefixes: Vec<Vec<usize>>,
    /// Frame width: the longest prefix.
    pub width: usize,
    /// `[N·W]` right-aligned item indices, pad = 0.
    pub frame: Vec<usize>,
    pub items: ItemEncodings,
    /// `[N·W, d_0]` stacked encoder outputs.
    pub zt: Var,
    pub zv: Var,
    /// Swap decisions per frame slot.
    pub swap: Vec<bool>,
    pub p: f64,
    pub mt: Var,
    pub mv: Var,
    /// `[2·N·W, d_0]`: the text pass stacked over the image pass.
    pub hidden: Var,
    pub ht: Var,
    pub hv: Var,
}

impl SequenceActivations {
    pub fn n(&self) -> usize {
        self.prefixes.len()
    }

    pub fn non_pad(&self) -> Vec<bool> {
        self.frame.iter().map(|&i| i != PAD).collect()
    }
}

/// Right-aligns `prefixes` into an `N × W` frame.
pub fn frame_of(prefixes: &[Vec<usize>]) -> (usize, Vec<usize>) {
    let w = prefixes.iter().map(Vec::len).max().unwrap_or(0);
    let mut frame = vec![PAD; prefixes.len() * w];
    for (b, p) in prefixes.iter().enumerate() {
        frame[b * w + w - p.len()..(b + 1) * w].copy_from_slice(p);
    }
    (w, frame)
}

/// Sequence half of the forward pass, given item encodings that cover every
/// item of `prefixes` after dropout.
#[allow(clippy::too_many_arguments)]
pub fn sequence_forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bind: &Binding,
    params: &M2seParams<T>,
    items: ItemEncodings,
    prefixes: Vec<Vec<usize>>,
    stage: &ForwardStage,
    training: bool,
    rng: &mut R,
) -> Result<SequenceActivations, KernelError> {
    let cfg = &params.config;
    let n = prefixes.len();
    let (w, frame) = frame_of(&prefixes);
    let non_pad: Vec<bool> = frame.iter().map(|&i| i != PAD).collect();
    let zt = items.gather(tape, Modality::Text, &frame)?;
    let zv = items.gather(tape, Modality::Image, &frame)?;

    let (mt, mv, swap, p) = match stage {
        ForwardStage::Pretrain { mixup, .. } => {
            let mixed = complementary_mixup(tape, zt, zv, &non_pad, mixup, rng)?;
            (mixed.mt, mixed.mv, mixed.mask, mixed.p)
        }
        ForwardStage::Finetune { ids } => {
            let (mt, mv) = match ids {
                IdMode::Zero => (zt, zv),
                IdMode::Learned => {
                    let idx = frame.iter().map(|&i| (i != PAD).then_some(i)).collect();
                    let es = tape.gather_rows(bind.var(params.item_emb), idx)?;
                    (tape.add(zt, es)?, tape.add(zv, es)?)
                }
            };
            (mt, mv, vec![false; n * w], 0.0)
        }
    };

    let both = tape.concat_rows(&[mt, mv])?;
    let np2: Vec<bool> = non_pad.iter().chain(&non_pad).copied().collect();
    let TransformerOutput { hidden, last } =
        transformer_encode(tape, bind, &params.transformer, cfg, both, 2 * n, w, &np2, training, rng)?;
    let ht = tape.gather_rows(last, (0..n).map(Some).collect())?;
    let hv = tape.gather_rows(last, (n..2 * n).map(Some).collect())?;
    Ok(SequenceActivations { prefixes, width: w, frame, items, zt, zv, swap, p, mt, mv, hidden, ht, hv })
}

/// Truncates to the last `max_len` items and validates indices.
pub fn prepare_prefixes(prefixes: &[&[usize]], max_len: usize, n_items: usize) -> Result<Vec<Vec<usize>>, KernelError> {
    if prefixes.is_empty() {
        return Err(KernelError::Config("empty batch".into()));
    }
    prefixes
        .iter()
        .map(|p| {
            if p.is_empty() {
                return Err(KernelError::Config("empty input sequence".into()));
            }
            if let Some(&bad) = p.iter().find(|&&i| i == PAD || i > n_items) {
                return Err(KernelError::Config(format!("item index {bad} outside 1..={n_items}")));
            }
            Ok(p[p.len().saturating_sub(max_len)..].to_vec())
        })
        .collect()
}

/// Full forward pass for a batch of prefixes.
///
/// Pre-training encodes only the items that appear in the (dropped) prefixes
/// or in `extra`; fine-tuning encodes the whole catalog. Each distinct item is
/// encoded once, so repeated occurrences share one dropout draw.
#[allow(clippy::too_many_arguments)]
pub fn m2se_forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bind: &Binding,
    params: &M2seParams<T>,
    features: &FeatureTable<T>,
    prefixes: &[&[usize]],
    extra: &[usize],
    stage: &ForwardStage,
    training: bool,
    rng: &mut R,
) -> Result<SequenceActivations, KernelError> {
    stage.validate()?;
    let cfg = &params.config;
    let mut seqs = prepare_prefixes(prefixes, cfg.max_len, cfg.n_items)?;
    let items = match stage {
        ForwardStage::Pretrain { rho, .. } => {
            if *rho > 0.0 {
                seqs = seqs.iter().map(|s| sequence_dropout(s, *rho, rng)).collect();
            }
            let mut seen = vec![false; cfg.n_items + 1];
            let mut items = Vec::new();
            for &i in seqs.iter().flatten().chain(extra) {
                if i == PAD || i > cfg.n_items {
                    return Err(KernelError::Config(format!("item index {i} outside 1..={}", cfg.n_items)));
                }
                if !seen[i] {
                    seen[i] = true;
                    items.push(i);
                }
            }
            items
        }
        ForwardStage::Finetune { .. } => all_items(cfg.n_items),
    };
    let enc = encode_catalog(tape, bind, params, features, &items, training, rng)?;
    sequence_forward(tape, bind, params, enc, seqs, stage, training, rng)
}
