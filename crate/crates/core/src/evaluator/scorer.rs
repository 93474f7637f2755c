use crate::dataio::FeatureTable;
use crate::m2se::{all_items, encode_catalog, sequence_forward, ForwardStage, IdMode, ItemEncodings, M2seParams};
use crate::numkernel::rng::seeded;
use crate::numkernel::{KernelError, Real, Tape, Tensor};

/// Anything that scores the whole catalog for a batch of input sequences.
pub trait Scorer {
    fn n_items(&self) -> usize;

    /// `[N, n_items]` logits; column `c` scores item `c + 1`.
    fn score(&self, prefixes: &[&[usize]], ids: IdMode) -> Result<Tensor<f64>, KernelError>;
}

/// Frozen model with the item tables precomputed once.
pub struct M2seScorer<'a, T: Real> {
    params: &'a M2seParams<T>,
    ft: Tensor<T>,
    fv: Tensor<T>,
    /// `(F^t + E)ᵀ`, `(F^v + E)ᵀ`.
    learned_t: Tensor<T>,
    learned_v: Tensor<T>,
    zero_t: Tensor<T>,
    zero_v: Tensor<T>,
}

impl<'a, T: Real> M2seScorer<'a, T> {
    pub fn new(params: &'a M2seParams<T>, features: &FeatureTable<T>) -> Result<Self, KernelError> {
        let (ft, fv) = item_tables(params, features)?;
        let n = params.config.n_items;
        let emb = &params.store.get(params.item_emb).value;
        let e = Tensor::new(vec![n, params.config.d_0], emb.data()[params.config.d_0..].to_vec())?;
        let plus = |f: &Tensor<T>| {
            let mut g = f.clone();
            g.add_assign(&e);
            g.transpose()
        };
        Ok(Self {
            learned_t: plus(&ft)?,
            learned_v: plus(&fv)?,
            zero_t: ft.transpose()?,
            zero_v: fv.transpose()?,
            params,
            ft,
            fv,
        })
    }
}

/// Eval-mode `F^t`, `F^v` for every item, `[n_items, d_0]`.
pub fn item_tables<T: Real>(params: &M2seParams<T>, features: &FeatureTable<T>) -> Result<(Tensor<T>, Tensor<T>), KernelError> {
    let mut tape = Tape::new();
    let bind = params.store.bind(&mut tape, false)?;
    let items = all_items(params.config.n_items);
    let enc = encode_catalog(&mut tape, &bind, params, features, &items, false, &mut seeded(0))?;
    Ok((tape.value(enc.zt).clone(), tape.value(enc.zv).clone()))
}

impl<T: Real> Scorer for M2seScorer<'_, T> {
    fn n_items(&self) -> usize {
        self.params.config.n_items
    }

    fn score(&self, prefixes: &[&[usize]], ids: IdMode) -> Result<Tensor<f64>, KernelError> {
        let cfg = &self.params.config;
        let seqs = crate::m2se::prepare_prefixes(prefixes, cfg.max_len, cfg.n_items)?;
        let mut tape = Tape::new();
        let bind = self.params.store.bind(&mut tape, false)?;
        let enc = ItemEncodings::constant(&mut tape, all_items(cfg.n_items), cfg.n_items, self.ft.clone(), self.fv.clone())?;
        let stage = ForwardStage::Finetune { ids };
        let acts = sequence_forward(&mut tape, &bind, self.params, enc, seqs, &stage, false, &mut seeded(0))?;
        let (gt, gv) = match ids {
            IdMode::Learned => (&self.learned_t, &self.learned_v),
            IdMode::Zero => (&self.zero_t, &self.zero_v),
        };
        let mut logits = tape.value(acts.ht).matmul(gt)?;
        logits.add_assign(&tape.value(acts.hv).matmul(gv)?);
        Ok(logits.cast())
    }
}
