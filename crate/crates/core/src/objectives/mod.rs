//! Pre-training contrastive losses and the fine-tuning objective.

use serde::{Deserialize, Serialize};

use crate::m2se::{Binding, IdMode, M2seParams, Modality, SequenceActivations};
use crate::numkernel::{KernelError, Real, Tape, Tensor, Var};

/// Added to each norm in cosine similarity.
pub const SIM_EPS: f64 = 1e-12;

/// Cosine similarity with the norm guard.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt() + SIM_EPS;
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt() + SIM_EPS;
    dot / (na * nb)
}

/// `exp(sim(a, b) / τ)`.
pub fn f_value(a: &[f64], b: &[f64], tau: f64) -> f64 {
    (similarity(a, b) / tau).exp()
}

fn check_tau(tau: f64) -> Result<(), KernelError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(KernelError::Config(format!("temperature {tau} must be positive")))
    }
}

/// `[rows, rows]` cosine similarities divided by τ.
fn scaled_cosine<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, tau: f64) -> Result<Var, KernelError> {
    let an = tape.l2_normalize(a, SIM_EPS)?;
    let bn = tape.l2_normalize(b, SIM_EPS)?;
    let s = tape.matmul_nt(an, bn)?;
    tape.scale(s, T::of(1.0 / tau))
}

fn batch_size<T: Real>(tape: &Tape<T>, vars: &[Var]) -> Result<usize, KernelError> {
    let n = tape.shape(vars[0])[0];
    if n == 0 {
        return Err(KernelError::Config("empty batch".into()));
    }
    for &v in vars {
        if tape.shape(v) != tape.shape(vars[0]) {
            return Err(KernelError::Shape {
                op: "loss",
                detail: format!("{:?} vs {:?}", tape.shape(v), tape.shape(vars[0])),
            });
        }
    }
    Ok(n)
}

/// Next-item prediction loss in one modality space, summed over the batch.
///
/// Row `j` of `mhat`/`mtil` is scored against every target in `z`; the two
/// positive f-values share one numerator.
pub fn nip_loss<T: Real>(tape: &mut Tape<T>, mhat: Var, mtil: Var, z: Var, tau: f64) -> Result<Var, KernelError> {
    check_tau(tau)?;
    let n = batch_size(tape, &[mhat, mtil, z])?;
    let s1 = scaled_cosine(tape, mhat, z, tau)?;
    let s2 = scaled_cosine(tape, mtil, z, tau)?;
    let s = tape.concat_cols(&[s1, s2])?;
    let den = tape.logsumexp(s, None)?;
    let mut pos = vec![false; n * 2 * n];
    for j in 0..n {
        pos[j * 2 * n + j] = true;
        pos[j * 2 * n + n + j] = true;
    }
    let num = tape.logsumexp(s, Some(pos))?;
    let d = tape.sub(den, num)?;
    tape.sum(d)
}

/// `Σ_j ℓ(a_j, b_j)` with negatives `b_{j'}` for all `j'` and `a_{j'}` for `j' ≠ j`.
fn half_cmcl<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, n: usize, tau: f64) -> Result<Var, KernelError> {
    let cross = scaled_cosine(tape, a, b, tau)?;
    let same = scaled_cosine(tape, a, a, tau)?;
    let s = tape.concat_cols(&[cross, same])?;
    let mut mask = vec![true; n * 2 * n];
    for j in 0..n {
        mask[j * 2 * n + n + j] = false;
    }
    let den = tape.logsumexp(s, Some(mask))?;
    let pos = tape.pick(cross, (0..n).collect())?;
    let l = tape.sub(pos, den)?;
    tape.sum(l)
}

/// Symmetric cross-modality contrastive loss.
pub fn cmcl_loss<T: Real>(tape: &mut Tape<T>, mhat: Var, mtil: Var, tau: f64) -> Result<Var, KernelError> {
    check_tau(tau)?;
    let n = batch_size(tape, &[mhat, mtil])?;
    let l1 = half_cmcl(tape, mhat, mtil, n, tau)?;
    let l2 = half_cmcl(tape, mtil, mhat, n, tau)?;
    let s = tape.add(l1, l2)?;
    tape.scale(s, T::of(-0.5))
}

/// Sequence representations mapped into the two modality spaces.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionOutput {
    /// `h^t` in text space.
    pub mhat_t: Var,
    /// `h^v` in text space.
    pub mtil_t: Var,
    /// `h^v` in image space.
    pub mhat_v: Var,
    /// `h^t` in image space.
    pub mtil_v: Var,
}

pub fn project<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    params: &M2seParams<T>,
    ht: Var,
    hv: Var,
    no_proj: bool,
) -> Result<ProjectionOutput, KernelError> {
    if no_proj {
        return Ok(ProjectionOutput { mhat_t: ht, mtil_t: hv, mhat_v: hv, mtil_v: ht });
    }
    let p = &params.proj;
    let mut lin = |h: Var, w, b| -> Result<Var, KernelError> {
        let y = tape.matmul(h, bind.var(w))?;
        tape.add_row(y, bind.var(b))
    };
    Ok(ProjectionOutput {
        mhat_t: lin(ht, p.w_t, p.b_t)?,
        mtil_t: lin(hv, p.w_t, p.b_t)?,
        mhat_v: lin(hv, p.w_v, p.b_v)?,
        mtil_v: lin(ht, p.w_v, p.b_v)?,
    })
}

/// Loss switches of the pre-training ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PretrainFlags {
    pub no_nip: bool,
    pub no_cmcl: bool,
    pub no_proj: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainLossParts {
    pub nip_t: Var,
    pub nip_v: Var,
    pub cmcl_t: Var,
    pub cmcl_v: Var,
    pub total: Var,
}

/// Scalar values of [`PretrainLossParts`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub nip_t: f64,
    pub nip_v: f64,
    pub cmcl_t: f64,
    pub cmcl_v: f64,
    pub total: f64,
}

impl PretrainLossParts {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossValues {
        let v = |x: Var| tape.value(x).data()[0].as_f64();
        LossValues {
            nip_t: v(self.nip_t),
            nip_v: v(self.nip_v),
            cmcl_t: v(self.cmcl_t),
            cmcl_v: v(self.cmcl_v),
            total: v(self.total),
        }
    }
}

/// Combined pre-training loss for a batch whose `targets[j]` follows prefix `j`.
///
/// Target embeddings are read from the item encodings of the same forward pass.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    params: &M2seParams<T>,
    acts: &SequenceActivations,
    targets: &[usize],
    tau: f64,
    lambda: f64,
    flags: PretrainFlags,
) -> Result<PretrainLossParts, KernelError> {
    if flags.no_nip && flags.no_cmcl {
        return Err(KernelError::Config("removing both NIP and CMCL leaves no pre-training objective".into()));
    }
    check_tau(tau)?;
    if targets.len() != acts.n() {
        return Err(KernelError::Config(format!("{} targets for {} sequences", targets.len(), acts.n())));
    }
    if targets.contains(&crate::dataio::PAD) {
        return Err(KernelError::Config("padding item used as a target".into()));
    }
    let pr = project(tape, bind, params, acts.ht, acts.hv, flags.no_proj)?;
    let zero = |tape: &mut Tape<T>| tape.constant(Tensor::scalar(T::zero()));
    let (nip_t, nip_v) = if flags.no_nip {
        (zero(tape)?, zero(tape)?)
    } else {
        let zt = acts.items.gather(tape, Modality::Text, targets)?;
        let zv = acts.items.gather(tape, Modality::Image, targets)?;
        (nip_loss(tape, pr.mhat_t, pr.mtil_t, zt, tau)?, nip_loss(tape, pr.mhat_v, pr.mtil_v, zv, tau)?)
    };
    let (cmcl_t, cmcl_v) = if flags.no_cmcl {
        (zero(tape)?, zero(tape)?)
    } else {
        (cmcl_loss(tape, pr.mhat_t, pr.mtil_t, tau)?, cmcl_loss(tape, pr.mhat_v, pr.mtil_v, tau)?)
    };
    let nip = tape.add(nip_t, nip_v)?;
    let cmcl = tape.add(cmcl_t, cmcl_v)?;
    let cmcl = tape.scale(cmcl, T::of(lambda))?;
    let total = tape.add(nip, cmcl)?;
    Ok(PretrainLossParts { nip_t, nip_v, cmcl_t, cmcl_v, total })
}

/// `[N, |I|]` fine-tuning logits; column `c` scores item `c + 1`, so the
/// padding item never competes.
pub fn finetune_logits<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    params: &M2seParams<T>,
    acts: &SequenceActivations,
    ids: IdMode,
) -> Result<Var, KernelError> {
    let n_items = params.config.n_items;
    let all: Vec<usize> = (1..=n_items).collect();
    let (ft, fv) = if acts.items.items == all {
        (acts.items.zt, acts.items.zv)
    } else {
        (acts.items.gather(tape, Modality::Text, &all)?, acts.items.gather(tape, Modality::Image, &all)?)
    };
    let (gt, gv) = match ids {
        IdMode::Zero => (ft, fv),
        IdMode::Learned => {
            let e = tape.gather_rows(bind.var(params.item_emb), all.iter().map(|&i| Some(i)).collect())?;
            (tape.add(ft, e)?, tape.add(fv, e)?)
        }
    };
    score_logits(tape, acts.ht, acts.hv, gt, gv)
}

/// `h^t·Gᵗᵀ + h^v·Gᵛᵀ`.
pub fn score_logits<T: Real>(tape: &mut Tape<T>, ht: Var, hv: Var, gt: Var, gv: Var) -> Result<Var, KernelError> {
    let a = tape.matmul_nt(ht, gt)?;
    let b = tape.matmul_nt(hv, gv)?;
    tape.add(a, b)
}

/// Probabilities over real items for each row of `logits` (`[N, |I|]`).
pub fn score_probabilities<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
    logits.softmax(1)
}

/// Summed cross-entropy of item `targets` (1-based) under `logits`.
pub fn finetune_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var, KernelError> {
    let (rows, cols) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    if targets.len() != rows {
        return Err(KernelError::Config(format!("{} targets for {rows} rows", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t == crate::dataio::PAD || t > cols) {
        return Err(KernelError::Config(format!("target item {t} outside 1..={cols}")));
    }
    let lse = tape.logsumexp(logits, None)?;
    let pos = tape.pick(logits, targets.iter().map(|&t| t - 1).collect())?;
    let d = tape.sub(lse, pos)?;
    tape.sum(d)
}
