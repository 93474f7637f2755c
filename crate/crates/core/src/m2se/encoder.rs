use rand::Rng;

use super::params::{Binding, ModalityEncoderParams, ModelConfig};
use crate::numkernel::{KernelError, Real, Tape, Tensor, Var};

/// Epsilon inside every layer norm of the model.
pub const LN_EPS: f64 = 1e-12;

/// Tape handles produced while encoding a set of items with one modality.
#[derive(Debug, Clone)]
pub struct EncodedItems {
    /// `[U, d]` pooled embeddings.
    pub pooled: Var,
    /// `[U, R]` attention weights, zero past each item's row count.
    pub alpha: Var,
    /// `[U, O]` gate weights.
    pub gate: Var,
    /// One `[U, d_0]` output per expert.
    pub experts: Vec<Var>,
    /// `[U, d_0]` fused outputs.
    pub z: Var,
}

/// Value snapshot of one item's encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderActivations<T> {
    pub alpha: Vec<T>,
    pub e: Vec<T>,
    pub g: Vec<T>,
    /// `O × d_0`.
    pub experts: Tensor<T>,
    pub z: Vec<T>,
}

/// Pools a ragged batch of feature matrices.
///
/// `items[u]` is a `rows_u × d` matrix with `rows_u ≥ 1`. Returns `(e [U,d], α [U,R])`
/// where `R` is the largest row count.
pub fn attention_pool<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    enc: &ModalityEncoderParams,
    items: &[&Tensor<T>],
) -> Result<(Var, Var), KernelError> {
    let u = items.len();
    if u == 0 {
        return Err(KernelError::Config("attention_pool over no items".into()));
    }
    let d = items[0].cols();
    let r = items.iter().map(|x| x.rows()).max().unwrap_or(0);
    let mut data = vec![T::zero(); u * r * d];
    let mut mask = vec![false; u * r];
    for (i, x) in items.iter().enumerate() {
        if x.rows() == 0 || x.cols() != d || x.shape().len() != 2 {
            return Err(KernelError::Shape {
                op: "attention_pool",
                detail: format!("item {i} has shape {:?}, expected [≥1, {d}]", x.shape()),
            });
        }
        data[i * r * d..i * r * d + x.numel()].copy_from_slice(x.data());
        mask[i * r..i * r + x.rows()].iter_mut().for_each(|m| *m = true);
    }
    let x = tape.constant(Tensor::new(vec![u * r, d], data)?)?;
    let h = tape.matmul(x, bind.var(enc.w1))?;
    let h = tape.add_row(h, bind.var(enc.b1))?;
    let s = tape.matmul(h, bind.var(enc.w2))?;
    let s = tape.add_row(s, bind.var(enc.b2))?;
    let s = tape.reshape(s, &[u, r])?;
    let alpha = tape.masked_softmax(s, Some(mask))?;
    let a3 = tape.reshape(alpha, &[u, 1, r])?;
    let x3 = tape.reshape(x, &[u, r, d])?;
    let e = tape.bmm(a3, x3, false)?;
    let e = tape.reshape(e, &[u, d])?;
    Ok((e, alpha))
}

/// Dense mixture of experts over pooled embeddings `e [U, d]`.
/// Returns `(z, g, expert outputs)`.
pub fn moe_forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bind: &Binding,
    enc: &ModalityEncoderParams,
    cfg: &ModelConfig,
    e: Var,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Var, Vec<Var>), KernelError> {
    if enc.experts.is_empty() {
        return Err(KernelError::Config("mixture needs at least one expert".into()));
    }
    let g = tape.matmul(e, bind.var(enc.gate_w))?;
    let g = tape.add_row(g, bind.var(enc.gate_b))?;
    let g = tape.softmax(g)?;
    let mut outs = Vec::with_capacity(enc.experts.len());
    let mut z = None;
    for (k, ex) in enc.experts.iter().enumerate() {
        let h = tape.matmul(e, bind.var(ex.w))?;
        let h = tape.add_row(h, bind.var(ex.b))?;
        let h = tape.dropout(h, cfg.dropout, training, rng)?;
        let h = tape.layer_norm(h, bind.var(ex.ln_g), bind.var(ex.ln_b), LN_EPS)?;
        outs.push(h);
        let gk = tape.slice_cols(g, k, 1)?;
        let term = tape.mul_col(h, gk)?;
        z = Some(match z {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok((z.expect("at least one expert"), g, outs))
}

/// Attention pooling followed by the mixture, for a batch of items.
pub fn encode_items<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bind: &Binding,
    enc: &ModalityEncoderParams,
    cfg: &ModelConfig,
    items: &[&Tensor<T>],
    training: bool,
    rng: &mut R,
) -> Result<EncodedItems, KernelError> {
    let (pooled, alpha) = attention_pool(tape, bind, enc, items)?;
    let (z, gate, experts) = moe_forward(tape, bind, enc, cfg, pooled, training, rng)?;
    Ok(EncodedItems { pooled, alpha, gate, experts, z })
}

impl EncodedItems {
    /// Reads back the activations of item `u` (with `rows` feature rows).
    pub fn activations<T: Real>(&self, tape: &Tape<T>, u: usize, rows: usize) -> EncoderActivations<T> {
        EncoderActivations {
            alpha: tape.value(self.alpha).row(u)[..rows].to_vec(),
            e: tape.value(self.pooled).row(u).to_vec(),
            g: tape.value(self.gate).row(u).to_vec(),
            experts: Tensor::from_rows(
                &self.experts.iter().map(|&v| tape.value(v).row(u).to_vec()).collect::<Vec<_>>(),
            )
            .expect("equal widths"),
            z: tape.value(self.z).row(u).to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::m2se::params::{ModelConfig, ParamStore};
    use crate::m2se::testutil::{rand_tensor, small_params};
    use crate::numkernel::rng::seeded;

    fn eval_encode(
        p: &crate::m2se::M2seParams<f64>,
        items: &[&Tensor<f64>],
    ) -> (Tape<f64>, EncodedItems) {
        let mut tape = Tape::new();
        let bind = p.store.bind(&mut tape, false).unwrap();
        let out = encode_items(&mut tape, &bind, &p.text, &p.config, items, false, &mut seeded(0)).unwrap();
        (tape, out)
    }

    #[test]
    fn single_row_pools_to_itself() {
        let p = small_params(5);
        let x = rand_tensor(&[1, 6], 1);
        let (tape, out) = eval_encode(&p, &[&x]);
        let a = out.activations(&tape, 0, 1);
        assert_eq!(a.alpha, vec![1.0]);
        assert_eq!(a.e, x.data());
    }

    #[test]
    fn identical_rows_split_evenly() {
        let p = small_params(5);
        let row = rand_tensor(&[1, 6], 2);
        let x = Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec()]).unwrap();
        let (tape, out) = eval_encode(&p, &[&x]);
        let a = out.activations(&tape, 0, 2);
        assert!((a.alpha[0] - 0.5).abs() < 1e-15 && (a.alpha[1] - 0.5).abs() < 1e-15);
        for (u, v) in a.e.iter().zip(row.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    fn direct_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let s = (var + LN_EPS).sqrt();
        x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) / s * g + b).collect()
    }

    fn affine(x: &[f64], w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
        let (rows, cols) = (w.rows(), w.cols());
        (0..cols).map(|j| b[j] + (0..rows).map(|i| x[i] * w.data()[i * cols + j]).sum::<f64>()).collect()
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = ex.iter().sum();
        ex.iter().map(|x| x / s).collect()
    }

    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let shape = store.get(id).value.shape().to_vec();
            *store.value_mut(id) = rand_tensor(&shape, seed + k as u64);
        }
    }

    #[test]
    fn matches_direct_evaluation() {
        for n_experts in [1usize, 8] {
            let mut p = crate::m2se::M2seParams::<f64>::init(
                ModelConfig { n_experts, ..crate::m2se::testutil::small_config() },
                &mut seeded(9),
            )
            .unwrap();
            randomize(&mut p.store, 100);
            let x = rand_tensor(&[3, 6], 7);
            let (tape, out) = eval_encode(&p, &[&x]);
            let a = out.activations(&tape, 0, 3);

            let v = |id| p.store.get(id).value.clone();
            let enc = &p.text;
            let scores: Vec<f64> = (0..3)
                .map(|r| {
                    let h = affine(x.row(r), &v(enc.w1), v(enc.b1).data());
                    affine(&h, &v(enc.w2), v(enc.b2).data())[0]
                })
                .collect();
            let alpha = softmax(&scores);
            let e: Vec<f64> = (0..6).map(|j| (0..3).map(|r| alpha[r] * x.row(r)[j]).sum()).collect();
            let g = softmax(&affine(&e, &v(enc.gate_w), v(enc.gate_b).data()));
            let mut z = vec![0.0; 8];
            for (k, ex) in enc.experts.iter().enumerate() {
                let h = affine(&e, &v(ex.w), v(ex.b).data());
                let out = direct_layer_norm(&h, v(ex.ln_g).data(), v(ex.ln_b).data());
                for (zj, oj) in z.iter_mut().zip(&out) {
                    *zj += g[k] * oj;
                }
            }
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10);
            assert!(close(&a.alpha, &alpha));
            assert!(close(&a.e, &e));
            assert!(close(&a.g, &g));
            assert!(close(&a.z, &z), "O={n_experts}");
            assert!((a.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((a.g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_expert_is_its_output() {
        let mut p = crate::m2se::M2seParams::<f64>::init(
            ModelConfig { n_experts: 1, ..crate::m2se::testutil::small_config() },
            &mut seeded(2),
        )
        .unwrap();
        randomize(&mut p.store, 40);
        let x = rand_tensor(&[2, 6], 3);
        let (tape, out) = eval_encode(&p, &[&x]);
        let a = out.activations(&tape, 0, 2);
        assert_eq!(a.g, vec![1.0]);
        assert_eq!(a.z, a.experts.row(0));
    }

    #[test]
    fn equal_experts_ignore_the_gate() {
        let mut p = small_params(3);
        randomize(&mut p.store, 70);
        let (e0, e1) = (p.text.experts[0].clone(), p.text.experts[1].clone());
        for (a, b) in [(e0.w, e1.w), (e0.b, e1.b), (e0.ln_g, e1.ln_g), (e0.ln_b, e1.ln_b)] {
            let v = p.store.get(a).value.clone();
            *p.store.value_mut(b) = v;
        }
        let x = rand_tensor(&[2, 6], 4);
        let (tape, out) = eval_encode(&p, &[&x]);
        let a = out.activations(&tape, 0, 2);
        for (z, e) in a.z.iter().zip(a.experts.row(0)) {
            assert!((z - e).abs() < 1e-12);
        }
    }

    #[test]
    fn items_do_not_interact() {
        let p = small_params(4);
        let xs: Vec<Tensor<f64>> = (0..3).map(|k| rand_tensor(&[k + 1, 6], 10 + k as u64)).collect();
        let (t1, o1) = eval_encode(&p, &xs.iter().collect::<Vec<_>>());
        let mut ys = xs.clone();
        ys[1] = rand_tensor(&[4, 6], 99);
        let (t2, o2) = eval_encode(&p, &ys.iter().collect::<Vec<_>>());
        let z1 = t1.value(o1.z);
        let z2 = t2.value(o2.z);
        assert_eq!(z1.row(0), z2.row(0));
        assert_eq!(z1.row(2), z2.row(2));
        assert_ne!(z1.row(1), z2.row(1));
        let alone = eval_encode(&p, &[&xs[2]]);
        assert_eq!(alone.0.value(alone.1.z).row(0), z1.row(2));
    }

    #[test]
    fn rejects_width_mismatch() {
        let p = small_params(4);
        let a = rand_tensor(&[1, 6], 1);
        let b = rand_tensor(&[1, 5], 1);
        let mut tape = Tape::new();
        let bind = p.store.bind(&mut tape, false).unwrap();
        assert!(attention_pool(&mut tape, &bind, &p.text, &[&a, &b]).is_err());
    }
}
