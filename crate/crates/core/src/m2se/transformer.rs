use rand::Rng;

use super::encoder::LN_EPS;
use super::params::{Binding, ModelConfig, TransformerParams};
use crate::numkernel::{KernelError, Real, Tape, Var};

/// Output of [`transformer_encode`].
#[derive(Debug, Clone, Copy)]
pub struct TransformerOutput {
    /// `[N·W, d_0]` final hidden states.
    pub hidden: Var,
    /// `[N, d_0]` rows at the last position.
    pub last: Var,
}

/// Causal, pad-aware attention mask for `n` sequences of width `w`, laid out `[n, w, w]`.
pub fn attention_mask(non_pad: &[bool], n: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; n * w * w];
    for b in 0..n {
        for i in 0..w {
            for j in 0..=i {
                mask[(b * w + i) * w + j] = non_pad[b * w + j];
            }
        }
    }
    mask
}

/// Runs `n` right-aligned sequences of width `w ≤ max_len` through the
/// pre-norm Transformer.
///
/// The `w` columns occupy the last `w` slots of the positional table, so a
/// trimmed frame yields the same rows as the full `max_len` frame.
#[allow(clippy::too_many_arguments)]
pub fn transformer_encode<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bind: &Binding,
    tp: &TransformerParams,
    cfg: &ModelConfig,
    m: Var,
    n: usize,
    w: usize,
    non_pad: &[bool],
    training: bool,
    rng: &mut R,
) -> Result<TransformerOutput, KernelError> {
    let d0 = cfg.d_0;
    if w == 0 || w > cfg.max_len {
        return Err(KernelError::Config(format!("frame width {w} outside 1..={}", cfg.max_len)));
    }
    if tape.shape(m) != [n * w, d0] || non_pad.len() != n * w {
        return Err(KernelError::Shape {
            op: "transformer_encode",
            detail: format!("input {:?}, mask {} for {n}x{w}x{d0}", tape.shape(m), non_pad.len()),
        });
    }
    let heads = cfg.n_heads;
    let dh = d0 / heads;
    let offset = cfg.max_len - w;
    let pos_idx = (0..n).flat_map(|_| (0..w).map(|j| Some(offset + j))).collect();
    let pos = tape.gather_rows(bind.var(tp.pos), pos_idx)?;
    let x = tape.add(m, pos)?;
    let mut x = tape.dropout(x, cfg.dropout, training, rng)?;
    let mask = attention_mask(non_pad, n, w);
    let scale = T::of(1.0 / (dh as f64).sqrt());

    for layer in &tp.layers {
        let a = tape.layer_norm(x, bind.var(layer.ln1_g), bind.var(layer.ln1_b), LN_EPS)?;
        let proj = |tape: &mut Tape<T>, wt, bt| -> Result<Var, KernelError> {
            let y = tape.matmul(a, bind.var(wt))?;
            tape.add_row(y, bind.var(bt))
        };
        let q = proj(tape, layer.wq, layer.bq)?;
        let k = proj(tape, layer.wk, layer.bk)?;
        let v = proj(tape, layer.wv, layer.bv)?;
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let split = |tape: &mut Tape<T>, t: Var| -> Result<Var, KernelError> {
                let s = tape.slice_cols(t, h * dh, dh)?;
                tape.reshape(s, &[n, w, dh])
            };
            let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
            let s = tape.bmm(qh, kh, true)?;
            let s = tape.scale(s, scale)?;
            let p = tape.masked_softmax(s, Some(mask.clone()))?;
            let c = tape.bmm(p, vh, false)?;
            ctx.push(tape.reshape(c, &[n * w, dh])?);
        }
        let c = if heads == 1 { ctx[0] } else { tape.concat_cols(&ctx)? };
        let o = tape.matmul(c, bind.var(layer.wo))?;
        let o = tape.add_row(o, bind.var(layer.bo))?;
        let o = tape.dropout(o, cfg.dropout, training, rng)?;
        x = tape.add(x, o)?;

        let f = tape.layer_norm(x, bind.var(layer.ln2_g), bind.var(layer.ln2_b), LN_EPS)?;
        let f = tape.matmul(f, bind.var(layer.ff1_w))?;
        let f = tape.add_row(f, bind.var(layer.ff1_b))?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, bind.var(layer.ff2_w))?;
        let f = tape.add_row(f, bind.var(layer.ff2_b))?;
        let f = tape.dropout(f, cfg.dropout, training, rng)?;
        x = tape.add(x, f)?;
    }
    let hidden = tape.layer_norm(x, bind.var(tp.lnf_g), bind.var(tp.lnf_b), LN_EPS)?;
    let last = tape.gather_rows(hidden, (0..n).map(|b| Some(b * w + w - 1)).collect())?;
    Ok(TransformerOutput { hidden, last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::m2se::params::ParamKind;
    use crate::m2se::testutil::{rand_tensor, small_params};
    use crate::m2se::M2seParams;
    use crate::numkernel::rng::seeded;
    use crate::numkernel::Tensor;

    fn run(p: &M2seParams<f64>, m: &Tensor<f64>, n: usize, w: usize, non_pad: &[bool]) -> (Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        let bind = p.store.bind(&mut tape, false).unwrap();
        let mv = tape.constant(m.clone()).unwrap();
        let out = transformer_encode(&mut tape, &bind, &p.transformer, &p.config, mv, n, w, non_pad, false, &mut seeded(0)).unwrap();
        (tape.value(out.hidden).clone(), tape.value(out.last).clone())
    }

    fn direct_layer_norm(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()).collect()
    }

    #[test]
    fn mask_layout() {
        let m = attention_mask(&[false, true, true], 1, 3);
        assert_eq!(m, vec![false, false, false, false, true, false, false, true, true]);
    }

    #[test]
    fn padded_positions_never_leak() {
        let p = small_params(11);
        let (n, w) = (2, 5);
        let non_pad = [false, false, true, true, true, false, false, false, false, true];
        let m = rand_tensor(&[n * w, 8], 3);
        let (_, h1) = run(&p, &m, n, w, &non_pad);
        let mut m2 = m.clone();
        for (r, &real) in non_pad.iter().enumerate() {
            if !real {
                m2.row_mut(r).iter_mut().enumerate().for_each(|(j, v)| *v = 1e3 * (j as f64 - 2.5));
            }
        }
        let (_, h2) = run(&p, &m2, n, w, &non_pad);
        assert!(h1.bit_eq(&h2));
    }

    #[test]
    fn later_positions_never_leak_backwards() {
        let p = small_params(12);
        let m = rand_tensor(&[4, 8], 5);
        let (a, _) = run(&p, &m, 1, 4, &[true; 4]);
        let mut m2 = m.clone();
        m2.row_mut(3).iter_mut().for_each(|v| *v += 1.0);
        let (b, _) = run(&p, &m2, 1, 4, &[true; 4]);
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn trimmed_frame_matches_full_frame() {
        let p = small_params(13);
        let full_w = p.config.max_len;
        let m_short = rand_tensor(&[2, 8], 8);
        let mut m_full = Tensor::zeros(&[full_w, 8]);
        for r in 0..2 {
            m_full.row_mut(full_w - 2 + r).copy_from_slice(m_short.row(r));
        }
        let mut np_full = vec![false; full_w];
        np_full[full_w - 2..].iter_mut().for_each(|b| *b = true);
        let (_, h_short) = run(&p, &m_short, 1, 2, &[true, true]);
        let (_, h_full) = run(&p, &m_full, 1, full_w, &np_full);
        assert!(h_short.max_abs_diff(&h_full) < 1e-12);
    }

    #[test]
    fn residual_path_with_zeroed_blocks() {
        let mut p = small_params(14);
        let ids: Vec<_> = p
            .store
            .iter()
            .filter(|(_, q)| q.name.starts_with("tf.layer") && matches!(q.kind, ParamKind::Weight | ParamKind::Bias))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            p.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let m = rand_tensor(&[3, 8], 9);
        let (_, h) = run(&p, &m, 1, 3, &[false, true, true]);
        let pos = &p.store.get(p.transformer.pos).value;
        let last: Vec<f64> = m.row(2).iter().zip(pos.row(p.config.max_len - 1)).map(|(a, b)| a + b).collect();
        let expect = direct_layer_norm(&last);
        for (a, b) in h.row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lone_item_depends_only_on_itself() {
        let p = small_params(15);
        let mut m = rand_tensor(&[4, 8], 1);
        let (_, h1) = run(&p, &m, 1, 4, &[false, false, false, true]);
        for r in 0..3 {
            m.row_mut(r).iter_mut().for_each(|v| *v = -*v * 7.0);
        }
        let (_, h2) = run(&p, &m, 1, 4, &[false, false, false, true]);
        assert!(h1.bit_eq(&h2));
        let single = Tensor::from_rows(&[m.row(3).to_vec()]).unwrap();
        let (_, h3) = run(&p, &single, 1, 1, &[true]);
        assert!(h1.max_abs_diff(&h3) < 1e-12);
    }
}
