use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numkernel::{KernelError, Real, Tape, Var};

/// Drops each item independently with probability `rho`, keeping order.
/// If everything is dropped the most recent item survives.
pub fn sequence_dropout<R: Rng + ?Sized>(prefix: &[usize], rho: f64, rng: &mut R) -> Vec<usize> {
    if rho <= 0.0 || prefix.len() <= 1 {
        return prefix.to_vec();
    }
    let kept: Vec<usize> = prefix.iter().copied().filter(|_| rng.random::<f64>() >= rho).collect();
    if kept.is_empty() {
        vec![*prefix.last().expect("non-empty")]
    } else {
        kept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub p_max: f64,
    pub active: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self { p_max: 0.5, active: true }
    }
}

impl MixupConfig {
    pub fn inactive() -> Self {
        Self { p_max: 0.5, active: false }
    }

    /// Draws `p ~ U[0, p_max]` (0 when inactive).
    pub fn sample_p<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if !self.active || self.p_max <= 0.0 {
            0.0
        } else {
            rng.random::<f64>() * self.p_max
        }
    }
}

/// Bernoulli(`p`) swap decisions for the non-pad positions.
pub fn sample_swap_mask<R: Rng + ?Sized>(non_pad: &[bool], p: f64, rng: &mut R) -> Vec<bool> {
    non_pad
        .iter()
        .map(|&real| if p <= 0.0 { false } else { real && rng.random::<f64>() < p })
        .collect()
}

/// Swaps rows of `zt` and `zv` where `mask` is set.
/// Returns `(M^t, M^v)`.
pub fn apply_swap<T: Real>(tape: &mut Tape<T>, zt: Var, zv: Var, mask: &[bool]) -> Result<(Var, Var), KernelError> {
    if !mask.iter().any(|&m| m) {
        return Ok((zt, zv));
    }
    let mt = tape.select_rows(mask.to_vec(), zv, zt)?;
    let mv = tape.select_rows(mask.to_vec(), zt, zv)?;
    Ok((mt, mv))
}

/// Outcome of [`complementary_mixup`].
#[derive(Debug, Clone)]
pub struct Mixed {
    pub mt: Var,
    pub mv: Var,
    pub mask: Vec<bool>,
    pub p: f64,
}

/// Samples `p` and a swap mask over non-pad rows, then swaps.
pub fn complementary_mixup<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    zt: Var,
    zv: Var,
    non_pad: &[bool],
    config: &MixupConfig,
    rng: &mut R,
) -> Result<Mixed, KernelError> {
    let p = config.sample_p(rng);
    let mask = sample_swap_mask(non_pad, p, rng);
    let (mt, mv) = apply_swap(tape, zt, zv, &mask)?;
    Ok(Mixed { mt, mv, mask, p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::m2se::testutil::rand_tensor;
    use crate::numkernel::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn zero_rate_and_single_item_are_identity() {
        let mut rng = seeded(1);
        assert_eq!(sequence_dropout(&[3, 1, 4, 1, 5], 0.0, &mut rng), vec![3, 1, 4, 1, 5]);
        assert_eq!(sequence_dropout(&[9], 0.99, &mut rng), vec![9]);
    }

    #[test]
    fn retains_most_recent_when_everything_drops() {
        let mut rng = seeded(2);
        for _ in 0..200 {
            assert_eq!(sequence_dropout(&[1, 2, 3], 0.9999, &mut rng), vec![3]);
        }
    }

    #[test]
    fn drop_rate_matches() {
        let mut rng = seeded(3);
        let seq: Vec<usize> = (1..=10).collect();
        let trials = 100_000;
        let mut kept = 0usize;
        for _ in 0..trials {
            kept += sequence_dropout(&seq, 0.2, &mut rng).len();
        }
        let rate = 1.0 - kept as f64 / (trials * 10) as f64;
        // the retention floor adds 0.2^10 ≈ 1e-7 per sequence
        assert!((rate - 0.2).abs() < 0.01, "{rate}");
    }

    proptest! {
        #[test]
        fn dropout_keeps_a_subsequence(seq in prop::collection::vec(1usize..50, 1..20), rho in 0.0f64..0.95, seed in any::<u64>()) {
            let out = sequence_dropout(&seq, rho, &mut seeded(seed));
            prop_assert!(!out.is_empty());
            let mut it = seq.iter();
            for x in &out {
                prop_assert!(it.any(|y| y == x));
            }
        }

        #[test]
        fn mixup_is_complementary(n in 1usize..12, seed in any::<u64>()) {
            let zt = rand_tensor(&[n, 4], seed);
            let zv = rand_tensor(&[n, 4], seed ^ 0xff);
            let non_pad: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
            let mut tape = Tape::<f64>::new();
            let (a, b) = (tape.constant(zt.clone()).unwrap(), tape.constant(zv.clone()).unwrap());
            let mix = complementary_mixup(&mut tape, a, b, &non_pad, &MixupConfig::default(), &mut seeded(seed)).unwrap();
            prop_assert!((0.0..=0.5).contains(&mix.p));
            let (mt, mv) = (tape.value(mix.mt), tape.value(mix.mv));
            for j in 0..n {
                prop_assert!(!mix.mask[j] || non_pad[j]);
                if mix.mask[j] {
                    prop_assert_eq!(mt.row(j), zv.row(j));
                    prop_assert_eq!(mv.row(j), zt.row(j));
                } else {
                    prop_assert_eq!(mt.row(j), zt.row(j));
                    prop_assert_eq!(mv.row(j), zv.row(j));
                }
            }
        }
    }

    #[test]
    fn forced_zero_and_full_swap() {
        let zt = rand_tensor(&[4, 3], 1);
        let zv = rand_tensor(&[4, 3], 2);
        let mut tape = Tape::<f64>::new();
        let (a, b) = (tape.constant(zt.clone()).unwrap(), tape.constant(zv.clone()).unwrap());
        let mask = sample_swap_mask(&[true; 4], 0.0, &mut seeded(0));
        let (mt, mv) = apply_swap(&mut tape, a, b, &mask).unwrap();
        assert!(tape.value(mt).bit_eq(&zt) && tape.value(mv).bit_eq(&zv));
        let (mt, mv) = apply_swap(&mut tape, a, b, &[true; 4]).unwrap();
        assert!(tape.value(mt).bit_eq(&zv) && tape.value(mv).bit_eq(&zt));
    }

    #[test]
    fn inactive_config_is_identity() {
        let zt = rand_tensor(&[3, 3], 1);
        let zv = rand_tensor(&[3, 3], 2);
        let mut tape = Tape::<f64>::new();
        let (a, b) = (tape.constant(zt).unwrap(), tape.constant(zv).unwrap());
        let mix = complementary_mixup(&mut tape, a, b, &[true; 3], &MixupConfig::inactive(), &mut seeded(5)).unwrap();
        assert_eq!(mix.p, 0.0);
        assert_eq!(mix.mask, vec![false; 3]);
        assert_eq!((mix.mt, mix.mv), (a, b));
    }
}
