//! Planted-signal synthetic data.
//!
//! Items are split round-robin into latent clusters. Each user walks a
//! sequence: with probability `signal_strength` the next item is drawn
//! uniformly from the current item's cluster (excluding the current item),
//! otherwise uniformly from the whole catalog. Every item's text and image
//! rows are its cluster's modality centroid plus a fixed per-item offset
//! plus per-row jitter, so modality features predict continuation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, FeatureStore, Interaction, InteractionDataset, ItemFeatures};
use crate::numkernel::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub d: usize,
    pub signal_strength: f64,
    pub seed: u64,
    /// Defaults to `max(2, n_items / 5)`.
    pub n_clusters: Option<usize>,
    pub min_seq_len: usize,
    pub max_seq_len: usize,
    pub feature_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 50,
            d: 32,
            signal_strength: 0.9,
            seed: 0,
            n_clusters: None,
            min_seq_len: 5,
            max_seq_len: 15,
            feature_noise: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn clusters(&self) -> usize {
        self.n_clusters.unwrap_or((self.n_items / 5).max(2))
    }

    pub fn item_id(k: usize) -> String {
        format!("i{k:05}")
    }

    /// Cluster of a generated item id.
    pub fn cluster_of(&self, item_id: &str) -> Option<usize> {
        let k: usize = item_id.strip_prefix('i')?.parse().ok()?;
        (1..=self.n_items).contains(&k).then(|| (k - 1) % self.clusters())
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.n_users < 10 || self.n_items < 10 {
            return bad(format!("need n_users, n_items >= 10 (got {}, {})", self.n_users, self.n_items));
        }
        if self.d < 8 {
            return bad(format!("need d >= 8 (got {})", self.d));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return bad(format!("signal_strength {} outside [0, 1]", self.signal_strength));
        }
        let c = self.clusters();
        if c == 0 || c > self.n_items / 2 {
            return bad(format!("n_clusters {c} must leave at least 2 items per cluster"));
        }
        if self.min_seq_len < 3 || self.max_seq_len < self.min_seq_len {
            return bad(format!("sequence length range {}..={} invalid", self.min_seq_len, self.max_seq_len));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be finite and non-negative".into());
        }
        Ok(())
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<(InteractionDataset, FeatureStore), DataError> {
    cfg.validate()?;
    let c = cfg.clusters();
    let members: Vec<Vec<usize>> = (0..c).map(|k| (1..=cfg.n_items).filter(|i| (i - 1) % c == k).collect()).collect();
    let cluster = |i: usize| (i - 1) % c;

    let mut walk = rng::stream(cfg.seed, "synth/walk");
    let mut rows = Vec::new();
    for u in 0..cfg.n_users {
        let len = walk.random_range(cfg.min_seq_len..=cfg.max_seq_len);
        let mut cur = walk.random_range(1..=cfg.n_items);
        for t in 0..len {
            if t > 0 {
                cur = if walk.random::<f64>() < cfg.signal_strength {
                    let peers = &members[cluster(cur)];
                    let pick = walk.random_range(0..peers.len() - 1);
                    let own = peers.iter().position(|&p| p == cur).unwrap();
                    peers[if pick >= own { pick + 1 } else { pick }]
                } else {
                    walk.random_range(1..=cfg.n_items)
                };
            }
            rows.push(Interaction {
                user_id: format!("u{u:05}"),
                item_id: SynthConfig::item_id(cur),
                timestamp: (u * 1_000 + t) as i64,
            });
        }
    }
    let ds = InteractionDataset::from_interactions(&rows)?;

    let mut feat = rng::stream(cfg.seed, "synth/features");
    let unit = Normal::new(0.0, 1.0).unwrap();
    let offset = Normal::new(0.0, cfg.feature_noise.max(1e-12)).unwrap();
    let jitter = Normal::new(0.0, (cfg.feature_noise / 2.0).max(1e-12)).unwrap();
    let mut centroid = |_: usize| -> Vec<f64> { (0..cfg.d).map(|_| unit.sample(&mut feat)).collect() };
    let text_centroids: Vec<Vec<f64>> = (0..c).map(&mut centroid).collect();
    let image_centroids: Vec<Vec<f64>> = (0..c).map(&mut centroid).collect();

    let mut items = Vec::with_capacity(cfg.n_items);
    for i in 1..=cfg.n_items {
        let mut modality = |centroids: &[Vec<f64>]| -> (usize, Vec<f32>) {
            let base: Vec<f64> = centroids[cluster(i)].iter().map(|&v| v + offset.sample(&mut feat)).collect();
            let n = feat.random_range(1..=3);
            let data = (0..n)
                .flat_map(|_| base.iter().map(|&v| (v + jitter.sample(&mut feat)) as f32).collect::<Vec<_>>())
                .collect();
            (n, data)
        };
        let (n_text, text) = modality(&text_centroids);
        let (n_image, image) = modality(&image_centroids);
        items.push(ItemFeatures {
            id: SynthConfig::item_id(i),
            n_text,
            text,
            n_image,
            image,
        });
    }
    Ok((ds, FeatureStore { d: cfg.d, items }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn within_fraction(cfg: &SynthConfig) -> (f64, usize) {
        let (ds, _) = synth_generate(cfg).unwrap();
        let (mut within, mut total) = (0usize, 0usize);
        for s in &ds.sequences {
            for w in s.items.windows(2) {
                let a = cfg.cluster_of(&ds.item_ids[w[0]]).unwrap();
                let b = cfg.cluster_of(&ds.item_ids[w[1]]).unwrap();
                within += (a == b) as usize;
                total += 1;
            }
        }
        (within as f64 / total as f64, total)
    }

    #[test]
    fn full_signal_stays_in_cluster() {
        let cfg = SynthConfig { signal_strength: 1.0, seed: 4, ..Default::default() };
        assert_eq!(within_fraction(&cfg).0, 1.0);
    }

    #[test]
    fn planted_fraction_near_signal() {
        let cfg = SynthConfig { n_users: 200, signal_strength: 0.9, seed: 5, ..Default::default() };
        let (frac, total) = within_fraction(&cfg);
        assert!(total > 1000);
        assert!((frac - 0.9).abs() < 0.03, "{frac}");
    }

    #[test]
    fn no_signal_is_uniform() {
        let cfg = SynthConfig { n_users: 2000, n_items: 20, signal_strength: 0.0, seed: 6, ..Default::default() };
        let (ds, _) = synth_generate(&cfg).unwrap();
        let mut counts = vec![0f64; ds.n_items() + 1];
        let mut total = 0.0;
        for s in &ds.sequences {
            for &i in &s.items[1..] {
                counts[i] += 1.0;
                total += 1.0;
            }
        }
        let expected = total / 20.0;
        // chi-square with 19 dof; 99.9th percentile is about 43.8
        let chi2: f64 = counts[1..].iter().map(|&o| (o - expected).powi(2) / expected).sum();
        assert!(chi2 < 43.8, "{chi2}");
        let (frac, _) = within_fraction(&cfg);
        assert!((frac - 1.0 / cfg.clusters() as f64).abs() < 0.03, "{frac}");
    }

    #[test]
    fn deterministic_and_valid() {
        let cfg = SynthConfig { seed: 9, ..Default::default() };
        let (a, sa) = synth_generate(&cfg).unwrap();
        let (b, sb) = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        sa.validate().unwrap();
        assert_eq!(sa.items.len(), 50);
        sa.align::<f32>(&a).unwrap();
    }

    #[test]
    fn rejects_small_configs() {
        for cfg in [
            SynthConfig { n_users: 5, ..Default::default() },
            SynthConfig { d: 4, ..Default::default() },
            SynthConfig { signal_strength: 1.5, ..Default::default() },
        ] {
            assert!(matches!(synth_generate(&cfg), Err(DataError::Config(_))));
        }
    }
}
