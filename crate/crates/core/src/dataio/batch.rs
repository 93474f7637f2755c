use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SplitBundle, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// A `(prefix, next item)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    pub prefix: Vec<usize>,
    pub target: usize,
}

/// Emits every next-item prefix of each user's training sequence, keeping the
/// most recent `max_len` items of each prefix. Both stages use the same
/// instances.
pub fn build_instances(split: &SplitBundle, _stage: Stage, max_len: usize) -> Vec<TrainingInstance> {
    let mut out = Vec::new();
    for u in &split.users {
        for m in 1..u.train.len() {
            let start = m.saturating_sub(max_len);
            out.push(TrainingInstance {
                prefix: u.train[start..m].to_vec(),
                target: u.train[m],
            });
        }
    }
    out
}

/// Right-aligned, pad-0 batch of prefixes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingBatch {
    pub max_len: usize,
    /// `len × max_len` item indices, row-major.
    pub items: Vec<usize>,
    /// `true` where `items` holds padding.
    pub pad_mask: Vec<bool>,
    pub targets: Vec<usize>,
}

impl TrainingBatch {
    pub fn from_instances(instances: &[&TrainingInstance], max_len: usize) -> Self {
        let mut items = vec![PAD; instances.len() * max_len];
        for (r, inst) in instances.iter().enumerate() {
            let p = &inst.prefix[inst.prefix.len().saturating_sub(max_len)..];
            let row = &mut items[r * max_len..(r + 1) * max_len];
            row[max_len - p.len()..].copy_from_slice(p);
        }
        Self {
            max_len,
            pad_mask: items.iter().map(|&i| i == PAD).collect(),
            items,
            targets: instances.iter().map(|i| i.target).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.items[r * self.max_len..(r + 1) * self.max_len]
    }

    /// Non-pad part of row `r`, oldest first.
    pub fn prefix(&self, r: usize) -> &[usize] {
        let row = self.row(r);
        let start = row.iter().position(|&i| i != PAD).unwrap_or(row.len());
        &row[start..]
    }
}

/// Shuffles with `rng` and chunks into batches; the last partial batch is kept.
pub fn make_batches<R: Rng + ?Sized>(
    instances: &[TrainingInstance],
    batch_size: usize,
    max_len: usize,
    rng: &mut R,
) -> Vec<TrainingBatch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<&TrainingInstance> = instances.iter().collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| TrainingBatch::from_instances(chunk, max_len))
        .collect()
}
