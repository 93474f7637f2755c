use super::EvalError;

/// Cutoffs reported everywhere.
pub const KS: [usize; 3] = [5, 10, 20];

/// 1-based rank of column `target` under descending `logits`, ties broken by
/// ascending column index.
pub fn rank_of<T: PartialOrd>(logits: &[T], target: usize) -> usize {
    let t = &logits[target];
    1 + logits
        .iter()
        .enumerate()
        .filter(|&(i, x)| x > t || (x == t && i < target))
        .count()
}

/// Real items ordered by descending logit, ascending index on ties.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    /// Item indices (1-based).
    pub items: Vec<usize>,
}

impl RankedList {
    /// `logits[c]` scores item `c + 1`.
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut cols: Vec<usize> = (0..logits.len()).collect();
        cols.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        Self { items: cols.into_iter().map(|c| c + 1).collect() }
    }

    pub fn rank(&self, target: usize) -> Result<usize, EvalError> {
        self.items
            .iter()
            .position(|&i| i == target)
            .map(|p| p + 1)
            .ok_or_else(|| EvalError::Contract(format!("item {target} is not in the catalog")))
    }
}

pub fn recall_from_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_from_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

fn check_k(k: usize) -> Result<(), EvalError> {
    if k == 0 {
        Err(EvalError::Contract("K must be at least 1".into()))
    } else {
        Ok(())
    }
}

pub fn recall_at_k(ranked: &RankedList, target: usize, k: usize) -> Result<f64, EvalError> {
    check_k(k)?;
    Ok(recall_from_rank(ranked.rank(target)?, k))
}

pub fn ndcg_at_k(ranked: &RankedList, target: usize, k: usize) -> Result<f64, EvalError> {
    check_k(k)?;
    Ok(ndcg_from_rank(ranked.rank(target)?, k))
}
