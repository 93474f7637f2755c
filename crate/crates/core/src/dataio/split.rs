use std::collections::BTreeSet;

use log::warn;

use super::InteractionDataset;

/// Items with fewer than this many training interactions are cold.
pub const COLD_THRESHOLD: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    /// Index into the source dataset's users.
    pub user: usize,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl UserSplit {
    /// Input sequence used to predict the validation item.
    pub fn valid_input(&self) -> &[usize] {
        &self.train
    }

    /// Input sequence used to predict the test item.
    pub fn test_input(&self) -> Vec<usize> {
        let mut s = self.train.clone();
        s.push(self.valid);
        s
    }
}

/// Leave-one-out split: last item tests, second-last validates, the rest trains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitBundle {
    pub users: Vec<UserSplit>,
    pub n_items: usize,
    /// Users skipped for having fewer than three interactions.
    pub excluded: usize,
}

pub fn leave_one_out_split(ds: &InteractionDataset) -> SplitBundle {
    let mut users = Vec::with_capacity(ds.n_users());
    let mut excluded = 0;
    for (u, s) in ds.sequences.iter().enumerate() {
        let n = s.items.len();
        if n < 3 {
            excluded += 1;
            continue;
        }
        users.push(UserSplit {
            user: u,
            train: s.items[..n - 2].to_vec(),
            valid: s.items[n - 2],
            test: s.items[n - 1],
        });
    }
    if excluded > 0 {
        warn!("{excluded} users with fewer than 3 interactions excluded from the split");
    }
    SplitBundle {
        users,
        n_items: ds.n_items(),
        excluded,
    }
}

impl SplitBundle {
    pub fn train_item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_items + 1];
        for u in &self.users {
            for &i in &u.train {
                counts[i] += 1;
            }
        }
        counts
    }

    /// Copy whose training sequences keep only items in `keep`. Validation and
    /// test targets are untouched.
    pub fn restrict_train(&self, keep: &BTreeSet<usize>) -> SplitBundle {
        SplitBundle {
            users: self
                .users
                .iter()
                .map(|u| UserSplit {
                    train: u.train.iter().copied().filter(|i| keep.contains(i)).collect(),
                    ..u.clone()
                })
                .collect(),
            n_items: self.n_items,
            excluded: self.excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemPartition {
    pub cold: BTreeSet<usize>,
    pub warm: BTreeSet<usize>,
}

impl ItemPartition {
    pub fn is_cold(&self, item: usize) -> bool {
        self.cold.contains(&item)
    }
}

/// Cold = fewer than [`COLD_THRESHOLD`] occurrences in the training portion.
pub fn cold_item_partition(split: &SplitBundle) -> ItemPartition {
    let counts = split.train_item_counts();
    let (cold, warm) = (1..=split.n_items).partition(|&i| counts[i] < COLD_THRESHOLD);
    ItemPartition { cold, warm }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::dataio::UserSequence;
    use crate::numkernel::rng::Rng as Xoshiro;

    fn ds_from(seqs: Vec<Vec<usize>>, n_items: usize) -> InteractionDataset {
        InteractionDataset {
            user_ids: (0..seqs.len()).map(|u| format!("u{u}")).collect(),
            item_ids: (0..=n_items).map(|i| if i == 0 { String::new() } else { format!("i{i}") }).collect(),
            sequences: seqs
                .into_iter()
                .map(|items| UserSequence {
                    timestamps: (0..items.len() as i64).collect(),
                    items,
                })
                .collect(),
        }
    }

    #[test]
    fn definition_cases() {
        let s = leave_one_out_split(&ds_from(vec![vec![1, 2, 3, 4], vec![1, 2, 3], vec![1, 2]], 4));
        assert_eq!(s.users[0].train, [1, 2]);
        assert_eq!((s.users[0].valid, s.users[0].test), (3, 4));
        assert_eq!(s.users[1].train, [1]);
        assert_eq!((s.users[1].valid, s.users[1].test), (2, 3));
        assert_eq!(s.users.len(), 2);
        assert_eq!(s.excluded, 1);
        assert_eq!(s.users[0].test_input(), [1, 2, 3]);
    }

    #[test]
    fn round_trip_random_users() {
        let mut rng = Xoshiro::seed_from_u64(3);
        let seqs: Vec<Vec<usize>> = (0..100)
            .map(|_| {
                let n = rng.random_range(3..30);
                (0..n).map(|_| rng.random_range(1..=40)).collect()
            })
            .collect();
        let ds = ds_from(seqs.clone(), 40);
        let split = leave_one_out_split(&ds);
        assert_eq!(split.users.len(), 100);
        for u in &split.users {
            let mut joined = u.train.clone();
            joined.extend([u.valid, u.test]);
            assert_eq!(joined, seqs[u.user]);
        }
    }

    #[test]
    fn cold_boundary() {
        let mut seqs = vec![vec![1; 12], vec![2; 11]];
        // item 1: 10 training occurrences (12 - valid - test); item 2: 9
        seqs.push(vec![3, 3, 3]);
        let split = leave_one_out_split(&ds_from(seqs, 4));
        let p = cold_item_partition(&split);
        assert!(p.warm.contains(&1));
        assert!(p.cold.contains(&2));
        assert!(p.cold.contains(&3));
        assert!(p.cold.contains(&4), "unseen items are cold");
    }

    #[test]
    fn partition_matches_counting_oracle() {
        let mut rng = Xoshiro::seed_from_u64(11);
        let seqs: Vec<Vec<usize>> = (0..60)
            .map(|_| (0..rng.random_range(3..15)).map(|_| rng.random_range(1..=25)).collect())
            .collect();
        let split = leave_one_out_split(&ds_from(seqs.clone(), 25));
        let p = cold_item_partition(&split);
        for item in 1..=25 {
            let count: usize = seqs.iter().map(|s| s[..s.len() - 2].iter().filter(|&&i| i == item).count()).sum();
            assert_eq!(p.is_cold(item), count < 10, "item {item}");
            assert_ne!(p.cold.contains(&item), p.warm.contains(&item));
        }
    }
}
