use super::{DataError, InteractionDataset, UserSequence};

/// Iteratively drops users and items with fewer than `k` interactions until
/// nothing changes. Surviving users and items keep their relative order.
pub fn kcore_filter(ds: &InteractionDataset, k: usize) -> Result<InteractionDataset, DataError> {
    if k == 0 {
        return Err(DataError::Config("k-core requires k >= 1".into()));
    }
    let mut seqs: Vec<Option<UserSequence>> = ds.sequences.iter().cloned().map(Some).collect();
    loop {
        let mut changed = false;
        for s in seqs.iter_mut() {
            if s.as_ref().is_some_and(|s| s.len() < k) {
                *s = None;
                changed = true;
            }
        }
        let mut counts = vec![0usize; ds.item_ids.len()];
        for s in seqs.iter().flatten() {
            for &i in &s.items {
                counts[i] += 1;
            }
        }
        for s in seqs.iter_mut().flatten() {
            if s.items.iter().any(|&i| counts[i] < k) {
                let (items, ts): (Vec<usize>, Vec<i64>) = s
                    .items
                    .iter()
                    .zip(&s.timestamps)
                    .filter(|(&i, _)| counts[i] >= k)
                    .map(|(&i, &t)| (i, t))
                    .unzip();
                s.items = items;
                s.timestamps = ts;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut remap = vec![0usize; ds.item_ids.len()];
    let mut item_ids = vec![String::new()];
    let mut used = vec![false; ds.item_ids.len()];
    for s in seqs.iter().flatten() {
        for &i in &s.items {
            used[i] = true;
        }
    }
    for (old, id) in ds.item_ids.iter().enumerate().skip(1) {
        if used[old] {
            item_ids.push(id.clone());
            remap[old] = item_ids.len() - 1;
        }
    }
    let mut user_ids = Vec::new();
    let mut sequences = Vec::new();
    for (u, s) in seqs.into_iter().enumerate() {
        if let Some(mut s) = s {
            s.items.iter_mut().for_each(|i| *i = remap[*i]);
            user_ids.push(ds.user_ids[u].clone());
            sequences.push(s);
        }
    }
    if sequences.is_empty() {
        return Err(DataError::Empty(format!("{k}-core of the dataset is empty")));
    }
    Ok(InteractionDataset { user_ids, item_ids, sequences })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::dataio::Interaction;

    fn dataset(edges: &[(&str, &str)]) -> InteractionDataset {
        let rows: Vec<Interaction> = edges
            .iter()
            .enumerate()
            .map(|(t, (u, i))| Interaction {
                user_id: u.to_string(),
                item_id: i.to_string(),
                timestamp: t as i64,
            })
            .collect();
        InteractionDataset::from_interactions(&rows).unwrap()
    }

    fn edge_set(ds: &InteractionDataset) -> BTreeSet<(String, String)> {
        ds.sequences
            .iter()
            .enumerate()
            .flat_map(|(u, s)| s.items.iter().map(move |&i| (ds.user_ids[u].clone(), ds.item_ids[i].clone())))
            .collect()
    }

    /// Removes one violating node at a time, re-counting from scratch.
    fn brute_force(edges: &[(&str, &str)], k: usize) -> BTreeSet<(String, String)> {
        let mut live: Vec<(String, String)> = edges.iter().map(|(u, i)| (u.to_string(), i.to_string())).collect();
        loop {
            let deg = |pick: &dyn Fn(&(String, String)) -> &String, who: &String| live.iter().filter(|e| pick(e) == who).count();
            let bad = live.iter().find_map(|e| {
                if deg(&|e| &e.0, &e.0) < k {
                    Some((true, e.0.clone()))
                } else if deg(&|e| &e.1, &e.1) < k {
                    Some((false, e.1.clone()))
                } else {
                    None
                }
            });
            match bad {
                Some((true, u)) => live.retain(|e| e.0 != u),
                Some((false, i)) => live.retain(|e| e.1 != i),
                None => return live.into_iter().collect(),
            }
        }
    }

    const TOY: [(&str, &str); 14] = [
        ("u1", "a"), ("u1", "b"), ("u1", "c"),
        ("u2", "a"), ("u2", "b"),
        ("u3", "b"), ("u3", "c"), ("u3", "d"),
        ("u4", "d"), ("u4", "e"),
        ("u5", "f"),
        ("u6", "a"), ("u6", "e"), ("u6", "f"),
    ];

    #[test]
    fn toy_graph_matches_pruning_oracle() {
        let ds = dataset(&TOY);
        let out = kcore_filter(&ds, 2).unwrap();
        assert_eq!(edge_set(&out), brute_force(&TOY, 2));
        for k in 1..=3 {
            match kcore_filter(&ds, k) {
                Ok(out) => assert_eq!(edge_set(&out), brute_force(&TOY, k), "k={k}"),
                Err(DataError::Empty(_)) => assert!(brute_force(&TOY, k).is_empty()),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn fixed_point_and_trivial_k() {
        let ds = dataset(&TOY);
        assert_eq!(kcore_filter(&ds, 1).unwrap(), ds);
        let once = kcore_filter(&ds, 2).unwrap();
        assert_eq!(kcore_filter(&once, 2).unwrap(), once);
        for s in &once.sequences {
            assert!(s.len() >= 2);
        }
        assert!(once.item_counts().iter().skip(1).all(|&c| c >= 2));
    }

    #[test]
    fn empty_and_invalid() {
        let ds = dataset(&TOY);
        assert!(matches!(kcore_filter(&ds, 10), Err(DataError::Empty(_))));
        assert!(matches!(kcore_filter(&ds, 0), Err(DataError::Config(_))));
    }
}
