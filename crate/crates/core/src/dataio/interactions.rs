use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::DataError;

pub const HEADER: &str = "user_id\titem_id\ttimestamp";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// One user's chronologically ordered interactions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UserSequence {
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Users and items with dense indices. Item index 0 is the pad slot, so
/// `item_ids[0]` is an empty placeholder and real items are `1..=n_items()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub sequences: Vec<UserSequence>,
}

impl InteractionDataset {
    /// Groups interactions per user and orders each group by timestamp,
    /// keeping input order among equal timestamps. Indices are assigned in
    /// order of first appearance.
    pub fn from_interactions(rows: &[Interaction]) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty("no interactions".into()));
        }
        let mut user_index: HashMap<&str, usize> = HashMap::new();
        let mut item_index: HashMap<&str, usize> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = vec![String::new()];
        let mut events: Vec<Vec<(i64, usize)>> = Vec::new();
        for r in rows {
            let u = *user_index.entry(&r.user_id).or_insert_with(|| {
                user_ids.push(r.user_id.clone());
                events.push(Vec::new());
                user_ids.len() - 1
            });
            let i = *item_index.entry(&r.item_id).or_insert_with(|| {
                item_ids.push(r.item_id.clone());
                item_ids.len() - 1
            });
            events[u].push((r.timestamp, i));
        }
        let sequences = events
            .into_iter()
            .map(|mut ev| {
                ev.sort_by_key(|&(t, _)| t);
                UserSequence {
                    items: ev.iter().map(|&(_, i)| i).collect(),
                    timestamps: ev.iter().map(|&(t, _)| t).collect(),
                }
            })
            .collect();
        Ok(Self { user_ids, item_ids, sequences })
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len() - 1
    }

    pub fn n_interactions(&self) -> usize {
        self.sequences.iter().map(UserSequence::len).sum()
    }

    pub fn avg_len(&self) -> f64 {
        if self.sequences.is_empty() {
            0.0
        } else {
            self.n_interactions() as f64 / self.n_users() as f64
        }
    }

    /// Item occurrence counts, indexed by item index.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.item_ids.len()];
        for s in &self.sequences {
            for &i in &s.items {
                counts[i] += 1;
            }
        }
        counts
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.item_ids.iter().enumerate().skip(1).map(|(i, id)| (id.as_str(), i)).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(32 * self.n_interactions());
        out.push_str(HEADER);
        out.push('\n');
        for (u, s) in self.sequences.iter().enumerate() {
            for (&i, &t) in s.items.iter().zip(&s.timestamps) {
                let _ = writeln!(out, "{}\t{}\t{}", self.user_ids[u], self.item_ids[i], t);
            }
        }
        out
    }
}

fn parse_tsv(text: &str) -> Result<Vec<Interaction>, DataError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r').split('\t').eq(HEADER.split('\t')) => {}
        Some((_, h)) => {
            return Err(DataError::Parse {
                line: 1,
                msg: format!("expected header {HEADER:?}, found {h:?}"),
            })
        }
        None => return Err(DataError::Empty("file has no header".into())),
    }
    let mut rows = Vec::new();
    for (n, raw) in lines {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let lineno = n + 1;
        let [user, item, ts] = fields.as_slice() else {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        };
        if user.is_empty() || item.is_empty() {
            return Err(DataError::Parse { line: lineno, msg: "empty id".into() });
        }
        let timestamp: i64 = ts.trim().parse().map_err(|e| DataError::Parse {
            line: lineno,
            msg: format!("bad timestamp {ts:?}: {e}"),
        })?;
        if timestamp < 0 {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("negative timestamp {timestamp}"),
            });
        }
        rows.push(Interaction {
            user_id: user.to_string(),
            item_id: item.to_string(),
            timestamp,
        });
    }
    Ok(rows)
}

/// Reads a `user_id\titem_id\ttimestamp` file with header.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionDataset, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let rows = parse_tsv(&text)?;
    InteractionDataset::from_interactions(&rows)
}

pub fn write_interactions(ds: &InteractionDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, ds.to_tsv()).map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<InteractionDataset, DataError> {
        InteractionDataset::from_interactions(&parse_tsv(text)?)
    }

    #[test]
    fn sorts_by_timestamp() {
        let ds = parse("user_id\titem_id\ttimestamp\nu\tc\t30\nu\ta\t10\nu\tb\t20\n").unwrap();
        let names: Vec<&str> = ds.sequences[0].items.iter().map(|&i| ds.item_ids[i].as_str()).collect();
        assert_eq!(names, ["a", "b", "c"]);
        assert_eq!(ds.sequences[0].timestamps, [10, 20, 30]);
    }

    #[test]
    fn ties_keep_file_order_and_duplicates_survive() {
        let ds = parse("user_id\titem_id\ttimestamp\nu\tb\t5\nu\ta\t5\nu\tb\t5\n").unwrap();
        let names: Vec<&str> = ds.sequences[0].items.iter().map(|&i| ds.item_ids[i].as_str()).collect();
        assert_eq!(names, ["b", "a", "b"]);
        assert_eq!(ds.n_interactions(), 3);
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse("user_id\titem_id\ttimestamp\nu\ta\t1\nu\tb\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }), "{err}");
        let err = parse("user_id\titem_id\ttimestamp\nu\ta\tsoon\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }));
        let err = parse("user_id\titem_id\ttimestamp\nu\ta\t-4\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(parse(""), Err(DataError::Empty(_))));
        assert!(matches!(parse("user_id\titem_id\ttimestamp\n"), Err(DataError::Empty(_))));
        assert!(matches!(parse("a\tb\n"), Err(DataError::Parse { line: 1, .. })));
    }

    #[test]
    fn tsv_round_trip() {
        let ds = parse("user_id\titem_id\ttimestamp\nx\tp\t3\ny\tq\t1\nx\tq\t2\n").unwrap();
        let back = parse(&ds.to_tsv()).unwrap();
        let named = |d: &InteractionDataset| -> Vec<Vec<String>> {
            d.sequences.iter().map(|s| s.items.iter().map(|&i| d.item_ids[i].clone()).collect()).collect()
        };
        assert_eq!(named(&back), named(&ds));
        assert_eq!(back.user_ids, ds.user_ids);
        assert_eq!(back.to_tsv(), ds.to_tsv());
    }

    /// Published statistics for the Amazon Pantry 5-core file. Needs the
    /// external file: `MP4SR_PANTRY=/path/to/pantry.tsv cargo test -- --ignored`.
    #[test]
    #[ignore]
    fn pantry_statistics() {
        let path = std::env::var("MP4SR_PANTRY").expect("MP4SR_PANTRY not set");
        let ds = load_interactions(path).unwrap();
        assert_eq!(ds.n_users(), 13_614);
        assert_eq!(ds.n_items(), 7_670);
        assert_eq!(ds.n_interactions(), 131_311);
        assert!((ds.avg_len() - 9.65).abs() < 0.005);
    }
}
