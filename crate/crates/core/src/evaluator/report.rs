use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{ndcg_from_rank, recall_from_rank, KS};
use super::EvalError;
use crate::dataio::ItemPartition;
use crate::trainer::TrainLog;

pub const CSV_HEADER: &str = "section,label,users,R@5,R@10,R@20,N@5,N@10,N@20";
pub const LOSS_TRAJECTORY_HEADER: &str = "run_id,epoch,log_train_loss,log_test_loss";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserResult {
    pub user: usize,
    pub target: usize,
    pub train_len: usize,
    /// 1-based rank of the target among all items.
    pub rank: usize,
}

/// Mean metrics over a set of users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub users: usize,
    /// Indexed like [`KS`].
    pub recall: [f64; 3],
    pub ndcg: [f64; 3],
}

impl MetricRow {
    pub fn from_ranks<'a>(label: impl Into<String>, users: impl IntoIterator<Item = &'a UserResult>) -> Self {
        let mut recall = [0.0; 3];
        let mut ndcg = [0.0; 3];
        let mut n = 0usize;
        for u in users {
            n += 1;
            for (j, &k) in KS.iter().enumerate() {
                recall[j] += recall_from_rank(u.rank, k);
                ndcg[j] += ndcg_from_rank(u.rank, k);
            }
        }
        if n > 0 {
            recall.iter_mut().chain(ndcg.iter_mut()).for_each(|v| *v /= n as f64);
        }
        Self { label: label.into(), users: n, recall, ndcg }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        KS.iter().position(|&x| x == k).map(|j| self.recall[j])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        KS.iter().position(|&x| x == k).map(|j| self.ndcg[j])
    }

    fn csv_line(&self, section: &str) -> String {
        if self.users == 0 {
            return format!("{section},{},0,,,,,,", self.label);
        }
        let vals: Vec<String> = self.recall.iter().chain(&self.ndcg).map(|v| format!("{v:.6}")).collect();
        format!("{section},{},{},{}", self.label, self.users, vals.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    /// Set when no user qualified for evaluation.
    pub empty: bool,
    pub overall: MetricRow,
    pub groups: Vec<MetricRow>,
    pub cold: Option<MetricRow>,
    pub warm: Option<MetricRow>,
    pub users: Vec<UserResult>,
}

/// Splits `0..n` into five contiguous chunks whose sizes differ by at most one.
fn quintile_bounds(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(5);
    let mut start = 0;
    for g in 0..5 {
        let size = n / 5 + usize::from(g < n % 5);
        out.push((start, start + size));
        start += size;
    }
    out
}

impl MetricsReport {
    pub fn from_users(label: String, users: Vec<UserResult>, groups: bool, partition: Option<&ItemPartition>) -> Self {
        let overall = MetricRow::from_ranks("all", &users);
        let groups = if groups && !users.is_empty() {
            let mut order: Vec<&UserResult> = users.iter().collect();
            order.sort_by_key(|u| (u.train_len, u.user));
            quintile_bounds(order.len())
                .into_iter()
                .enumerate()
                .filter(|(_, (a, b))| b > a)
                .map(|(g, (a, b))| {
                    let part = &order[a..b];
                    let name = format!("group{} len {}-{}", g + 1, part[0].train_len, part[part.len() - 1].train_len);
                    MetricRow::from_ranks(name, part.iter().copied())
                })
                .collect()
        } else {
            Vec::new()
        };
        let (cold, warm) = match partition {
            Some(p) => (
                Some(MetricRow::from_ranks("cold", users.iter().filter(|u| p.is_cold(u.target)))),
                Some(MetricRow::from_ranks("warm", users.iter().filter(|u| !p.is_cold(u.target)))),
            ),
            None => (None, None),
        };
        Self { label, empty: users.is_empty(), overall, groups, cold, warm, users }
    }

    pub fn rows(&self) -> Vec<(&'static str, &MetricRow)> {
        let mut rows = vec![("overall", &self.overall)];
        rows.extend(self.groups.iter().map(|g| ("group", g)));
        rows.extend(self.cold.iter().map(|c| ("partition", c)));
        rows.extend(self.warm.iter().map(|w| ("partition", w)));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for (section, row) in self.rows() {
            let _ = writeln!(s, "{}", row.csv_line(section));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("== {} ==\n", self.label);
        if self.empty {
            s.push_str("(no users to evaluate)\n");
            return s;
        }
        let _ = writeln!(
            s,
            "{:<24} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "rows", "users", "R@5", "R@10", "R@20", "N@5", "N@10", "N@20"
        );
        for (_, r) in self.rows() {
            let _ = write!(s, "{:<24} {:>6}", r.label, r.users);
            for v in r.recall.iter().chain(&r.ndcg) {
                if r.users == 0 {
                    let _ = write!(s, " {:>8}", "-");
                } else {
                    let _ = write!(s, " {v:>8.4}");
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Long-format CSV of natural-log train and test losses per epoch.
pub fn export_loss_trajectory(runs: &[(&str, &TrainLog)]) -> Result<String, EvalError> {
    let mut s = format!("{LOSS_TRAJECTORY_HEADER}\n");
    for (run, log) in runs {
        if run.contains(',') || run.contains('\n') {
            return Err(EvalError::Contract(format!("run id `{run}` contains a separator")));
        }
        for r in &log.records {
            let test = r
                .test_loss
                .ok_or_else(|| EvalError::Contract(format!("run `{run}` epoch {} has no test loss", r.epoch)))?;
            if r.train_loss <= 0.0 || test <= 0.0 {
                return Err(EvalError::Contract(format!("run `{run}` epoch {} has a non-positive loss", r.epoch)));
            }
            let _ = writeln!(s, "{run},{},{},{}", r.epoch, r.train_loss.ln(), test.ln());
        }
    }
    Ok(s)
}
