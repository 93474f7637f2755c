use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::DataError;

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,val_r20,test_loss";

/// One row of a [`TrainLog`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_r20: Option<f64>,
    pub test_loss: Option<f64>,
}

/// Per-epoch training history. Epochs are numbered from 1.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub fn push(&mut self, rec: EpochRecord) {
        if let Some(last) = self.records.last() {
            assert!(rec.epoch > last.epoch, "epochs must increase");
        }
        self.records.push(rec);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    /// CSV with shortest round-trip float formatting, so equal logs give equal bytes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAIN_LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, opt(r.val_r20), opt(r.test_loss));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == TRAIN_LOG_HEADER => {}
            _ => return Err(DataError::Parse { line: 1, msg: format!("expected header `{TRAIN_LOG_HEADER}`") }),
        }
        let mut log = TrainLog::default();
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| DataError::Parse { line: lineno, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| err(format!("bad number `{s}`: {e}")));
            let optnum = |s: &str| if s.trim().is_empty() { Ok(None) } else { num(s).map(Some) };
            let epoch = f[0].trim().parse::<usize>().map_err(|e| err(format!("bad epoch: {e}")))?;
            if log.records.last().is_some_and(|r| r.epoch >= epoch) {
                return Err(err("epochs must increase".into()));
            }
            log.records.push(EpochRecord {
                epoch,
                train_loss: num(f[1])?,
                val_r20: optnum(f[2])?,
                test_loss: optnum(f[3])?,
            });
        }
        Ok(log)
    }
}
