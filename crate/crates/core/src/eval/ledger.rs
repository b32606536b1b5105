//! Results ledger: one CSV row per (fold, scenario, task, streams, fraction).

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::csv_err;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    /// Which command or sweep point produced the row.
    pub run: String,
    pub fold: usize,
    pub scenario: String,
    pub task: String,
    pub modalities: String,
    pub label_fraction: f64,
    pub acc: f64,
    pub mf1: f64,
    pub kappa: f64,
    pub n: usize,
}

/// Append rows, writing the header only when the file is new or empty.
pub fn append_ledger(path: &Path, rows: &[LedgerRow]) -> Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl LedgerRow {
    fn key(&self) -> (&str, usize, &str, &str, &str, u64) {
        (
            &self.run,
            self.fold,
            &self.scenario,
            &self.task,
            &self.modalities,
            self.label_fraction.to_bits(),
        )
    }
}

/// Replace rows sharing a key (run, fold, scenario, task, modalities,
/// fraction) with the new ones, so reruns do not duplicate entries.
pub fn upsert_ledger(path: &Path, rows: &[LedgerRow]) -> Result<()> {
    let mut all = if path.exists() { read_ledger(path)? } else { Vec::new() };
    all.retain(|old| rows.iter().all(|r| r.key() != old.key()));
    all.extend_from_slice(rows);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in &all {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerRow>> {
    if !path.exists() {
        return Err(Error::Dependency(format!("results ledger {} not found", path.display())));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<LedgerRow>, _>>()
        .map_err(|e| Error::corrupt(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(task: &str, acc: f64) -> LedgerRow {
        LedgerRow {
            run: "train".into(),
            fold: 0,
            scenario: "linear_probe".into(),
            task: task.into(),
            modalities: "eeg2+eog2+emg1+ecg1".into(),
            label_fraction: 1.0,
            acc,
            mf1: 0.5,
            kappa: 0.25,
            n: 200,
        }
    }

    #[test]
    fn appends_keep_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ledger.csv");
        append_ledger(&p, &[row("stage", 0.75)]).unwrap();
        append_ledger(&p, &[row("apnea", 0.5), row("hypopnea", 0.125)]).unwrap();
        let rows = read_ledger(&p).unwrap();
        assert_eq!(rows, vec![row("stage", 0.75), row("apnea", 0.5), row("hypopnea", 0.125)]);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.matches("label_fraction").count(), 1);
    }

    #[test]
    fn upsert_replaces_matching_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ledger.csv");
        upsert_ledger(&p, &[row("stage", 0.75), row("apnea", 0.5)]).unwrap();
        upsert_ledger(&p, &[row("stage", 0.8)]).unwrap();
        assert_eq!(read_ledger(&p).unwrap(), vec![row("apnea", 0.5), row("stage", 0.8)]);
    }
}
