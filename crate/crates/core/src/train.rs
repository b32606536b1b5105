//! Pieces shared by the training loops: minibatching and the loss log.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Shuffle `0..n` and cut it into batches of `batch_size`. A trailing batch
/// smaller than `min_last` is merged into the previous one.
pub fn shuffled_batches(n: usize, batch_size: usize, min_last: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() < min_last) {
        let tail = out.pop().expect("len >= 2");
        out.last_mut().expect("len >= 1").extend(tail);
    }
    out
}

/// One optimiser step of a pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    pub recon: f64,
    pub contra: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    if !path.exists() {
        return Err(Error::Dependency(format!("loss log {} not found", path.display())));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<LossRecord>, _>>()
        .map_err(|e| Error::corrupt(path, e.to_string()))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::corrupt(path, format!("{other:?}")),
    }
}

/// Per-epoch means of a loss log, in epoch order.
pub fn epoch_means(records: &[LossRecord]) -> Vec<(usize, f64, f64, f64)> {
    let mut out: Vec<(usize, f64, f64, f64, usize)> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some(last) if last.0 == r.epoch => {
                last.1 += r.recon;
                last.2 += r.contra;
                last.3 += r.total;
                last.4 += 1;
            }
            _ => out.push((r.epoch, r.recon, r.contra, r.total, 1)),
        }
    }
    out.into_iter()
        .map(|(e, a, b, c, n)| (e, a / n as f64, b / n as f64, c / n as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn batches_cover_everything_once() {
        let b = shuffled_batches(10, 4, 3, &mut rng_for(0, "b", &[]));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 6]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let b = shuffled_batches(9, 4, 1, &mut rng_for(0, "b", &[]));
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn loss_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let recs = vec![
            LossRecord { epoch: 0, step: 1, recon: 0.5, contra: 1.25, total: 1.75, lr: 1e-3 },
            LossRecord { epoch: 0, step: 2, recon: 0.25, contra: 1.0, total: 1.25, lr: 1e-3 },
            LossRecord { epoch: 1, step: 3, recon: 0.125, contra: 0.5, total: 0.625, lr: 1e-3 },
        ];
        write_loss_log(&p, &recs).unwrap();
        assert_eq!(read_loss_log(&p).unwrap(), recs);
        let means = epoch_means(&recs);
        assert_eq!(means[0], (0, 0.375, 1.125, 1.5));
        assert_eq!(means.len(), 2);
        assert!(matches!(read_loss_log(&dir.path().join("nope.csv")), Err(Error::Dependency(_))));
    }
}
