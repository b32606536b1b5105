//! Accuracy, macro-F1 and Cohen's kappa from a confusion matrix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// `counts[t][p]`: epochs with true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(pred: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        ensure!(
            pred.len() == truth.len(),
            "prediction and label sequences differ in length ({} vs {})",
            pred.len(),
            truth.len()
        );
        ensure!(!pred.is_empty(), "metrics need at least one label");
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&p, &t) in pred.iter().zip(truth) {
            ensure!(p < classes && t < classes, "label {} outside {classes} classes", p.max(t));
            counts[t][p] += 1;
        }
        Ok(Confusion { counts })
    }

    /// Classes inferred as `max label + 1`.
    pub fn infer(pred: &[usize], truth: &[usize]) -> Result<Self> {
        let k = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
        Confusion::new(pred, truth, k)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let tp: u64 = (0..self.classes()).map(|c| self.counts[c][c]).sum();
        tp as f64 / self.total() as f64
    }

    /// F1 of class `c`; zero when its denominator is zero.
    pub fn f1(&self, c: usize) -> f64 {
        let tp = self.counts[c][c] as f64;
        let denom = (self.row_sum(c) + self.col_sum(c)) as f64;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    }

    /// Classes that occur in the labels or the predictions.
    pub fn present(&self) -> Vec<usize> {
        (0..self.classes())
            .filter(|&c| self.row_sum(c) + self.col_sum(c) > 0)
            .collect()
    }

    pub fn macro_f1(&self) -> f64 {
        let present = self.present();
        present.iter().map(|&c| self.f1(c)).sum::<f64>() / present.len() as f64
    }

    /// Cohen's kappa; defined as 0 (with a warning) when chance agreement is 1.
    pub fn kappa(&self) -> f64 {
        let n = self.total() as f64;
        let po = self.accuracy();
        let pe: f64 = (0..self.classes())
            .map(|c| (self.row_sum(c) as f64 / n) * (self.col_sum(c) as f64 / n))
            .sum();
        if (1.0 - pe).abs() < 1e-15 {
            log::warn!("kappa undefined: chance agreement is 1; reporting 0");
            return 0.0;
        }
        (po - pe) / (1.0 - pe)
    }
}

pub fn metric_acc(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(Confusion::infer(pred, truth)?.accuracy())
}

pub fn metric_mf1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(Confusion::infer(pred, truth)?.macro_f1())
}

pub fn metric_kappa(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(Confusion::infer(pred, truth)?.kappa())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub mf1: f64,
    pub kappa: f64,
    pub per_class_f1: BTreeMap<usize, f64>,
    pub confusion: Confusion,
    pub count: usize,
}

impl MetricsReport {
    pub fn new(pred: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        let c = Confusion::new(pred, truth, classes)?;
        Ok(MetricsReport {
            acc: c.accuracy(),
            mf1: c.macro_f1(),
            kappa: c.kappa(),
            per_class_f1: c.present().into_iter().map(|k| (k, c.f1(k))).collect(),
            count: pred.len(),
            confusion: c,
        })
    }
}

/// Accuracy of always predicting the most frequent label.
pub fn majority_baseline(truth: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in truth {
        *counts.entry(t).or_default() += 1;
    }
    counts.values().max().map_or(0.0, |&m| m as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        let (p, t) = ([0, 0, 1, 2, 1], [0, 1, 1, 2, 2]);
        assert_abs_diff_eq!(metric_acc(&p, &t).unwrap(), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(
            metric_mf1(&p, &t).unwrap(),
            (2.0 / 3.0 + 0.5 + 2.0 / 3.0) / 3.0,
            epsilon = 1e-15
        );
        assert_eq!(metric_kappa(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(metric_kappa(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(metric_acc(&[3, 3], &[3, 3]).unwrap(), 1.0);
        // Single class everywhere: chance agreement 1.
        assert_eq!(metric_kappa(&[2, 2], &[2, 2]).unwrap(), 0.0);
        assert!(metric_acc(&[0], &[0, 1]).is_err());
        assert!(metric_acc(&[], &[]).is_err());
    }

    #[test]
    fn absent_classes_do_not_count() {
        let r = MetricsReport::new(&[0, 1, 0, 1], &[0, 1, 0, 1], 5).unwrap();
        assert_eq!(r.mf1, 1.0);
        assert_eq!(r.per_class_f1.len(), 2);
        let rows: Vec<u64> = r.confusion.counts.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(rows, vec![2, 2, 0, 0, 0]);
    }

    proptest! {
        #[test]
        fn acc_is_permutation_invariant(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60), shift in 1usize..4) {
            let (p, t): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let perm = |x: &usize| (x + shift) % 4;
            let pp: Vec<_> = p.iter().map(perm).collect();
            let tp: Vec<_> = t.iter().map(perm).collect();
            prop_assert_eq!(metric_acc(&p, &t).unwrap(), metric_acc(&pp, &tp).unwrap());
        }

        #[test]
        fn perfect_agreement_gives_kappa_one(labels in proptest::collection::vec(0usize..5, 2..50)) {
            let k = metric_kappa(&labels, &labels).unwrap();
            let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
            prop_assert_eq!(k, if distinct > 1 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn majority() {
        assert_eq!(majority_baseline(&[1, 1, 0, 2]), 0.5);
    }
}
