//! Subject-group cross-validation plans.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub pretrain: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Shuffle the subjects once, cut them into `fold_count` near-equal test
/// groups, and split each fold's remaining subjects into pretrain and train
/// by `pretrain_ratio`. Both of those keep at least one subject.
pub fn make_splits(ids: &[String], fold_count: usize, pretrain_ratio: f64, seed: u64) -> Result<SplitPlan> {
    ensure!(fold_count >= 2, "need at least 2 folds, got {fold_count}");
    ensure!(
        pretrain_ratio > 0.0 && pretrain_ratio < 1.0,
        "pretrain ratio must lie in (0, 1), got {pretrain_ratio}"
    );
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    ensure!(sorted.len() == ids.len(), "subject ids are not unique");
    ensure!(
        ids.len() >= fold_count,
        "{} subjects cannot fill {fold_count} folds",
        ids.len()
    );
    let mut order = sorted;
    order.shuffle(&mut rng_for(seed, "splits", &[]));

    let n = order.len();
    let groups: Vec<&[String]> = (0..fold_count)
        .map(|f| &order[f * n / fold_count..(f + 1) * n / fold_count])
        .collect();
    let mut folds = Vec::with_capacity(fold_count);
    for (f, test) in groups.iter().enumerate() {
        // The remaining subjects in rotation order starting after the test group.
        let rest: Vec<String> = (1..fold_count)
            .flat_map(|k| groups[(f + k) % fold_count].iter().cloned())
            .collect();
        ensure!(
            rest.len() >= 2,
            "fold {f} leaves {} non-test subjects; need one for pretraining and one for training",
            rest.len()
        );
        let p = ((pretrain_ratio * rest.len() as f64).round() as usize).clamp(1, rest.len() - 1);
        let mut pretrain = rest[..p].to_vec();
        let mut train = rest[p..].to_vec();
        let mut test = test.to_vec();
        pretrain.sort();
        train.sort();
        test.sort();
        folds.push(Fold { pretrain, train, test });
    }
    Ok(SplitPlan { seed, folds })
}
