//! Label-scarce subsets of the training split, grouped by subject first and
//! stratified by class second.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{EpochRef, Task};
use crate::error::{ensure, Result};
use crate::rng::rng_for;
use crate::signal::EpochSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsampleReport {
    pub fraction: f64,
    pub labeled: usize,
    pub target: usize,
    #[serde(skip)]
    pub selected: Vec<EpochRef>,
    /// Subjects taken whole.
    pub whole_subjects: Vec<String>,
    /// Subjects only partly taken: the one that fills the remainder, plus any
    /// donors used by the class-presence fallback.
    pub split_subjects: Vec<String>,
    pub fallback: bool,
    /// Classes of the labeled pool still absent from the selection.
    pub missing_classes: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Select exactly `floor(fraction · labeled)` labeled epochs of `task`.
///
/// Subjects are visited in a seeded order and taken whole while they fit.
/// The remainder comes from the first subject that was not taken, drawing
/// one epoch of each class not yet selected before filling at random. If a
/// class present in the pool is still missing, the fallback swaps epochs of
/// that class in (from the subject holding the most missing classes) for
/// epochs of the most frequent selected class, keeping the count exact.
pub fn subsample(sets: &[EpochSet], task: Task, fraction: f64, seed: u64) -> Result<SubsampleReport> {
    ensure!(
        fraction > 0.0 && fraction <= 1.0,
        "label fraction must lie in (0, 1], got {fraction}"
    );
    let per_subject: Vec<Vec<(usize, usize)>> = sets
        .iter()
        .map(|s| {
            s.epochs
                .iter()
                .enumerate()
                .filter_map(|(i, e)| task.label(e).map(|l| (i, l)))
                .collect()
        })
        .collect();
    let labeled: usize = per_subject.iter().map(Vec::len).sum();
    let target = (fraction * labeled as f64).floor() as usize;
    ensure!(
        target > 0,
        "label fraction {fraction} of {labeled} labeled epochs selects nothing"
    );

    let mut order: Vec<usize> = (0..sets.len()).collect();
    order.shuffle(&mut rng_for(seed, "subsample-subjects", &[]));
    let mut rng = rng_for(seed, "subsample-epochs", &[]);

    let mut chosen: Vec<(EpochRef, usize)> = Vec::with_capacity(target);
    let mut whole = Vec::new();
    let mut split = Vec::new();
    let mut remaining = target;
    for &s in &order {
        let n = per_subject[s].len();
        if n > 0 && n <= remaining {
            chosen.extend(per_subject[s].iter().map(|&(e, l)| (EpochRef { set: s, epoch: e }, l)));
            whole.push(s);
            remaining -= n;
        }
    }
    if remaining > 0 {
        // Every subject not taken whole has more than `remaining` epochs.
        let s = *order
            .iter()
            .find(|s| !whole.contains(s) && per_subject[**s].len() > remaining)
            .expect("a subject that did not fit can supply the remainder");
        let have: BTreeSet<usize> = chosen.iter().map(|c| c.1).collect();
        let mut pool = per_subject[s].clone();
        pool.shuffle(&mut rng);
        let mut picked = Vec::with_capacity(remaining);
        let mut seen = have.clone();
        for (i, &(_, l)) in pool.iter().enumerate() {
            if picked.len() < remaining && seen.insert(l) {
                picked.push(i);
            }
        }
        for i in 0..pool.len() {
            if picked.len() == remaining {
                break;
            }
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
        chosen.extend(picked.into_iter().map(|i| (EpochRef { set: s, epoch: pool[i].0 }, pool[i].1)));
        split.push(s);
    }

    let pool_classes: BTreeSet<usize> = per_subject.iter().flatten().map(|p| p.1).collect();
    let mut warnings = Vec::new();
    let mut fallback = false;
    let missing = |chosen: &[(EpochRef, usize)]| -> Vec<usize> {
        let have: BTreeSet<usize> = chosen.iter().map(|c| c.1).collect();
        pool_classes.difference(&have).copied().collect()
    };
    let mut absent = missing(&chosen);
    if !absent.is_empty() {
        warnings.push(format!("classes {absent:?} of {task} absent from the grouped subsample"));
    }
    while !absent.is_empty() {
        let taken: BTreeSet<EpochRef> = chosen.iter().map(|c| c.0).collect();
        let offers = |s: usize| -> BTreeSet<usize> {
            per_subject[s]
                .iter()
                .filter(|&&(e, l)| absent.contains(&l) && !taken.contains(&EpochRef { set: s, epoch: e }))
                .map(|p| p.1)
                .collect()
        };
        // Donor: the earliest subject offering the most missing classes.
        let best = order.iter().map(|&s| offers(s).len()).max().unwrap_or(0);
        if best == 0 {
            break;
        }
        let s = *order.iter().find(|&&s| offers(s).len() == best).expect("max is attained");
        let offers = offers(s);
        let mut swapped = false;
        for class in offers {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for c in &chosen {
                *counts.entry(c.1).or_default() += 1;
            }
            let Some((&over, _)) = counts.iter().filter(|(_, &n)| n > 1).max_by_key(|(&c, &n)| (n, std::cmp::Reverse(c)))
            else {
                break;
            };
            let out = chosen.iter().rposition(|c| c.1 == over).expect("class counted above");
            let (e, _) = *per_subject[s]
                .iter()
                .find(|&&(e, l)| l == class && !taken.contains(&EpochRef { set: s, epoch: e }))
                .expect("donor offers this class");
            chosen[out] = (EpochRef { set: s, epoch: e }, class);
            swapped = true;
        }
        if !swapped {
            break;
        }
        fallback = true;
        if !split.contains(&s) {
            split.push(s);
        }
        absent = missing(&chosen);
    }
    if fallback {
        warnings.push("class-presence fallback relaxed subject grouping".to_string());
    }
    if !absent.is_empty() {
        warnings.push(format!(
            "classes {absent:?} cannot be represented in {target} epochs; continuing without them"
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let mut selected: Vec<EpochRef> = chosen.into_iter().map(|c| c.0).collect();
    selected.sort();
    let name = |v: &[usize]| v.iter().map(|&s| sets[s].subject_id.clone()).collect::<Vec<_>>();
    Ok(SubsampleReport {
        fraction,
        labeled,
        target,
        selected,
        whole_subjects: name(&whole),
        split_subjects: name(&split),
        fallback,
        missing_classes: absent,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{ChannelInfo, EpochSample, Modality, Stage};

    fn set(id: &str, stages: &[usize]) -> EpochSet {
        EpochSet {
            subject_id: id.into(),
            channels: vec![ChannelInfo {
                name: "C4".into(),
                modality: Modality::Eeg,
            }],
            epochs: stages
                .iter()
                .enumerate()
                .map(|(i, &s)| EpochSample {
                    epoch_index: i,
                    signals: vec![vec![0.0; 4]],
                    stage: Stage::from_index(s),
                    apnea: false,
                    hypopnea: false,
                })
                .collect(),
        }
    }

    fn cohort(subjects: usize, per: usize) -> Vec<EpochSet> {
        (0..subjects)
            .map(|s| set(&format!("s{s}"), &(0..per).map(|i| (i / 7 + s) % 5).collect::<Vec<_>>()))
            .collect()
    }

    fn grouped(sets: &[EpochSet], r: &SubsampleReport) -> bool {
        sets.iter().enumerate().all(|(s, set)| {
            let n = r.selected.iter().filter(|x| x.set == s).count();
            n == 0 || n == set.epochs.len() || r.split_subjects.contains(&set.subject_id)
        })
    }

    #[test]
    fn one_percent_of_ten_thousand() {
        let sets = cohort(20, 500);
        let r = subsample(&sets, Task::Stage, 0.01, 3).unwrap();
        assert_eq!((r.labeled, r.target, r.selected.len()), (10_000, 100, 100));
        assert!(grouped(&sets, &r));
        assert!(r.split_subjects.len() <= 1 || r.fallback);
        assert!(r.missing_classes.is_empty());
        assert_eq!(r, subsample(&sets, Task::Stage, 0.01, 3).unwrap());
        assert_eq!(r.selected, subsample(&sets, Task::Stage, 0.01, 3).unwrap().selected);
    }

    #[test]
    fn whole_subjects_when_they_fit() {
        let sets = cohort(20, 50);
        let r = subsample(&sets, Task::Stage, 0.05, 1).unwrap();
        assert_eq!(r.target, 50);
        assert_eq!(r.whole_subjects.len(), 1);
        assert!(r.split_subjects.is_empty());
        assert!(!r.fallback);
    }

    #[test]
    fn fallback_swaps_in_missing_classes() {
        // Whole subject 'a' fills the target but only has class 0.
        let sets = vec![set("a", &[0; 10]), set("b", &[1, 2, 3, 4, 0, 0, 0, 0, 0, 0, 0])];
        let r = subsample(&sets, Task::Stage, 10.0 / 21.0, 0).unwrap();
        assert_eq!(r.selected.len(), 10);
        // 'b' never fits, so 'a' is always taken whole.
        assert_eq!(r.whole_subjects, vec!["a".to_string()]);
        assert!(r.fallback);
        assert_eq!(r.split_subjects, vec!["b".to_string()]);
        assert!(r.warnings.iter().any(|w| w.contains("fallback")));
        assert!(r.missing_classes.is_empty());
        let classes: BTreeSet<usize> =
            r.selected.iter().map(|x| sets[x.set].epochs[x.epoch].stage.unwrap().index()).collect();
        assert_eq!(classes.len(), 5);
    }

    #[test]
    fn infeasible_presence_is_reported() {
        let sets = cohort(1, 200);
        let r = subsample(&sets, Task::Stage, 0.01, 0).unwrap();
        assert_eq!(r.selected.len(), 2);
        assert_eq!(r.missing_classes.len(), 3);
        assert!(!r.warnings.is_empty());
        let r = subsample(&sets, Task::Stage, 0.05, 0).unwrap();
        assert_eq!(r.selected.len(), 10);
        assert!(r.missing_classes.is_empty());
    }

    #[test]
    fn rejects_empty_selection() {
        assert!(subsample(&cohort(1, 50), Task::Stage, 0.01, 0).is_err());
        assert!(subsample(&cohort(1, 50), Task::Stage, 0.0, 0).is_err());
    }
}
