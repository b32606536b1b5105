//! Downstream evaluation: linear probing on frozen fusion features, TCM
//! fine-tuning with the last attention projection unfrozen, and both again
//! on label-scarce subsets.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Segments};
use crate::data::{EpochRef, Task};
use crate::error::{ensure, Error, Result};
use crate::eval::metrics::MetricsReport;
use crate::eval::subsample::{subsample, SubsampleReport};
use crate::fusion::FusionModel;
use crate::nn::{AdamW, AdamWConfig, Linear, ParamStore};
use crate::rng::rng_for;
use crate::signal::EpochSet;
use crate::tcm::{windowize, TcmConfig, TcmModel};
use crate::train::shuffled_batches;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    LinearProbe,
    FinetuneTcm,
    SemiSupervised,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::LinearProbe => "linear_probe",
            Scenario::FinetuneTcm => "finetune_tcm",
            Scenario::SemiSupervised => "semi_supervised",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "linear_probe" => Ok(Scenario::LinearProbe),
            "2" | "finetune_tcm" => Ok(Scenario::FinetuneTcm),
            "3" | "semi_supervised" => Ok(Scenario::SemiSupervised),
            other => Err(Error::invalid(format!(
                "unknown scenario '{other}' (expected 1, 2, 3 or a scenario name)"
            ))),
        }
    }
}

/// Optimisation settings of one downstream stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Learning rate of the unfrozen backbone weights when fine-tuning;
    /// unset means `lr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_lr: Option<f64>,
    /// Global gradient-norm clip; unset disables clipping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

fn default_weight_decay() -> f64 {
    0.01
}

impl TrainSpec {
    pub fn linear_probe() -> Self {
        TrainSpec {
            epochs: 150,
            batch_size: 512,
            lr: 2e-4,
            weight_decay: 0.01,
            backbone_lr: None,
            clip_norm: None,
        }
    }

    pub fn finetune() -> Self {
        TrainSpec {
            epochs: 50,
            batch_size: 128,
            lr: 2.5e-4,
            weight_decay: 0.01,
            backbone_lr: None,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.epochs > 0 && self.batch_size > 0,
            "epochs and batch_size must be positive"
        );
        if let Some(b) = self.backbone_lr {
            ensure!(b > 0.0 && b.is_finite(), "backbone_lr must be positive");
        }
        self.optimizer().validate()
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamWConfig::with_lr(self.lr)
        }
    }
}

/// Labels and predictions for one test subject, in epoch order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectPredictions {
    pub subject_id: String,
    pub epoch_index: Vec<usize>,
    pub truth: Vec<usize>,
    pub pred: Vec<usize>,
}

impl SubjectPredictions {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch_index,true,pred\n");
        for i in 0..self.truth.len() {
            s.push_str(&format!(
                "{},{},{}\n",
                self.epoch_index[i], self.truth[i], self.pred[i]
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    /// `linear_probe`, `finetune_tcm`, or `semi_supervised/<inner>`.
    pub scenario: String,
    pub task: Task,
    pub label_fraction: f64,
    pub report: MetricsReport,
    pub predictions: Vec<SubjectPredictions>,
    /// Model parameters whose values changed during training.
    pub changed_params: Vec<String>,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub subsample: Option<SubsampleReport>,
}

/// Epochs of the training split usable per task; `None` means every labeled epoch.
pub type Selection = BTreeMap<Task, Vec<EpochRef>>;

/// Names changed between `before` and `after`; a contract error names any
/// change outside `allowed`.
pub fn audit_params(
    before: &ParamStore,
    after: &ParamStore,
    allowed: impl Fn(&str) -> bool,
) -> Result<Vec<String>> {
    let changed = after.diff(before);
    let bad: Vec<&String> = changed.iter().filter(|n| !allowed(n)).collect();
    if !bad.is_empty() {
        return Err(Error::Contract(format!(
            "frozen parameters changed during downstream training: {bad:?}"
        )));
    }
    Ok(changed)
}

/// Mean-pooled fusion vectors of every epoch, one `epochs × mm_dim` matrix per set.
pub fn extract_epoch_vectors(
    model: &FusionModel,
    sets: &[EpochSet],
    chunk: usize,
) -> Result<Vec<Mat>> {
    (0..sets.len())
        .map(|s| {
            let n = sets[s].epochs.len();
            ensure!(n > 0, "subject {} has no epochs", sets[s].subject_id);
            let mut out = Mat::zeros((n, model.cfg.mm_dim));
            for start in (0..n).step_by(chunk.max(1)) {
                let end = (start + chunk.max(1)).min(n);
                let refs: Vec<EpochRef> = (start..end)
                    .map(|e| EpochRef { set: s, epoch: e })
                    .collect();
                let v = model.epoch_vectors(&model.build_batch(sets, &refs)?)?;
                out.slice_mut(ndarray::s![start..end, ..]).assign(&v);
            }
            Ok(out)
        })
        .collect()
}

fn labeled_refs(sets: &[EpochSet], task: Task) -> Vec<EpochRef> {
    crate::data::all_refs(sets)
        .into_iter()
        .filter(|r| task.label(&sets[r.set].epochs[r.epoch]).is_some())
        .collect()
}

fn label_of(sets: &[EpochSet], r: EpochRef, task: Task) -> usize {
    task.label(&sets[r.set].epochs[r.epoch])
        .expect("refs are pre-filtered to labeled epochs")
}

fn chosen_refs(
    train: &[EpochSet],
    task: Task,
    selection: Option<&Selection>,
) -> Result<Vec<EpochRef>> {
    let refs = match selection.and_then(|s| s.get(&task)) {
        Some(sel) => sel
            .iter()
            .copied()
            .filter(|r| task.label(&train[r.set].epochs[r.epoch]).is_some())
            .collect(),
        None => labeled_refs(train, task),
    };
    // Exact-floor subsampling of a small pool can leave a single epoch; the
    // probe then learns a constant prediction.
    ensure!(!refs.is_empty(), "{task}: no labeled training epochs");
    Ok(refs)
}

/// Group test predictions per subject from refs into `test`.
fn per_subject(
    test: &[EpochSet],
    refs: &[EpochRef],
    truth: &[usize],
    pred: &[usize],
) -> Vec<SubjectPredictions> {
    let mut out: Vec<SubjectPredictions> = Vec::new();
    for (i, r) in refs.iter().enumerate() {
        let id = &test[r.set].subject_id;
        if out.last().is_none_or(|p| &p.subject_id != id) {
            out.push(SubjectPredictions {
                subject_id: id.clone(),
                epoch_index: Vec::new(),
                truth: Vec::new(),
                pred: Vec::new(),
            });
        }
        let p = out.last_mut().expect("pushed above");
        p.epoch_index.push(test[r.set].epochs[r.epoch].epoch_index);
        p.truth.push(truth[i]);
        p.pred.push(pred[i]);
    }
    out
}

/// Linear classifier on standardised features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub store: ParamStore,
    layer: Linear,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LinearProbe {
    fn standardize(&self, x: &Mat) -> Mat {
        let mut z = x.clone();
        for mut row in z.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) * self.inv_std[j];
            }
        }
        z
    }

    pub fn logits(&self, x: &Mat) -> Mat {
        let mut g = Graph::new();
        let xv = g.constant(self.standardize(x));
        let y = self.layer.forward(&mut g, &self.store, xv);
        g.value(y).clone()
    }

    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        argmax_rows(&self.logits(x))
    }
}

pub(crate) fn argmax_rows(m: &Mat) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            (0..r.len())
                .max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a)))
                .expect("at least one column")
        })
        .collect()
}

/// Train a linear classifier with AdamW on cross-entropy. Returns the probe
/// and the mean loss of each epoch.
pub fn fit_linear_probe(
    x: &Mat,
    y: &[usize],
    classes: usize,
    spec: &TrainSpec,
    seed: u64,
) -> Result<(LinearProbe, Vec<f64>)> {
    spec.validate()?;
    let (n, d) = x.dim();
    ensure!(
        n == y.len() && n > 0,
        "{n} feature rows but {} labels",
        y.len()
    );
    ensure!(
        y.iter().all(|&c| c < classes),
        "label outside {classes} classes"
    );
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let inv_std: Vec<f64> = (0..d)
        .map(|j| {
            let var = x
                .column(j)
                .iter()
                .map(|v| (v - mean[j]).powi(2))
                .sum::<f64>()
                / n as f64;
            1.0 / var.sqrt().max(1e-8)
        })
        .collect();
    let mut store = ParamStore::new();
    let layer = Linear::new(
        &mut store,
        "probe",
        d,
        classes,
        true,
        &mut rng_for(seed, "probe-init", &[]),
    );
    let mut probe = LinearProbe {
        store,
        layer,
        mean,
        inv_std,
    };
    let z = probe.standardize(x);
    let mut opt = AdamW::new(spec.optimizer())?;
    let mut losses = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        let mut rng = rng_for(seed, "probe-order", &[epoch as u64]);
        let mut total = 0.0;
        let batches = shuffled_batches(n, spec.batch_size, 1, &mut rng);
        for idx in &batches {
            let mut g = Graph::new();
            let xb = g.constant(z.select(ndarray::Axis(0), idx));
            let logits = probe.layer.forward(&mut g, &probe.store, xb);
            let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let loss = g.cross_entropy(logits, &yb, false);
            total += g.scalar(loss);
            let grads = g.backward(loss);
            opt.step(&mut probe.store, &grads);
        }
        losses.push(total / batches.len() as f64);
    }
    Ok((probe, losses))
}

/// Scenario 1: every fusion parameter frozen; one linear classifier per task
/// on mean-pooled fusion features.
pub fn run_scenario1(
    model: &FusionModel,
    train: &[EpochSet],
    test: &[EpochSet],
    tasks: &[Task],
    spec: &TrainSpec,
    seed: u64,
    selection: Option<&Selection>,
) -> Result<Vec<ScenarioOutcome>> {
    let mut frozen = model.clone();
    frozen.store.freeze_all();
    if !frozen.store.trainable_names().is_empty() {
        return Err(Error::Contract(
            "backbone still has trainable parameters in linear probing".into(),
        ));
    }
    let before = frozen.store.clone();
    let chunk = spec.batch_size.clamp(1, 64);
    let train_x = extract_epoch_vectors(&frozen, train, chunk)?;
    let test_x = extract_epoch_vectors(&frozen, test, chunk)?;
    let gather = |feats: &[Mat], refs: &[EpochRef]| {
        Mat::from_shape_fn((refs.len(), frozen.cfg.mm_dim), |(i, j)| {
            feats[refs[i].set][[refs[i].epoch, j]]
        })
    };
    let mut out = Vec::with_capacity(tasks.len());
    for (ti, &task) in tasks.iter().enumerate() {
        let refs = chosen_refs(train, task, selection)?;
        let y: Vec<usize> = refs.iter().map(|&r| label_of(train, r, task)).collect();
        let task_seed = crate::rng::derive_seed(seed, "scenario1-task", &[ti as u64]);
        let (probe, losses) = fit_linear_probe(
            &gather(&train_x, &refs),
            &y,
            task.classes(),
            spec,
            task_seed,
        )?;
        let trefs = labeled_refs(test, task);
        ensure!(
            !trefs.is_empty(),
            "{task}: test split has no labeled epochs"
        );
        let truth: Vec<usize> = trefs.iter().map(|&r| label_of(test, r, task)).collect();
        let pred = probe.predict(&gather(&test_x, &trefs));
        out.push(ScenarioOutcome {
            scenario: Scenario::LinearProbe.as_str().into(),
            task,
            label_fraction: 1.0,
            report: MetricsReport::new(&pred, &truth, task.classes())?,
            predictions: per_subject(test, &trefs, &truth, &pred),
            changed_params: Vec::new(),
            train_loss: losses,
            subsample: None,
        });
    }
    let changed = audit_params(&before, &frozen.store, |_| false)?;
    debug_assert!(changed.is_empty());
    Ok(out)
}

/// Last-block inputs of every epoch of one subject, `epochs · F` rows each.
struct BlockCache {
    residual: Mat,
    attn: Mat,
}

fn build_caches(model: &FusionModel, sets: &[EpochSet], chunk: usize) -> Result<Vec<BlockCache>> {
    let f = model.feature_tokens();
    (0..sets.len())
        .map(|s| {
            let n = sets[s].epochs.len();
            let mut residual = Mat::zeros((n * f, model.cfg.mm_dim));
            let mut attn = Mat::zeros((n * f, model.cfg.mm_dim));
            for start in (0..n).step_by(chunk) {
                let end = (start + chunk).min(n);
                let refs: Vec<EpochRef> = (start..end)
                    .map(|e| EpochRef { set: s, epoch: e })
                    .collect();
                let (r, a) = model.last_block_cache(&model.build_batch(sets, &refs)?)?;
                residual
                    .slice_mut(ndarray::s![start * f..end * f, ..])
                    .assign(&r);
                attn.slice_mut(ndarray::s![start * f..end * f, ..])
                    .assign(&a);
            }
            Ok(BlockCache { residual, attn })
        })
        .collect()
}

/// A window of one subject and its target label.
struct LabeledWindow {
    set: usize,
    epochs: Vec<usize>,
    target: usize,
    label: usize,
}

fn windows_for(
    sets: &[EpochSet],
    refs: &[EpochRef],
    task: Task,
    cfg: &TcmConfig,
) -> Vec<LabeledWindow> {
    let mut per_set: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for r in refs {
        per_set.entry(r.set).or_default().push(r.epoch);
    }
    let mut out = Vec::new();
    for (s, targets) in per_set {
        let all = windowize(sets[s].epochs.len(), cfg.context_length, cfg.target);
        for t in targets {
            let w = &all[t];
            out.push(LabeledWindow {
                set: s,
                epochs: w.epochs.clone(),
                target: w.target,
                label: label_of(sets, EpochRef { set: s, epoch: t }, task),
            });
        }
    }
    out
}

/// Epoch vectors for the distinct epochs used by `windows`, computed from
/// the caches through the live last-block tail, then arranged as the
/// `W · T` rows the TCM expects.
fn window_inputs(
    g: &mut Graph,
    model: &FusionModel,
    store: &ParamStore,
    caches: &[BlockCache],
    windows: &[&LabeledWindow],
) -> crate::autograd::Var {
    let f = model.feature_tokens();
    let d = model.cfg.mm_dim;
    let mut slot: HashMap<(usize, usize), usize> = HashMap::new();
    let mut uniq = Vec::new();
    let mut order = Vec::new();
    for w in windows {
        for &e in &w.epochs {
            let next = uniq.len();
            let i = *slot.entry((w.set, e)).or_insert_with(|| {
                uniq.push((w.set, e));
                next
            });
            order.push(i);
        }
    }
    let mut res = Mat::zeros((uniq.len() * f, d));
    let mut att = Mat::zeros((uniq.len() * f, d));
    for (i, &(s, e)) in uniq.iter().enumerate() {
        let rows = ndarray::s![e * f..(e + 1) * f, ..];
        res.slice_mut(ndarray::s![i * f..(i + 1) * f, ..])
            .assign(&caches[s].residual.slice(rows));
        att.slice_mut(ndarray::s![i * f..(i + 1) * f, ..])
            .assign(&caches[s].attn.slice(rows));
    }
    let (res, att) = (g.constant(res), g.constant(att));
    let tokens = model.finish_from_cache(g, store, res, att);
    let k = g.segment_mean(tokens, &Segments::uniform(uniq.len(), f));
    g.select_rows(k, Arc::new(order))
}

/// Scenario 2: per task, unfreeze only the last multimodal block's attention
/// output projection and train it jointly with a TCM and head over windows of
/// `context_length` consecutive epochs.
#[allow(clippy::too_many_arguments)]
pub fn run_scenario2(
    model: &FusionModel,
    train: &[EpochSet],
    test: &[EpochSet],
    tasks: &[Task],
    spec: &TrainSpec,
    tcm_cfg: &TcmConfig,
    seed: u64,
    selection: Option<&Selection>,
) -> Result<Vec<ScenarioOutcome>> {
    spec.validate()?;
    tcm_cfg.validate()?;
    let chunk = 32;
    let train_cache = build_caches(model, train, chunk)?;
    let test_cache = build_caches(model, test, chunk)?;
    let proj = model.last_attn_projection();
    let allowed = |n: &str| n.starts_with(&proj) || n.starts_with("tcm.");
    let mut out = Vec::with_capacity(tasks.len());
    for (ti, &task) in tasks.iter().enumerate() {
        let mut m = model.clone();
        m.store.freeze_all();
        m.store.set_trainable_where(|n| n.starts_with(&proj));
        let mut init = rng_for(seed, "scenario2-init", &[ti as u64]);
        let tcm = TcmModel::new(
            &mut m.store,
            tcm_cfg,
            m.cfg.mm_dim,
            task.classes(),
            &mut init,
        )?;
        let before = m.store.clone();

        let refs = chosen_refs(train, task, selection)?;
        let windows = windows_for(train, &refs, task, tcm_cfg);
        let mut opt = AdamW::new(spec.optimizer())?;
        if let Some(b) = spec.backbone_lr {
            let ids: Vec<_> = m
                .store
                .entries()
                .filter(|(_, e)| e.name.starts_with(&proj))
                .map(|(id, _)| id)
                .collect();
            for id in ids {
                opt.set_lr_scale(id, b / spec.lr);
            }
        }
        let mut losses = Vec::with_capacity(spec.epochs);
        for epoch in 0..spec.epochs {
            let mut rng = rng_for(seed, "scenario2-order", &[ti as u64, epoch as u64]);
            let batches = shuffled_batches(windows.len(), spec.batch_size, 2, &mut rng);
            let mut total = 0.0;
            for idx in &batches {
                let ws: Vec<&LabeledWindow> = idx.iter().map(|&i| &windows[i]).collect();
                let mut g = Graph::new();
                let k = window_inputs(&mut g, &m, &m.store, &train_cache, &ws);
                let (logits, stats) = tcm.forward(&mut g, &m.store, k, ws.len(), true)?;
                let labels: Vec<usize> = ws.iter().map(|w| w.label).collect();
                let loss = g.cross_entropy(logits, &labels, false);
                let l = g.scalar(loss);
                ensure!(l.is_finite(), "{task}: fine-tuning loss diverged");
                total += l;
                let grads = g.backward(loss);
                opt.step(&mut m.store, &grads);
                if let Some(st) = stats {
                    tcm.update_running(&mut m.store, &st);
                }
            }
            losses.push(total / batches.len() as f64);
        }
        // Training normalises with batch statistics, which hide the drift
        // of the tuned projection; the momentum averages lag behind it.
        // Re-estimate them at the final weights over every training row.
        let mut rows = Vec::with_capacity(windows.len());
        for part in windows.chunks(64) {
            let ws: Vec<&LabeledWindow> = part.iter().collect();
            let mut g = Graph::new();
            let k = window_inputs(&mut g, &m, &m.store, &train_cache, &ws);
            rows.push(g.value(k).clone());
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
        tcm.recalibrate(&mut m.store, &stacked)?;

        let trefs = labeled_refs(test, task);
        ensure!(
            !trefs.is_empty(),
            "{task}: test split has no labeled epochs"
        );
        let twins = windows_for(test, &trefs, task, tcm_cfg);
        let mut pred = Vec::with_capacity(twins.len());
        for part in twins.chunks(64) {
            let ws: Vec<&LabeledWindow> = part.iter().collect();
            let mut g = Graph::new();
            let k = window_inputs(&mut g, &m, &m.store, &test_cache, &ws);
            let (logits, _) = tcm.forward(&mut g, &m.store, k, ws.len(), false)?;
            pred.extend(argmax_rows(g.value(logits)));
        }
        let truth: Vec<usize> = twins.iter().map(|w| w.label).collect();
        debug_assert!(twins
            .iter()
            .zip(&trefs)
            .all(|(w, r)| w.set == r.set && w.target == r.epoch));
        let changed = audit_params(&before, &m.store, allowed)?;
        out.push(ScenarioOutcome {
            scenario: Scenario::FinetuneTcm.as_str().into(),
            task,
            label_fraction: 1.0,
            report: MetricsReport::new(&pred, &truth, task.classes())?,
            predictions: per_subject(test, &trefs, &truth, &pred),
            changed_params: changed,
            train_loss: losses,
            subsample: None,
        });
    }
    Ok(out)
}

/// Scenario 3: draw a subject-grouped, class-stratified subset of the
/// training labels per task, then run scenarios 1 and 2 on it. Context
/// windows may still read unlabeled epochs.
#[allow(clippy::too_many_arguments)]
pub fn run_scenario3(
    model: &FusionModel,
    train: &[EpochSet],
    test: &[EpochSet],
    tasks: &[Task],
    probe_spec: &TrainSpec,
    finetune_spec: &TrainSpec,
    tcm_cfg: &TcmConfig,
    fraction: f64,
    seed: u64,
) -> Result<Vec<ScenarioOutcome>> {
    let mut selection = Selection::new();
    let mut reports = BTreeMap::new();
    for &task in tasks {
        let r = subsample(train, task, fraction, seed)?;
        selection.insert(task, r.selected.clone());
        reports.insert(task, r);
    }
    let mut out = run_scenario1(
        model,
        train,
        test,
        tasks,
        probe_spec,
        seed,
        Some(&selection),
    )?;
    out.extend(run_scenario2(
        model,
        train,
        test,
        tasks,
        finetune_spec,
        tcm_cfg,
        seed,
        Some(&selection),
    )?);
    for o in &mut out {
        o.scenario = format!("{}/{}", Scenario::SemiSupervised, o.scenario);
        o.label_fraction = fraction;
        o.subsample = reports.get(&o.task).cloned();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::tests::toy;
    use crate::signal::{EpochSample, Stage, EPOCH_SAMPLES};
    use rand::Rng as _;

    /// Subjects whose EEG tone and EOG level follow a persistent stage sequence.
    pub(crate) fn cohort(
        model: &FusionModel,
        subjects: usize,
        epochs: usize,
        seed: u64,
    ) -> Vec<EpochSet> {
        let mut rng = rng_for(seed, "cohort", &[]);
        (0..subjects)
            .map(|s| {
                let mut stage = 0usize;
                let epochs = (0..epochs)
                    .map(|i| {
                        if rng.random_bool(0.2) {
                            stage = rng.random_range(0..5);
                        }
                        let f = 1.0 + 2.0 * stage as f64;
                        let eeg: Vec<f32> = (0..EPOCH_SAMPLES)
                            .map(|t| {
                                ((t as f64 * f * 0.01 * std::f64::consts::TAU).sin()
                                    + 0.3 * rng.random_range(-1.0..1.0))
                                    as f32
                            })
                            .collect();
                        let eog: Vec<f32> = (0..EPOCH_SAMPLES)
                            .map(|_| {
                                (0.2 * stage as f64 + 0.3 * rng.random_range(-1.0..1.0)) as f32
                            })
                            .collect();
                        EpochSample {
                            epoch_index: i,
                            signals: vec![eeg, eog],
                            stage: Stage::from_index(stage),
                            apnea: stage == 1,
                            hypopnea: rng.random_bool(0.3),
                        }
                    })
                    .collect();
                EpochSet {
                    subject_id: format!("s{s}"),
                    channels: model.streams.clone(),
                    epochs,
                }
            })
            .collect()
    }

    fn quick(epochs: usize) -> TrainSpec {
        TrainSpec {
            epochs,
            batch_size: 16,
            lr: 1e-2,
            weight_decay: 0.0,
            backbone_lr: None,
            clip_norm: None,
        }
    }

    fn small_tcm() -> TcmConfig {
        TcmConfig {
            context_length: 3,
            ssm: crate::nn::SsmConfig {
                layers: 1,
                d_state: 4,
                d_conv: 2,
                expand: 1,
            },
            ..TcmConfig::default()
        }
    }

    #[test]
    fn separable_features_are_probed_perfectly() {
        let mut rng = rng_for(0, "blobs", &[]);
        let centers = [[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]];
        let y: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let x = Mat::from_shape_fn((300, 3), |(i, j)| {
            centers[y[i]][j] + rng.random_range(-0.5..0.5)
        });
        let spec = TrainSpec {
            epochs: 100,
            batch_size: 32,
            lr: 1e-2,
            weight_decay: 0.0,
            backbone_lr: None,
            clip_norm: None,
        };
        let (probe, losses) = fit_linear_probe(&x, &y, 3, &spec, 0).unwrap();
        let acc = crate::eval::metric_acc(&probe.predict(&x), &y).unwrap();
        assert!(acc >= 0.99, "acc {acc}");
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn scenario1_leaves_the_model_untouched() {
        let (model, _) = toy();
        let sets = cohort(&model, 3, 24, 1);
        let before = model.store.clone();
        let out = run_scenario1(
            &model,
            &sets[..2],
            &sets[2..],
            &Task::ALL,
            &quick(3),
            0,
            None,
        )
        .unwrap();
        assert_eq!(out.len(), 3);
        assert!(model.store.diff(&before).is_empty());
        for o in &out {
            assert!(o.changed_params.is_empty());
            assert_eq!(o.report.count, 24);
            assert_eq!(o.predictions[0].truth.len(), 24);
        }
        let again = run_scenario1(
            &model,
            &sets[..2],
            &sets[2..],
            &Task::ALL,
            &quick(3),
            0,
            None,
        )
        .unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn scenario2_changes_only_allowed_params() {
        let (model, _) = toy();
        let sets = cohort(&model, 3, 20, 2);
        let out = run_scenario2(
            &model,
            &sets[..2],
            &sets[2..],
            &[Task::Stage],
            &quick(1),
            &small_tcm(),
            0,
            None,
        )
        .unwrap();
        let o = &out[0];
        let proj = model.last_attn_projection();
        assert!(!o.changed_params.is_empty());
        assert!(o.changed_params.iter().any(|n| n.starts_with(&proj)));
        assert!(o.changed_params.iter().any(|n| n.starts_with("tcm.head")));
        assert!(o
            .changed_params
            .iter()
            .all(|n| n.starts_with(&proj) || n.starts_with("tcm.")));
        // One prediction per test epoch.
        assert_eq!(o.report.count, 20);
    }

    #[test]
    fn cached_tail_matches_full_forward() {
        let (model, _) = toy();
        let sets = cohort(&model, 1, 5, 3);
        let caches = build_caches(&model, &sets, 2).unwrap();
        let full = extract_epoch_vectors(&model, &sets, 5).unwrap();
        let w = LabeledWindow {
            set: 0,
            epochs: (0..5).collect(),
            target: 4,
            label: 0,
        };
        let mut g = Graph::new();
        let k = window_inputs(&mut g, &model, &model.store, &caches, &[&w]);
        let diff = (g.value(k) - &full[0])
            .mapv(f64::abs)
            .fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn audit_flags_frozen_drift() {
        let (model, _) = toy();
        let mut after = model.store.clone();
        let id = after
            .entries()
            .find(|(_, e)| e.name.starts_with("mm.blocks.0."))
            .map(|(id, _)| id)
            .unwrap();
        after.value_mut(id)[[0, 0]] += 1.0;
        let err = audit_params(&model.store, &after, |n| n.starts_with("tcm.")).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn scenario3_runs_on_a_subset() {
        let (model, _) = toy();
        let sets = cohort(&model, 4, 30, 4);
        let out = run_scenario3(
            &model,
            &sets[..3],
            &sets[3..],
            &[Task::Stage],
            &quick(2),
            &quick(1),
            &small_tcm(),
            0.2,
            0,
        )
        .unwrap();
        assert_eq!(out.len(), 2);
        let sub = out[0].subsample.as_ref().unwrap();
        assert_eq!(sub.target, 18);
        assert!(out
            .iter()
            .all(|o| o.label_fraction == 0.2 && o.scenario.starts_with("semi_supervised/")));
    }

    #[test]
    fn scenario_names() {
        assert_eq!("2".parse::<Scenario>().unwrap(), Scenario::FinetuneTcm);
        assert_eq!(
            "semi_supervised".parse::<Scenario>().unwrap(),
            Scenario::SemiSupervised
        );
        assert!("4".parse::<Scenario>().is_err());
    }
}
