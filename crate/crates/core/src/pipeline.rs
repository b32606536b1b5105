//! The operator commands as library functions over a run directory.
//!
//! Layout under the run directory:
//!
//! ```text
//! raw/                      generated recordings (manifest.toml + .f32)
//! epochs/                   preprocessed epoch store (index.json + .epochs)
//! splits.json               subject-group fold plan
//! backbone/<m>.ckpt         pretrained per-modality backbones (+ _loss.csv)
//! fusion/fusion.ckpt        pretrained fusion model (+ loss.csv)
//! fusion/epochs/NNN.ckpt    fusion checkpoint after each pretraining epoch
//! downstream/<scenario>[_<fraction>]/[<inner>/]<task>/
//!                           outcome.json, predictions/<subject>.csv
//! results.csv               results ledger
//! evaluation.csv            metrics recomputed from the predictions
//! knn/knn_<task>.{csv,svg}  k-NN probing series over pretraining epochs
//! hypnograms/               per-subject hypnograms (.csv + .svg)
//! plots/<name>_loss.svg     pretraining loss curves
//! ablation/                 sweep ledger.csv, mask_ratio.svg, alpha.svg
//! runs.csv                  last run of each command
//! resolved/<command>.toml   resolved configuration of each command
//! ```
//!
//! Byte layouts are documented in `docs/FORMATS.md`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain_backbone, BackboneModel};
use crate::config::RunConfig;
use crate::data::{parse_modalities, Task};
use crate::error::{Error, Result};
use crate::eval::hypnogram::Hypnogram;
use crate::eval::knn::probe_accuracy;
use crate::eval::ledger::{upsert_ledger, LedgerRow};
use crate::eval::metrics::{majority_baseline, MetricsReport};
use crate::eval::scenarios::{
    extract_epoch_vectors, run_scenario1, run_scenario2, run_scenario3, Scenario, ScenarioOutcome, SubjectPredictions,
};
use crate::eval::splits::{make_splits, Fold, SplitPlan};
use crate::fusion::{pretrain_fusion, FusionModel};
use crate::plot::{write_line_chart, Series};
use crate::signal::{preprocess_record, EpochSet, Modality, Stage};
use crate::store::{read_epoch_store, read_records, write_epoch_store, write_records};
use crate::synth::generate;
use crate::train::{epoch_means, read_loss_log, write_loss_log, LossRecord};

/// Paths of the artifacts inside one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn raw(&self) -> PathBuf {
        self.root.join("raw")
    }
    pub fn epochs(&self) -> PathBuf {
        self.root.join("epochs")
    }
    pub fn splits(&self) -> PathBuf {
        self.root.join("splits.json")
    }
    pub fn backbone(&self, m: Modality) -> PathBuf {
        self.root.join("backbone").join(format!("{m}.ckpt"))
    }
    pub fn backbone_loss(&self, m: Modality) -> PathBuf {
        self.root.join("backbone").join(format!("{m}_loss.csv"))
    }
    pub fn fusion(&self) -> PathBuf {
        self.root.join("fusion").join("fusion.ckpt")
    }
    pub fn fusion_loss(&self) -> PathBuf {
        self.root.join("fusion").join("loss.csv")
    }
    pub fn fusion_epochs(&self) -> PathBuf {
        self.root.join("fusion").join("epochs")
    }
    pub fn downstream(&self) -> PathBuf {
        self.root.join("downstream")
    }
    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    if let Some(parent) = p.parent() {
        mkdir(parent)?;
    }
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn require(p: &Path, what: &str, producer: &str) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(format!(
            "{what} not found at {}; run `{producer}` first",
            p.display()
        )))
    }
}

/// What a command produced, for the caller to report.
#[derive(Clone, Debug, Default)]
pub struct CommandReport {
    pub outputs: Vec<PathBuf>,
    pub lines: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RunRecord {
    command: String,
    seed: u64,
    config: String,
    outputs: String,
}

/// Snapshot the resolved config and record the command in `runs.csv`.
fn finish(dir: &RunDir, command: &str, cfg: &RunConfig, report: &CommandReport) -> Result<()> {
    let cfg_path = dir.root.join("resolved").join(format!("{command}.toml"));
    write_text(&cfg_path, &cfg.to_toml_string()?)?;
    let runs = dir.root.join("runs.csv");
    let mut rows: Vec<RunRecord> = if runs.exists() {
        let mut r = csv::Reader::from_path(&runs).map_err(|e| crate::train::csv_err(&runs, e))?;
        r.deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::corrupt(&runs, e.to_string()))?
    } else {
        Vec::new()
    };
    rows.retain(|r| r.command != command);
    let rel = |p: &Path| p.strip_prefix(&dir.root).unwrap_or(p).display().to_string();
    rows.push(RunRecord {
        command: command.to_string(),
        seed: cfg.seed,
        config: rel(&cfg_path),
        outputs: report.outputs.iter().map(|p| rel(p)).collect::<Vec<_>>().join(";"),
    });
    let mut w = csv::Writer::from_path(&runs).map_err(|e| crate::train::csv_err(&runs, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| crate::train::csv_err(&runs, e))?;
    }
    w.flush().map_err(|e| Error::io(&runs, e))
}

pub fn cmd_gen_synth(cfg: &RunConfig, dir: &RunDir) -> Result<CommandReport> {
    let records = generate(&cfg.synth)?;
    let raw = dir.raw();
    mkdir(&raw)?;
    write_records(&raw, &records)?;
    let report = CommandReport {
        outputs: vec![raw],
        lines: vec![format!(
            "generated {} subjects x {} epochs",
            records.len(),
            cfg.synth.epochs_per_subject
        )],
    };
    finish(dir, "gen-synth", cfg, &report)?;
    Ok(report)
}

pub fn cmd_preprocess(cfg: &RunConfig, dir: &RunDir) -> Result<CommandReport> {
    require(&dir.raw().join(crate::store::RECORD_MANIFEST), "raw recordings", "gen-synth")?;
    let records = read_records(&dir.raw())?;
    let sets = records
        .iter()
        .map(|r| preprocess_record(r, &cfg.preprocess))
        .collect::<Result<Vec<_>>>()?;
    let out = dir.epochs();
    mkdir(&out)?;
    write_epoch_store(&out, &sets)?;
    let epochs: usize = sets.iter().map(|s| s.epochs.len()).sum();
    let report = CommandReport {
        outputs: vec![out],
        lines: vec![format!("preprocessed {} subjects into {epochs} epochs", sets.len())],
    };
    finish(dir, "preprocess", cfg, &report)?;
    Ok(report)
}

/// Epoch sets of one fold, split by role.
pub struct FoldData {
    pub fold: Fold,
    pub pretrain: Vec<EpochSet>,
    pub train: Vec<EpochSet>,
    pub test: Vec<EpochSet>,
}

/// Load the epoch store and split it by the configured fold. The plan is
/// written to `splits.json`.
pub fn load_fold(cfg: &RunConfig, dir: &RunDir) -> Result<FoldData> {
    require(&dir.epochs().join("index.json"), "epoch store", "preprocess")?;
    let sets = read_epoch_store(&dir.epochs())?;
    let ids: Vec<String> = sets.iter().map(|s| s.subject_id.clone()).collect();
    let plan: SplitPlan = make_splits(&ids, cfg.eval.fold_count, cfg.eval.pretrain_ratio, cfg.seed)?;
    write_text(
        &dir.splits(),
        &serde_json::to_string_pretty(&plan).expect("plan serialises"),
    )?;
    let fold = plan.folds[cfg.eval.fold].clone();
    let (mut pretrain, mut train, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for s in sets {
        if fold.test.contains(&s.subject_id) {
            test.push(s);
        } else if fold.train.contains(&s.subject_id) {
            train.push(s);
        } else {
            pretrain.push(s);
        }
    }
    Ok(FoldData {
        fold,
        pretrain,
        train,
        test,
    })
}

fn fusion_modalities(cfg: &RunConfig) -> Result<Vec<Modality>> {
    let mut ms: Vec<Modality> = parse_modalities(&cfg.fusion.modalities)?.into_iter().map(|p| p.0).collect();
    ms.sort();
    Ok(ms)
}

/// Pretrain one backbone per modality of `fusion.modalities` (or only `only`)
/// on the fold's pretraining subjects.
pub fn cmd_pretrain_backbone(cfg: &RunConfig, dir: &RunDir, only: Option<Modality>) -> Result<CommandReport> {
    let data = load_fold(cfg, dir)?;
    let mods = match only {
        Some(m) => vec![m],
        None => fusion_modalities(cfg)?,
    };
    mkdir(&dir.root.join("backbone"))?;
    let mut report = CommandReport::default();
    for m in mods {
        let (model, log) = pretrain_backbone(m, &data.pretrain, &cfg.backbone, cfg.seed, |_, _| Ok(()))?;
        model.save(&dir.backbone(m))?;
        write_loss_log(&dir.backbone_loss(m), &log)?;
        report.outputs.push(dir.backbone(m));
        report.outputs.push(dir.backbone_loss(m));
        report.lines.push(format!(
            "{m} backbone: {} steps, final loss {:.4}",
            log.len(),
            log.last().map_or(f64::NAN, |r| r.total)
        ));
    }
    finish(dir, "pretrain-backbone", cfg, &report)?;
    Ok(report)
}

fn load_backbones(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<BackboneModel>> {
    fusion_modalities(cfg)?
        .into_iter()
        .map(|m| {
            let p = dir.backbone(m);
            require(&p, &format!("{m} backbone checkpoint"), "pretrain-backbone")?;
            BackboneModel::load(&p)
        })
        .collect()
}

fn epoch_ckpt(dir: &RunDir, epoch: usize) -> PathBuf {
    dir.fusion_epochs().join(format!("{epoch:03}.ckpt"))
}

/// Fusion pretraining with the given config; saves per-epoch checkpoints
/// when `per_epoch_dir` is set.
fn train_fusion(
    cfg: &RunConfig,
    data: &FoldData,
    backbones: &[BackboneModel],
    per_epoch: Option<&RunDir>,
) -> Result<(FusionModel, Vec<LossRecord>)> {
    let channels = &data
        .pretrain
        .first()
        .ok_or_else(|| Error::invalid("fold has no pretraining subjects"))?
        .channels;
    let model = FusionModel::from_backbones(&cfg.fusion, channels, backbones, cfg.seed)?;
    pretrain_fusion(model, &data.pretrain, cfg.seed, |epoch, m| match per_epoch {
        Some(d) => m.save(&epoch_ckpt(d, epoch)),
        None => Ok(()),
    })
}

pub fn cmd_pretrain_fusion(cfg: &RunConfig, dir: &RunDir) -> Result<CommandReport> {
    let data = load_fold(cfg, dir)?;
    let backbones = load_backbones(cfg, dir)?;
    mkdir(&dir.fusion_epochs())?;
    let (model, log) = train_fusion(cfg, &data, &backbones, Some(dir))?;
    model.save(&dir.fusion())?;
    write_loss_log(&dir.fusion_loss(), &log)?;
    let report = CommandReport {
        outputs: vec![dir.fusion(), dir.fusion_loss(), dir.fusion_epochs()],
        lines: vec![format!(
            "fusion {}: {} steps, final loss {:.4}",
            model.cfg.modalities,
            log.len(),
            log.last().map_or(f64::NAN, |r| r.total)
        )],
    };
    finish(dir, "pretrain-fusion", cfg, &report)?;
    Ok(report)
}

fn load_fusion(dir: &RunDir) -> Result<FusionModel> {
    require(&dir.fusion(), "fusion checkpoint", "pretrain-fusion")?;
    FusionModel::load(&dir.fusion())
}

/// Directory of one outcome: `downstream/<scenario>[_<fraction>]/<task>`.
pub fn outcome_dir(dir: &RunDir, o: &ScenarioOutcome) -> PathBuf {
    let mut parts = o.scenario.split('/');
    let head = parts.next().unwrap_or_default();
    let mut p = if o.label_fraction < 1.0 {
        dir.downstream().join(format!("{head}_{}", o.label_fraction))
    } else {
        dir.downstream().join(head)
    };
    for rest in parts {
        p = p.join(rest);
    }
    p.join(o.task.as_str())
}

fn ledger_rows(run: &str, fold: usize, outcomes: &[ScenarioOutcome], modalities: &str) -> Vec<LedgerRow> {
    outcomes
        .iter()
        .map(|o| LedgerRow {
            run: run.to_string(),
            fold,
            scenario: o.scenario.clone(),
            task: o.task.as_str().to_string(),
            modalities: modalities.to_string(),
            label_fraction: o.label_fraction,
            acc: o.report.acc,
            mf1: o.report.mf1,
            kappa: o.report.kappa,
            n: o.report.count,
        })
        .collect()
}

fn write_outcomes(dir: &RunDir, outcomes: &[ScenarioOutcome]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for o in outcomes {
        let od = outcome_dir(dir, o);
        let pd = od.join("predictions");
        mkdir(&pd)?;
        for p in &o.predictions {
            write_text(&pd.join(format!("{}.csv", p.subject_id)), &p.to_csv())?;
        }
        let path = od.join("outcome.json");
        write_text(&path, &serde_json::to_string_pretty(o).expect("outcome serialises"))?;
        written.push(path);
    }
    Ok(written)
}

/// Run one evaluation scenario for `tasks` on the configured fold and
/// record the results.
pub fn cmd_train(cfg: &RunConfig, dir: &RunDir, scenario: Scenario, tasks: &[Task]) -> Result<(CommandReport, Vec<ScenarioOutcome>)> {
    let f = cfg.eval.label_fraction;
    if scenario == Scenario::SemiSupervised && f >= 1.0 {
        return Err(Error::Config(
            "scenario 3 needs eval.label_fraction below 1 (e.g. --label-fraction 0.05)".into(),
        ));
    }
    let data = load_fold(cfg, dir)?;
    let model = load_fusion(dir)?;
    let d = &cfg.downstream;
    let outcomes = match scenario {
        Scenario::LinearProbe => run_scenario1(&model, &data.train, &data.test, tasks, &d.linear_probe, cfg.seed, None)?,
        Scenario::FinetuneTcm => run_scenario2(&model, &data.train, &data.test, tasks, &d.finetune, &d.tcm, cfg.seed, None)?,
        Scenario::SemiSupervised => {
            run_scenario3(&model, &data.train, &data.test, tasks, &d.linear_probe, &d.finetune, &d.tcm, f, cfg.seed)?
        }
    };
    let mut report = CommandReport {
        outputs: write_outcomes(dir, &outcomes)?,
        lines: Vec::new(),
    };
    upsert_ledger(&dir.results(), &ledger_rows("train", cfg.eval.fold, &outcomes, &model.cfg.modalities))?;
    report.outputs.push(dir.results());
    for o in &outcomes {
        let truth: Vec<usize> = o.predictions.iter().flat_map(|p| p.truth.iter().copied()).collect();
        report.lines.push(format!(
            "{} {}: acc {:.4} mf1 {:.4} kappa {:.4} (n={}, majority {:.4})",
            o.scenario,
            o.task,
            o.report.acc,
            o.report.mf1,
            o.report.kappa,
            o.report.count,
            majority_baseline(&truth)
        ));
    }
    finish(dir, &format!("train-{}", scenario.as_str()), cfg, &report)?;
    Ok((report, outcomes))
}

fn read_predictions(path: &Path) -> Result<SubjectPredictions> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::train::csv_err(path, e))?;
    let subject_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    let mut p = SubjectPredictions {
        subject_id,
        epoch_index: Vec::new(),
        truth: Vec::new(),
        pred: Vec::new(),
    };
    for row in r.deserialize::<(usize, usize, usize)>() {
        let (e, t, q) = row.map_err(|e| Error::corrupt(path, e.to_string()))?;
        p.epoch_index.push(e);
        p.truth.push(t);
        p.pred.push(q);
    }
    Ok(p)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Every directory below `root` holding a `predictions/` folder.
fn prediction_dirs(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for p in sorted_entries(root)? {
        if p.is_dir() {
            if p.join("predictions").is_dir() {
                out.push(p.clone());
            }
            if p.file_name().is_some_and(|n| n != "predictions") {
                prediction_dirs(&p, out)?;
            }
        }
    }
    Ok(())
}

/// One recomputed metrics row per saved prediction set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub outcome: String,
    pub task: String,
    pub acc: f64,
    pub mf1: f64,
    pub kappa: f64,
    pub n: usize,
}

/// Recompute metrics from the saved per-subject predictions.
pub fn cmd_evaluate(cfg: &RunConfig, dir: &RunDir) -> Result<(CommandReport, Vec<EvaluationRow>)> {
    require(&dir.downstream(), "downstream predictions", "train")?;
    let mut dirs = Vec::new();
    prediction_dirs(&dir.downstream(), &mut dirs)?;
    let mut rows = Vec::new();
    for d in dirs {
        let task: Task = d
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .parse()?;
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for f in sorted_entries(&d.join("predictions"))? {
            let p = read_predictions(&f)?;
            pred.extend(p.pred);
            truth.extend(p.truth);
        }
        let r = MetricsReport::new(&pred, &truth, task.classes())?;
        rows.push(EvaluationRow {
            outcome: d
                .strip_prefix(dir.downstream())
                .unwrap_or(&d)
                .display()
                .to_string(),
            task: task.as_str().into(),
            acc: r.acc,
            mf1: r.mf1,
            kappa: r.kappa,
            n: r.count,
        });
    }
    let out = dir.root.join("evaluation.csv");
    let mut w = csv::Writer::from_path(&out).map_err(|e| crate::train::csv_err(&out, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| crate::train::csv_err(&out, e))?;
    }
    w.flush().map_err(|e| Error::io(&out, e))?;
    let report = CommandReport {
        outputs: vec![out],
        lines: rows
            .iter()
            .map(|r| format!("{}: acc {:.4} mf1 {:.4} kappa {:.4} (n={})", r.outcome, r.acc, r.mf1, r.kappa, r.n))
            .collect(),
    };
    finish(dir, "evaluate", cfg, &report)?;
    Ok((report, rows))
}

fn labeled_matrix(feats: &[crate::autograd::Mat], sets: &[EpochSet], task: Task) -> (crate::autograd::Mat, Vec<usize>) {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (s, set) in sets.iter().enumerate() {
        for (e, ep) in set.epochs.iter().enumerate() {
            if let Some(l) = task.label(ep) {
                rows.push((s, e));
                y.push(l);
            }
        }
    }
    let d = feats.first().map_or(0, |f| f.ncols());
    let m = crate::autograd::Mat::from_shape_fn((rows.len(), d), |(i, j)| feats[rows[i].0][[rows[i].1, j]]);
    (m, y)
}

/// k-NN accuracy of one fusion checkpoint: PCA fitted on the train split,
/// cosine k-NN scored on the test split.
pub fn knn_accuracy(model: &FusionModel, data: &FoldData, task: Task, k: usize, pca_dims: usize) -> Result<f64> {
    let tr = extract_epoch_vectors(model, &data.train, 64)?;
    let te = extract_epoch_vectors(model, &data.test, 64)?;
    let (x, y) = labeled_matrix(&tr, &data.train, task);
    let (xt, yt) = labeled_matrix(&te, &data.test, task);
    probe_accuracy(&x, &y, &xt, &yt, k, pca_dims)
}

/// Per-epoch k-NN probing series over the saved fusion checkpoints.
pub fn cmd_knn_probe(cfg: &RunConfig, dir: &RunDir, task: Task) -> Result<(CommandReport, Vec<(usize, f64)>)> {
    let data = load_fold(cfg, dir)?;
    require(&dir.fusion_epochs(), "per-epoch fusion checkpoints", "pretrain-fusion")?;
    let ckpts: Vec<PathBuf> = sorted_entries(&dir.fusion_epochs())?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    if ckpts.is_empty() {
        return Err(Error::Dependency(format!(
            "no checkpoints in {}; run `pretrain-fusion` first",
            dir.fusion_epochs().display()
        )));
    }
    let mut series = Vec::with_capacity(ckpts.len());
    for p in &ckpts {
        let epoch: usize = p
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::corrupt(p, "checkpoint name is not an epoch number"))?;
        let model = FusionModel::load(p)?;
        series.push((epoch, knn_accuracy(&model, &data, task, cfg.eval.knn_k, cfg.eval.pca_dims)?));
    }
    let out = dir.root.join("knn");
    mkdir(&out)?;
    let csv_path = out.join(format!("knn_{task}.csv"));
    let mut text = String::from("epoch,accuracy\n");
    for (e, a) in &series {
        text.push_str(&format!("{e},{a}\n"));
    }
    write_text(&csv_path, &text)?;
    let svg = out.join(format!("knn_{task}.svg"));
    write_line_chart(
        &svg,
        &format!("k-NN probing ({task}, k={}, pca={})", cfg.eval.knn_k, cfg.eval.pca_dims),
        "pretraining epoch",
        "accuracy",
        &[Series {
            label: "k-NN acc".into(),
            points: series.iter().map(|&(e, a)| (e as f64, a)).collect(),
        }],
    )?;
    let report = CommandReport {
        outputs: vec![csv_path, svg],
        lines: series.iter().map(|(e, a)| format!("epoch {e}: acc {a:.4}")).collect(),
    };
    finish(dir, "knn-probe", cfg, &report)?;
    Ok((report, series))
}

/// Render hypnograms from the saved stage predictions of a scenario.
pub fn cmd_hypnogram(cfg: &RunConfig, dir: &RunDir, scenario: Scenario) -> Result<CommandReport> {
    let sub = match scenario {
        Scenario::SemiSupervised => dir
            .downstream()
            .join(format!("{}_{}", scenario.as_str(), cfg.eval.label_fraction))
            .join(Scenario::LinearProbe.as_str()),
        s => dir.downstream().join(s.as_str()),
    };
    let pred_dir = sub.join(Task::Stage.as_str()).join("predictions");
    require(&pred_dir, &format!("{scenario} stage predictions"), "train --task stage")?;
    let out = dir.root.join("hypnograms");
    let mut report = CommandReport::default();
    for f in sorted_entries(&pred_dir)? {
        let p = read_predictions(&f)?;
        let to_stage = |v: &[usize]| -> Result<Vec<Stage>> {
            v.iter()
                .map(|&i| Stage::from_index(i).ok_or_else(|| Error::corrupt(&f, format!("stage index {i}"))))
                .collect()
        };
        let h = Hypnogram::new(&p.subject_id, p.epoch_index.clone(), to_stage(&p.truth)?, to_stage(&p.pred)?)?;
        let stem = format!("{}_{}", scenario.as_str(), p.subject_id);
        h.write(&out, &stem)?;
        report.outputs.push(out.join(format!("{stem}.svg")));
        report.lines.push(format!(
            "{}: {} epochs, {} errors",
            p.subject_id,
            h.len(),
            h.errors.len()
        ));
    }
    finish(dir, "hypnogram", cfg, &report)?;
    Ok(report)
}

fn loss_series(log: &[LossRecord]) -> Vec<Series> {
    let means = epoch_means(log);
    let pick = |label: &str, f: fn(&(usize, f64, f64, f64)) -> f64| Series {
        label: label.into(),
        points: means.iter().map(|m| (m.0 as f64, f(m))).collect(),
    };
    vec![pick("recon", |m| m.1), pick("contra", |m| m.2), pick("total", |m| m.3)]
}

/// Loss curves (per-epoch means) of every pretraining log present.
pub fn cmd_plot_losses(cfg: &RunConfig, dir: &RunDir) -> Result<CommandReport> {
    let mut logs: Vec<(String, PathBuf)> = Modality::ALL
        .iter()
        .map(|&m| (format!("{m} backbone"), dir.backbone_loss(m)))
        .collect();
    logs.push(("fusion".into(), dir.fusion_loss()));
    let present: Vec<_> = logs.into_iter().filter(|(_, p)| p.exists()).collect();
    if present.is_empty() {
        return Err(Error::Dependency(
            "no loss logs found; run `pretrain-backbone` or `pretrain-fusion` first".into(),
        ));
    }
    mkdir(&dir.plots())?;
    let mut report = CommandReport::default();
    for (name, p) in present {
        let log = read_loss_log(&p)?;
        let out = dir.plots().join(format!("{}_loss.svg", name.replace(' ', "_")));
        write_line_chart(&out, &format!("{name} pretraining loss"), "epoch", "loss", &loss_series(&log))?;
        report.lines.push(format!("{name}: {} steps plotted", log.len()));
        report.outputs.push(out);
    }
    finish(dir, "plot-losses", cfg, &report)?;
    Ok(report)
}

/// Mask-ratio and α sweeps: fusion pretraining plus linear probing per
/// point, with a ledger and one plot per sweep.
pub fn cmd_ablate(cfg: &RunConfig, dir: &RunDir) -> Result<(CommandReport, Vec<LedgerRow>)> {
    let data = load_fold(cfg, dir)?;
    let backbones = load_backbones(cfg, dir)?;
    let out = dir.root.join("ablation");
    mkdir(&out)?;
    let ledger = out.join("ledger.csv");
    let tasks = &cfg.downstream.tasks;
    let mut all_rows = Vec::new();
    let mut report = CommandReport::default();
    let sweeps: [(&str, &Vec<f64>); 2] = [("mask_ratio", &cfg.ablation.mask_ratios), ("alpha", &cfg.ablation.alphas)];
    for (name, values) in sweeps {
        let mut points: Vec<(Task, f64, f64)> = Vec::new();
        for &v in values {
            let mut c = cfg.clone();
            match name {
                "mask_ratio" => c.fusion.mask_ratio = v,
                _ => c.fusion.alpha = v,
            }
            c.fusion.validate()?;
            let (model, _) = train_fusion(&c, &data, &backbones, None)?;
            let outcomes = run_scenario1(&model, &data.train, &data.test, tasks, &c.downstream.linear_probe, c.seed, None)?;
            let rows = ledger_rows(&format!("ablate-{name}={v}"), c.eval.fold, &outcomes, &c.fusion.modalities);
            upsert_ledger(&ledger, &rows)?;
            for o in &outcomes {
                points.push((o.task, v, o.report.acc));
                report.lines.push(format!("{name}={v} {}: acc {:.4}", o.task, o.report.acc));
            }
            all_rows.extend(rows);
        }
        let series: Vec<Series> = tasks
            .iter()
            .map(|&t| Series {
                label: t.as_str().into(),
                points: points.iter().filter(|p| p.0 == t).map(|p| (p.1, p.2)).collect(),
            })
            .collect();
        let svg = out.join(format!("{name}.svg"));
        write_line_chart(&svg, &format!("{name} sweep (linear probe)"), name, "accuracy", &series)?;
        report.outputs.push(svg);
    }
    report.outputs.push(ledger);
    finish(dir, "ablate", cfg, &report)?;
    Ok((report, all_rows))
}
