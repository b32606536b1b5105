//! Layered run configuration: built-in defaults, then a TOML file, then
//! `key.path=value` overrides. Unknown keys are rejected by name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::eval::scenarios::TrainSpec;
use crate::fusion::FusionConfig;
use crate::signal::PreprocessConfig;
use crate::synth::SynthSpec;
use crate::tcm::TcmConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub tasks: Vec<Task>,
    pub linear_probe: TrainSpec,
    pub finetune: TrainSpec,
    pub tcm: TcmConfig,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            tasks: Task::ALL.to_vec(),
            linear_probe: TrainSpec::linear_probe(),
            finetune: TrainSpec::finetune(),
            tcm: TcmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fold_count: usize,
    /// Which fold of the plan a run uses.
    pub fold: usize,
    /// Share of the non-test subjects used for self-supervised pretraining.
    pub pretrain_ratio: f64,
    pub label_fraction: f64,
    pub knn_k: usize,
    pub pca_dims: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fold_count: 5,
            fold: 0,
            pretrain_ratio: 0.8,
            label_fraction: 1.0,
            knn_k: 5,
            pca_dims: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub mask_ratios: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            mask_ratios: vec![0.2, 0.4, 0.6, 0.8],
            alphas: vec![0.0, 0.5, 1.0, 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    pub preprocess: PreprocessConfig,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub downstream: DownstreamConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthSpec::default(),
            preprocess: PreprocessConfig::default(),
            backbone: BackboneConfig::default(),
            fusion: FusionConfig::default(),
            downstream: DownstreamConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse the right-hand side of an override as a TOML value, falling back
/// to a bare string (so `--set fusion.modalities=eeg1+eog1` works unquoted).
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key '{path}'")));
    }
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{path}': '{k}' is not inside a section")))?;
        node = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("'{path}' does not name a setting inside a section")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Resolve defaults ← `file` ← `overrides` (each `a.b.c=value`).
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::Config(format!("cannot serialise defaults: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::Dependency(format!("config file {} not found", path.display())),
                _ => Error::io(path, e),
            })?;
            let parsed: toml::Value = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
            merge(&mut value, parsed);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not of the form key=value")))?;
            set_path(&mut value, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::InvalidInput(m) => Error::Config(format!("{section}: {m}")),
                other => other,
            })
        };
        wrap("synth", self.synth.validate())?;
        wrap("backbone", self.backbone.validate())?;
        wrap("fusion", self.fusion.validate())?;
        wrap("downstream.linear_probe", self.downstream.linear_probe.validate())?;
        wrap("downstream.finetune", self.downstream.finetune.validate())?;
        wrap("downstream.tcm", self.downstream.tcm.validate())?;
        if self.downstream.tasks.is_empty() {
            return Err(Error::Config("downstream.tasks is empty".into()));
        }
        let e = &self.eval;
        if e.fold >= e.fold_count {
            return Err(Error::Config(format!("eval.fold {} is outside {} folds", e.fold, e.fold_count)));
        }
        if !(e.label_fraction > 0.0 && e.label_fraction <= 1.0) {
            return Err(Error::Config(format!("eval.label_fraction must lie in (0, 1], got {}", e.label_fraction)));
        }
        if e.knn_k == 0 || e.pca_dims == 0 {
            return Err(Error::Config("eval.knn_k and eval.pca_dims must be positive".into()));
        }
        Ok(())
    }
}
