//! Python bindings: run configuration, the pipeline commands over a run
//! directory, trained fusion models, metrics and filtering.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use psg_ssl::config::RunConfig;
use psg_ssl::data::Task;
use psg_ssl::eval::metrics::{metric_acc, metric_kappa, metric_mf1};
use psg_ssl::eval::scenarios::{extract_epoch_vectors, Scenario};
use psg_ssl::fusion::FusionModel;
use psg_ssl::pipeline::{self, CommandReport, RunDir};
use psg_ssl::signal::Modality;
use psg_ssl::Error;

create_exception!(psg_ssl_py, ConfigError, PyValueError);
create_exception!(psg_ssl_py, DependencyError, PyFileNotFoundError);
create_exception!(psg_ssl_py, ContractError, PyException);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) => ConfigError::new_err(msg),
        Error::InvalidInput(_) => PyValueError::new_err(msg),
        Error::Dependency(_) => DependencyError::new_err(msg),
        Error::Contract(_) => ContractError::new_err(msg),
        Error::Corrupt { .. } | Error::Io { .. } => PyRuntimeError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPy<T> for psg_ssl::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any().unbind(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(a) => {
            let items = a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any().unbind()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

fn serialize<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn parse_tasks(tasks: Option<Vec<String>>, cfg: &RunConfig) -> PyResult<Vec<Task>> {
    match tasks {
        Some(t) => t.iter().map(|s| s.parse::<Task>()).collect::<psg_ssl::Result<_>>().py_err(),
        None => Ok(cfg.downstream.tasks.clone()),
    }
}

fn report_paths(r: &CommandReport) -> Vec<String> {
    r.outputs.iter().map(|p| p.display().to_string()).collect()
}

/// Resolved run configuration: defaults, then an optional TOML file, then
/// `key.path=value` overrides.
#[pyclass(name = "RunConfig", module = "psg_ssl_py")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::resolve(path.as_deref(), &overrides).py_err()?;
        Ok(PyRunConfig { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn modalities(&self) -> String {
        self.inner.fusion.modalities.clone()
    }

    #[getter]
    fn tasks(&self) -> Vec<String> {
        self.inner.downstream.tasks.iter().map(|t| t.to_string()).collect()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().py_err()
    }

    /// The configuration as nested dicts.
    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, modalities='{}')", self.inner.seed, self.inner.fusion.modalities)
    }
}

/// A run directory plus the configuration its commands use.
#[pyclass(name = "Pipeline", module = "psg_ssl_py")]
struct PyPipeline {
    cfg: RunConfig,
    dir: RunDir,
}

#[pymethods]
impl PyPipeline {
    #[new]
    fn new(config: &PyRunConfig, out_dir: PathBuf) -> Self {
        PyPipeline {
            cfg: config.inner.clone(),
            dir: RunDir::new(out_dir),
        }
    }

    #[getter]
    fn out_dir(&self) -> String {
        self.dir.root.display().to_string()
    }

    fn gen_synth(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        py.detach(|| pipeline::cmd_gen_synth(&self.cfg, &self.dir)).py_err().map(|r| report_paths(&r))
    }

    fn preprocess(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        py.detach(|| pipeline::cmd_preprocess(&self.cfg, &self.dir)).py_err().map(|r| report_paths(&r))
    }

    #[pyo3(signature = (modality=None))]
    fn pretrain_backbone(&self, py: Python<'_>, modality: Option<String>) -> PyResult<Vec<String>> {
        let m = modality.map(|m| m.parse::<Modality>()).transpose().py_err()?;
        py.detach(|| pipeline::cmd_pretrain_backbone(&self.cfg, &self.dir, m))
            .py_err()
            .map(|r| report_paths(&r))
    }

    fn pretrain_fusion(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        py.detach(|| pipeline::cmd_pretrain_fusion(&self.cfg, &self.dir)).py_err().map(|r| report_paths(&r))
    }

    /// Run a downstream scenario (1, 2, 3 or its name). Returns one dict per
    /// (scenario, task) outcome, predictions included.
    #[pyo3(signature = (scenario, tasks=None))]
    fn train(&self, py: Python<'_>, scenario: &str, tasks: Option<Vec<String>>) -> PyResult<Py<PyAny>> {
        let s: Scenario = scenario.parse().py_err()?;
        let tasks = parse_tasks(tasks, &self.cfg)?;
        let (_, outcomes) = py.detach(|| pipeline::cmd_train(&self.cfg, &self.dir, s, &tasks)).py_err()?;
        serialize(py, &outcomes)
    }

    fn evaluate(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let (_, rows) = py.detach(|| pipeline::cmd_evaluate(&self.cfg, &self.dir)).py_err()?;
        serialize(py, &rows)
    }

    /// `(epoch, accuracy)` for every saved fusion pretraining epoch.
    #[pyo3(signature = (task="stage"))]
    fn knn_probe(&self, py: Python<'_>, task: &str) -> PyResult<Vec<(usize, f64)>> {
        let t: Task = task.parse().py_err()?;
        py.detach(|| pipeline::cmd_knn_probe(&self.cfg, &self.dir, t)).py_err().map(|r| r.1)
    }

    #[pyo3(signature = (scenario="linear_probe"))]
    fn hypnogram(&self, py: Python<'_>, scenario: &str) -> PyResult<Vec<String>> {
        let s: Scenario = scenario.parse().py_err()?;
        py.detach(|| pipeline::cmd_hypnogram(&self.cfg, &self.dir, s)).py_err().map(|r| report_paths(&r))
    }

    fn plot_losses(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        py.detach(|| pipeline::cmd_plot_losses(&self.cfg, &self.dir)).py_err().map(|r| report_paths(&r))
    }

    /// Mask-ratio and α sweeps; returns the ledger rows.
    fn ablate(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let (_, rows) = py.detach(|| pipeline::cmd_ablate(&self.cfg, &self.dir)).py_err()?;
        serialize(py, &rows)
    }

    /// Pooled fusion embeddings of one split (`pretrain`, `train` or `test`)
    /// as `(subject_ids, vectors, labels)`, with labels of `task` (-1 where
    /// the epoch has none).
    #[pyo3(signature = (split="test", task="stage"))]
    fn embeddings(
        &self,
        py: Python<'_>,
        split: &str,
        task: &str,
    ) -> PyResult<(Vec<String>, Vec<Vec<f64>>, Vec<i64>)> {
        let t: Task = task.parse().py_err()?;
        let split = split.to_string();
        py.detach(|| -> psg_ssl::Result<_> {
            let data = pipeline::load_fold(&self.cfg, &self.dir)?;
            let sets = match split.as_str() {
                "pretrain" => data.pretrain,
                "train" => data.train,
                "test" => data.test,
                other => return Err(Error::invalid(format!("unknown split '{other}'"))),
            };
            let model = FusionModel::load(&self.dir.fusion())?;
            let vectors = extract_epoch_vectors(&model, &sets, 64)?;
            let (mut ids, mut rows, mut labels) = (Vec::new(), Vec::new(), Vec::new());
            for (set, v) in sets.iter().zip(&vectors) {
                for (e, row) in set.epochs.iter().zip(v.rows()) {
                    ids.push(set.subject_id.clone());
                    rows.push(row.to_vec());
                    labels.push(t.label(e).map_or(-1, |l| l as i64));
                }
            }
            Ok((ids, rows, labels))
        })
        .py_err()
    }
}

/// A pretrained fusion model loaded from its checkpoint.
#[pyclass(name = "FusionModel", module = "psg_ssl_py")]
struct PyFusionModel {
    inner: FusionModel,
}

#[pymethods]
impl PyFusionModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        FusionModel::load(&path).py_err().map(|inner| PyFusionModel { inner })
    }

    #[getter]
    fn modalities(&self) -> String {
        self.inner.cfg.modalities.clone()
    }

    /// Channel name of every input stream, in order.
    #[getter]
    fn streams(&self) -> Vec<String> {
        self.inner.streams.iter().map(|c| c.name.clone()).collect()
    }

    #[getter]
    fn tokens_per_stream(&self) -> usize {
        self.inner.tokens_per_stream()
    }

    #[getter]
    fn num_values(&self) -> usize {
        self.inner.store.num_values()
    }

    #[pyo3(signature = (trainable_only=false))]
    fn param_names(&self, trainable_only: bool) -> Vec<String> {
        self.inner
            .store
            .entries()
            .filter(|(_, e)| !trainable_only || e.trainable)
            .map(|(_, e)| e.name.clone())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "FusionModel(modalities='{}', streams={}, values={})",
            self.inner.cfg.modalities,
            self.inner.streams.len(),
            self.inner.store.num_values()
        )
    }
}

/// `{"acc", "mf1", "kappa"}` of integer predictions against the truth.
#[pyfunction]
fn metrics(py: Python<'_>, pred: Vec<usize>, truth: Vec<usize>) -> PyResult<Py<PyAny>> {
    let d = PyDict::new(py);
    d.set_item("acc", metric_acc(&pred, &truth).py_err()?)?;
    d.set_item("mf1", metric_mf1(&pred, &truth).py_err()?)?;
    d.set_item("kappa", metric_kappa(&pred, &truth).py_err()?)?;
    Ok(d.into_any().unbind())
}

/// Zero-phase Butterworth band-pass of a 100 Hz signal.
#[pyfunction]
fn bandpass(signal: Vec<f64>, low_hz: f64, high_hz: f64) -> PyResult<Vec<f64>> {
    psg_ssl::signal::bandpass(&signal, low_hz, high_hz).py_err()
}

#[pymodule]
fn psg_ssl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyFusionModel>()?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(bandpass, m)?)?;
    let py = m.py();
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DependencyError", py.get_type::<DependencyError>())?;
    m.add("ContractError", py.get_type::<ContractError>())?;
    Ok(())
}
