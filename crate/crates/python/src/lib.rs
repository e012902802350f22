//! Python bindings: configuration, in-memory training, run directories,
//! schedule calibration and the corruption suite. Structured results are
//! returned as plain Python dicts and lists.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ::advprop::bench::{corrupt as corrupt_image, corruption_suite_eval, evaluate_accuracy, standard_suite, CorruptionSpec, CorruptionType};
use ::advprop::config::{ExperimentConfig, PAdv};
use ::advprop::data::Dataset;
use ::advprop::experiment::{epoch_record, load_data, new_trainer, train_epoch};
use ::advprop::ledger::{audit, BudgetModel};
use ::advprop::report::cmd_report;
use ::advprop::run::{cmd_cost_audit, cmd_eval, cmd_train, reference_errors, EvalData, TrainOptions};
use ::advprop::schedule::{calibrate_schedule as calibrate, cost_factor, schedule_for, Schedule};
use ::advprop::tensor::{Precision, Scalar};
use ::advprop::trainer::Trainer as CoreTrainer;
use ::advprop::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Converts any serializable value into Python objects via `json`.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn overrides(map: Option<HashMap<String, String>>) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = map.unwrap_or_default().into_iter().collect();
    v.sort();
    v
}

/// An experiment configuration.
#[pyclass(name = "Config", module = "advprop_py", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses TOML text (empty for defaults) with `key -> value` overrides.
    #[new]
    #[pyo3(signature = (toml = "", overrides = None))]
    fn new(toml: &str, overrides: Option<HashMap<String, String>>) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml_with(toml, &self::overrides(overrides)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = None))]
    fn load(path: PathBuf, overrides: Option<HashMap<String, String>>) -> PyResult<Self> {
        let inner = ExperimentConfig::load(&path, &self::overrides(overrides)).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn with_overrides(&self, overrides: HashMap<String, String>) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml_with(&self.inner.to_toml(), &self::overrides(Some(overrides)))
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.train.mode.to_string()
    }

    #[getter]
    fn p_adv(&self) -> String {
        self.inner.train.p_adv.to_string()
    }

    #[getter]
    fn total_batch(&self) -> usize {
        self.inner.train.total_batch()
    }

    /// Per-epoch cost relative to vanilla, as an exact fraction string.
    #[getter]
    fn cost_factor(&self) -> String {
        cost_factor(&self.inner.train).to_string()
    }

    /// `(effective_epochs, decay_epochs)` this configuration trains with.
    fn schedule(&self) -> PyResult<(usize, Vec<usize>)> {
        let s = schedule_for(&self.inner.train).map_err(py_err)?;
        Ok((s.effective_epochs, s.effective_decay_epochs))
    }

    fn __repr__(&self) -> String {
        format!("Config(mode={}, p_adv={})", self.inner.train.mode, self.inner.train.p_adv)
    }
}

enum Inner {
    F32(CoreTrainer<f32>),
    F64(CoreTrainer<f64>),
}

/// In-memory trainer over the configuration's generated data.
#[pyclass(name = "Trainer", module = "advprop_py")]
struct PyTrainer {
    cfg: ExperimentConfig,
    schedule: Schedule,
    train: Dataset,
    test: Dataset,
    inner: Inner,
}

fn epoch_dict<'py, T: Scalar>(
    py: Python<'py>,
    t: &mut CoreTrainer<T>,
    data: &Dataset,
    epoch: usize,
    lr: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let start = std::time::Instant::now();
    let (m, _) = train_epoch(t, data, epoch, lr).map_err(py_err)?;
    let rec = epoch_record("python", t, epoch, lr, &m, None, start.elapsed().as_secs_f64());
    to_py(py, &rec)
}

fn eval_dict<'py, T: Scalar>(
    py: Python<'py>,
    t: &CoreTrainer<T>,
    data: &Dataset,
    corruption_seed: Option<u64>,
    batch: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let clean = evaluate_accuracy(&t.net, data, batch).map_err(py_err)?;
    let suite = corruption_seed
        .map(|s| corruption_suite_eval(&t.net, data, &standard_suite(s), None, batch))
        .transpose()
        .map_err(py_err)?;
    to_py(py, &serde_json::json!({ "clean_accuracy": clean, "corruption": suite }))
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let (train, test) = load_data(&cfg).map_err(py_err)?;
        let schedule = schedule_for(&cfg.train).map_err(py_err)?;
        let inner = match cfg.precision {
            Precision::F32 => Inner::F32(new_trainer(&cfg, &train).map_err(py_err)?),
            Precision::F64 => Inner::F64(new_trainer(&cfg, &train).map_err(py_err)?),
        };
        Ok(Self { cfg, schedule, train, test, inner })
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.schedule.effective_epochs
    }

    #[getter]
    fn steps_done(&self) -> u64 {
        match &self.inner {
            Inner::F32(t) => t.steps_done,
            Inner::F64(t) => t.steps_done,
        }
    }

    /// Pass-units recorded so far in training passes.
    #[getter]
    fn ledger_total(&self) -> u64 {
        match &self.inner {
            Inner::F32(t) => t.ledger.training_total(),
            Inner::F64(t) => t.ledger.training_total(),
        }
    }

    /// Trains epoch `epoch` at its scheduled learning rate; returns the
    /// epoch's metrics record.
    fn train_epoch<'py>(&mut self, py: Python<'py>, epoch: usize) -> PyResult<Bound<'py, PyAny>> {
        let lr = self.schedule.lr_at(epoch, self.cfg.train.lr, self.cfg.train.lr_decay);
        match &mut self.inner {
            Inner::F32(t) => epoch_dict(py, t, &self.train, epoch, lr),
            Inner::F64(t) => epoch_dict(py, t, &self.train, epoch, lr),
        }
    }

    /// Clean test accuracy, plus the corruption suite when a seed is given.
    #[pyo3(signature = (corruption_seed = None))]
    fn evaluate<'py>(&self, py: Python<'py>, corruption_seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        let batch = self.cfg.eval.batch_size;
        match &self.inner {
            Inner::F32(t) => eval_dict(py, t, &self.test, corruption_seed, batch),
            Inner::F64(t) => eval_dict(py, t, &self.test, corruption_seed, batch),
        }
    }

    /// Audits the ledger so far against the cost formula.
    fn audit<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let model = BudgetModel {
            mode: self.cfg.train.mode,
            n: self.train.len() as u64,
            k: self.cfg.train.attack.steps,
            p_adv: self.cfg.train.p_adv,
        };
        let ledger = match &self.inner {
            Inner::F32(t) => &t.ledger,
            Inner::F64(t) => &t.ledger,
        };
        to_py(py, &audit(ledger, &model).map_err(py_err)?)
    }
}

/// `(effective_epochs, decay_epochs)` after dividing by `1 + p_adv·steps`.
#[pyfunction]
fn calibrate_schedule(base_epochs: usize, decay_epochs: Vec<usize>, p_adv: &str, steps: u32) -> PyResult<(usize, Vec<usize>)> {
    let p: PAdv = p_adv.parse().map_err(py_err)?;
    let s = calibrate(base_epochs, &decay_epochs, p, steps).map_err(py_err)?;
    Ok((s.effective_epochs, s.effective_decay_epochs))
}

/// Trains into a run directory. Returns the run summary, or `None` when
/// `stop_after` ended the run early.
#[pyfunction]
#[pyo3(signature = (config, out, resume = false, reference = None, stop_after = None))]
fn train<'py>(
    py: Python<'py>,
    config: &PyConfig,
    out: PathBuf,
    resume: bool,
    reference: Option<PathBuf>,
    stop_after: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = TrainOptions { resume, reference, stop_after };
    let summary = py.detach(|| cmd_train(&config.inner, &out, &opts)).map_err(py_err)?;
    to_py(py, &summary)
}

/// Read-only evaluation of a checkpoint on a configuration's test split.
#[pyfunction]
#[pyo3(signature = (checkpoint, config, corruption_seed = None, reference = None))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    config: &PyConfig,
    corruption_seed: Option<u64>,
    reference: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let reference = reference.as_deref().map(reference_errors).transpose().map_err(py_err)?;
    let data = EvalData::Config(config.inner.clone());
    let batch = config.inner.eval.batch_size;
    let scores = cmd_eval(&checkpoint, &data, corruption_seed, reference.as_ref(), batch).map_err(py_err)?;
    to_py(py, &scores)
}

#[pyfunction]
fn cost_audit<'py>(py: Python<'py>, run_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &cmd_cost_audit(&run_dir).map_err(py_err)?)
}

/// Comparison table over run directories, as CSV text.
#[pyfunction]
#[pyo3(signature = (dirs, reference = None))]
fn report(dirs: Vec<PathBuf>, reference: Option<PathBuf>) -> PyResult<String> {
    Ok(cmd_report(&dirs, reference.as_deref().map(Path::new)).map_err(py_err)?.to_csv())
}

/// Corrupts one flattened `(C, H, W)` image.
#[pyfunction]
#[pyo3(signature = (image, shape, kind, severity, seed, index = 0))]
fn corrupt(image: Vec<f32>, shape: (usize, usize, usize), kind: &str, severity: u8, seed: u64, index: u64) -> PyResult<Vec<f32>> {
    let kind: CorruptionType = serde_json::from_value(serde_json::Value::String(kind.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown corruption `{kind}`")))?;
    let spec = CorruptionSpec::new(kind, severity, seed).map_err(py_err)?;
    corrupt_image(&image, shape, &spec, index).map_err(py_err)
}

#[pymodule]
pub fn advprop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(calibrate_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(cost_audit, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt, m)?)?;
    Ok(())
}
