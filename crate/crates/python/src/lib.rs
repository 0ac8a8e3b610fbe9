//! Python bindings for the lorasc lab.
//!
//! Matrices cross the boundary as lists of rows; structured results come back as plain dicts.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use lorasc::adapter::{ema_update, init_pair, LoraPair};
use lorasc::eval::{load_report, ReportFormat, DEFAULT_TAU};
use lorasc::harness::commands::{cmd_ablate, cmd_inspect, cmd_rank};
use lorasc::harness::{cmd_evaluate, cmd_train, parse_config, parse_config_str, RunConfig, TrainOptions};
use lorasc::numkit::{Matrix, RngState};

create_exception!(lorasc_py, LorascError, PyException, "Base class for lorasc errors.");
create_exception!(lorasc_py, ConfigError, LorascError, "Bad configuration, argument or schema.");
create_exception!(lorasc_py, TrainingError, LorascError, "Training, numeric or contract failure.");
create_exception!(lorasc_py, StorageError, LorascError, "File, checkpoint integrity or version failure.");

fn py_err(e: lorasc::Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 => ConfigError::new_err(msg),
        4 => StorageError::new_err(msg),
        _ => TrainingError::new_err(msg),
    }
}

trait OrPy<T> {
    fn or_py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for lorasc::Result<T> {
    fn or_py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Serializable value to native Python objects, via the stdlib json module.
fn to_py<'py, S: Serialize>(py: Python<'py>, value: &S) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| LorascError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn to_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Matrix<f64>> {
    Matrix::from_rows(&rows).map_err(|e| ConfigError::new_err(format!("{what}: {e}")))
}

/// A validated run configuration.
#[pyclass(name = "Config", module = "lorasc_py")]
pub struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Builds from `key = value` text or a file, then applies `overrides` (values are passed through `str`).
    #[new]
    #[pyo3(signature = (text=None, path=None, overrides=None))]
    fn new(text: Option<&str>, path: Option<PathBuf>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut kv = Vec::new();
        if let Some(d) = overrides {
            for (k, v) in d.iter() {
                kv.push((k.extract::<String>()?, v.str()?.to_string()));
            }
        }
        let inner = match (text, path) {
            (Some(_), Some(_)) => return Err(ConfigError::new_err("pass either text or path, not both")),
            (_, Some(p)) => parse_config(Some(&p), &kv),
            (t, None) => parse_config_str(t.unwrap_or(""), &kv, None),
        }
        .or_py()?;
        Ok(PyConfig { inner })
    }

    /// Sets one key and revalidates; the config is unchanged on error.
    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, &value.str()?.to_string()).or_py()?;
        next.validate().or_py()?;
        self.inner = next;
        Ok(())
    }

    fn to_text(&self) -> String {
        self.inner.to_kv_string()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.cascade.alpha
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.cascade.lambda
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.cascade.rank
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.cascade.epochs
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(ladder={}, alpha={}, lambda={}, rank={}, epochs={}, seeds={:?})",
            self.inner.cascade.ladder.name(),
            self.inner.cascade.alpha,
            self.inner.cascade.lambda,
            self.inner.cascade.rank,
            self.inner.cascade.epochs,
            self.inner.seeds
        )
    }
}

/// A LoRA factor pair `(A, B)` with scaling `s`; its delta is `s·B·A`.
#[pyclass(name = "LoraPair", module = "lorasc_py")]
pub struct PyLoraPair {
    inner: LoraPair<f64>,
}

#[pymethods]
impl PyLoraPair {
    #[new]
    #[pyo3(signature = (a, b, scaling=1.0, target="adapter"))]
    fn new(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, scaling: f64, target: &str) -> PyResult<Self> {
        let inner = LoraPair::from_parts(target, from_rows(a, "a")?, from_rows(b, "b")?, scaling).or_py()?;
        Ok(PyLoraPair { inner })
    }

    /// Fresh pair for a `d × k` weight: uniform A, zero B.
    #[staticmethod]
    #[pyo3(signature = (d, k, r, scaling=1.0, seed=0, target="adapter"))]
    fn init(d: usize, k: usize, r: usize, scaling: f64, seed: u64, target: &str) -> PyResult<Self> {
        let inner = init_pair(target, d, k, r, scaling, &mut RngState::new(seed)).or_py()?;
        Ok(PyLoraPair { inner })
    }

    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.a())
    }

    #[getter]
    fn b(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.b())
    }

    #[getter]
    fn scaling(&self) -> f64 {
        self.inner.scaling()
    }

    #[getter]
    fn target(&self) -> &str {
        self.inner.target()
    }

    fn delta(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.delta())
    }

    /// `alpha · self + (1 − alpha) · fast`, factor by factor.
    fn ema(&self, fast: &PyLoraPair, alpha: f64) -> PyResult<PyLoraPair> {
        Ok(PyLoraPair {
            inner: ema_update(&self.inner, &fast.inner, alpha).or_py()?,
        })
    }

    fn __repr__(&self) -> String {
        let (d, r) = self.inner.b().shape();
        format!("LoraPair(target={:?}, d={d}, k={}, r={r})", self.inner.target(), self.inner.a().cols())
    }
}

/// Number of singular values above `tau · σ₁`.
#[pyfunction]
#[pyo3(signature = (matrix, tau=DEFAULT_TAU))]
fn effective_rank(matrix: Vec<Vec<f64>>, tau: f64) -> PyResult<usize> {
    lorasc::eval::effective_rank(&from_rows(matrix, "matrix")?, tau).or_py()
}

/// Trains every seed of `config`; returns one summary dict per seed.
#[pyfunction]
#[pyo3(signature = (config, resume=None, stop_after_epoch=None))]
fn train<'py>(
    py: Python<'py>,
    config: &PyConfig,
    resume: Option<PathBuf>,
    stop_after_epoch: Option<usize>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config.inner.clone();
    let opts = TrainOptions { resume, stop_after_epoch };
    let outcomes = py.detach(move || cmd_train(&cfg, &opts)).or_py()?;
    outcomes
        .into_iter()
        .map(|o| {
            let d = PyDict::new(py);
            d.set_item("seed", o.seed)?;
            d.set_item("dir", o.dir)?;
            d.set_item("metrics", o.metrics)?;
            d.set_item("checkpoint", o.checkpoint)?;
            d.set_item("finished", o.finished)?;
            d.set_item("final_val_loss", o.final_val_loss)?;
            Ok(d)
        })
        .collect()
}

/// Runs the four-level ablation ladder over the configured seeds.
#[pyfunction]
fn ablate<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let out = py.detach(move || cmd_ablate(&cfg)).or_py()?;
    let d = PyDict::new(py);
    d.set_item("report_path", out.report_path)?;
    d.set_item("run_dirs", out.run_dirs)?;
    d.set_item("rows", to_py(py, &out.report.rows)?)?;
    d.set_item("summary", to_py(py, &out.report.summary)?)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (checkpoint, out=None))]
fn evaluate<'py>(py: Python<'py>, checkpoint: PathBuf, out: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let records = py.detach(|| cmd_evaluate(&checkpoint, out.as_deref())).or_py()?;
    to_py(py, &records)
}

#[pyfunction]
#[pyo3(signature = (checkpoint, tau=DEFAULT_TAU))]
fn rank<'py>(py: Python<'py>, checkpoint: PathBuf, tau: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &cmd_rank(&checkpoint, tau).or_py()?)
}

#[pyfunction]
fn inspect<'py>(py: Python<'py>, checkpoint: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &cmd_inspect(&checkpoint).or_py()?)
}

/// Reads a metrics file; the format follows the extension.
#[pyfunction]
fn load_metrics<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let format: ReportFormat = ext.parse().or_py()?;
    to_py(py, &load_report(&path, format).or_py()?)
}

#[pymodule]
pub fn lorasc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("LorascError", py.get_type::<LorascError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("TrainingError", py.get_type::<TrainingError>())?;
    m.add("StorageError", py.get_type::<StorageError>())?;
    m.add("DEFAULT_TAU", DEFAULT_TAU)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyLoraPair>()?;
    m.add_function(wrap_pyfunction!(effective_rank, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(inspect, m)?)?;
    m.add_function(wrap_pyfunction!(load_metrics, m)?)?;
    Ok(())
}
