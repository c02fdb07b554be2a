//! Python bindings: the policy parameters, single augmentation ops, the
//! Neumann inverse-Hessian product on an explicit matrix, and the CLI
//! operations (`train`, `verify`, `export_policy`).
//!
//! Structured results (configs, metrics, snapshots) cross the boundary as
//! JSON and come back as plain Python dicts and lists.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

use hyperaug::augment::{self, OpKind};
use hyperaug::cli::config::load_config as load_run_config;
use hyperaug::cli::{self, verify, Failure};
use hyperaug::hypergrad::{self, HypergradConfig};
use hyperaug::models::ModelSpec;
use hyperaug::policy::PolicyParams;
use hyperaug::{Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e.root() {
        Error::Config { .. }
        | Error::InvalidInput(_)
        | Error::Shape { .. }
        | Error::BufferLength { .. }
        | Error::Dimension { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn failure_to_py(f: Failure) -> PyErr {
    match f {
        Failure::Usage(e) => PyValueError::new_err(e.to_string()),
        Failure::Runtime(e) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_object<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn overrides(set: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(d) = set {
        for (k, v) in d.iter() {
            // Values are re-parsed as TOML; Python's `True` is not TOML.
            let raw = match v.extract::<bool>() {
                Ok(b) if v.is_instance_of::<PyBool>() => b.to_string(),
                _ => v.str()?.extract::<String>()?,
            };
            out.push((k.extract::<String>()?, raw));
        }
    }
    Ok(out)
}

/// Augmentation policy parameters: per stage, op-selection logits,
/// magnitude logits and probability logits.
#[pyclass(name = "Policy", module = "hyperaug")]
pub struct Policy {
    inner: PolicyParams,
}

#[pymethods]
impl Policy {
    #[new]
    #[pyo3(signature = (stages = 2, temperature = 0.05))]
    fn new(stages: usize, temperature: f64) -> PyResult<Self> {
        Ok(Self {
            inner: PolicyParams::new(stages, temperature).map_err(to_py)?,
        })
    }

    #[getter]
    fn num_stages(&self) -> usize {
        self.inner.num_stages()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn flatten(&self) -> Vec<f64> {
        self.inner.flatten()
    }

    fn set_flat(&mut self, flat: Vec<f64>) -> PyResult<()> {
        self.inner.set_flat(&flat).map_err(to_py)
    }

    /// Effective probabilities: `pi` (op choice), `mu` (magnitudes) and `p`
    /// (application probabilities) per stage.
    #[pyo3(signature = (epoch = 0))]
    fn snapshot<'py>(&self, py: Python<'py>, epoch: usize) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner.snapshot(epoch))
    }

    /// Samples a policy draw from `seed` and applies it to a `(B, C, H, W)`
    /// batch given as a flat list.
    fn apply(&self, images: Vec<f64>, shape: [usize; 4], seed: u64) -> PyResult<Vec<f64>> {
        let x = Tensor::new(&shape, images).map_err(to_py)?;
        let out = self.inner.sample_and_apply(&x, seed).map_err(to_py)?;
        Ok(out.data().to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Policy(stages={}, num_params={})", self.inner.num_stages(), self.inner.num_params())
    }
}

/// Names of the fourteen augmentation ops, in parameter order.
#[pyfunction]
pub fn op_names() -> Vec<&'static str> {
    OpKind::ALL.iter().map(|k| k.name()).collect()
}

/// Applies one augmentation op with magnitude `mu` in `[0, 1]` to a flat
/// `(B, C, H, W)` batch.
#[pyfunction]
pub fn apply_op(name: &str, images: Vec<f64>, shape: [usize; 4], mu: f64) -> PyResult<Vec<f64>> {
    let kind: OpKind = name.parse().map_err(to_py)?;
    let x = Tensor::new(&shape, images).map_err(to_py)?;
    let out = augment::apply_op(kind, &x, &Tensor::scalar(mu)).map_err(to_py)?;
    Ok(out.data().to_vec())
}

/// Neumann approximation of `H⁻¹ v` for an explicit symmetric matrix `H`.
#[pyfunction]
#[pyo3(signature = (matrix, v, alpha, terms))]
pub fn neumann_inverse(matrix: Vec<Vec<f64>>, v: Vec<f64>, alpha: f64, terms: usize) -> PyResult<Vec<f64>> {
    let n = v.len();
    if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err(format!("matrix must be {n}x{n}")));
    }
    let cfg = HypergradConfig {
        alpha,
        neumann_terms: terms,
        ..Default::default()
    };
    let hvp = |p: &[f64]| Ok(matrix.iter().map(|row| row.iter().zip(p).map(|(a, b)| a * b).sum()).collect());
    Ok(hypergrad::neumann_series(hvp, &v, &cfg).map_err(to_py)?.value)
}

/// Parameter count of the small CNN for an input `(C, H, W)`.
#[pyfunction]
pub fn smallcnn_num_params(input: [usize; 3], num_classes: usize) -> usize {
    ModelSpec::smallcnn(input, num_classes).num_params()
}

/// Synthetic labelled blobs: `{"shape", "num_classes", "images", "labels"}`.
#[pyfunction]
fn synth_dataset<'py>(py: Python<'py>, n: usize, classes: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let d = hyperaug::data::synth_dataset(n, classes, seed).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("shape", d.shape)?;
    out.set_item("num_classes", d.num_classes)?;
    out.set_item("images", d.images)?;
    out.set_item("labels", d.labels)?;
    Ok(out)
}

/// Resolves a run configuration (file, then `RA_SEED`, then `overrides`).
#[pyfunction]
#[pyo3(signature = (path = None, overrides = None))]
fn load_config<'py>(
    py: Python<'py>,
    path: Option<PathBuf>,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let env = std::env::var(hyperaug::cli::config::SEED_ENV).ok();
    let cfg = load_run_config(path.as_deref(), &self::overrides(overrides)?, env.as_deref()).map_err(to_py)?;
    to_object(py, &cfg)
}

/// Trains one run, writing the usual artefacts into `out`, and returns the
/// per-epoch records.
#[pyfunction]
#[pyo3(signature = (out, config = None, overrides = None))]
fn train<'py>(
    py: Python<'py>,
    out: PathBuf,
    config: Option<PathBuf>,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let env = std::env::var(hyperaug::cli::config::SEED_ENV).ok();
    let cfg = load_run_config(config.as_deref(), &self::overrides(overrides)?, env.as_deref()).map_err(to_py)?;
    let metrics = cli::train_into(&cfg, &out).map_err(failure_to_py)?;
    to_object(py, &metrics.records)
}

/// Runs the numerical self-checks; returns `(name, passed, detail)` tuples.
#[pyfunction]
pub fn run_checks() -> Vec<(String, bool, String)> {
    verify::run_checks().into_iter().map(|c| (c.name.to_string(), c.passed, c.detail)).collect()
}

/// Writes `policy_evolution.csv` for a run directory and returns its path.
#[pyfunction]
#[pyo3(signature = (run_dir, out = None))]
fn export_policy(run_dir: PathBuf, out: Option<PathBuf>) -> PyResult<PathBuf> {
    cli::export_policy(&run_dir, out.as_deref().map(Path::new)).map_err(failure_to_py)
}

#[pymodule]
#[pyo3(name = "hyperaug")]
fn hyperaug_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(op_names, m)?)?;
    m.add_function(wrap_pyfunction!(apply_op, m)?)?;
    m.add_function(wrap_pyfunction!(neumann_inverse, m)?)?;
    m.add_function(wrap_pyfunction!(smallcnn_num_params, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    m.add_function(wrap_pyfunction!(export_policy, m)?)?;
    Ok(())
}
