//! Python module `mfgnet`.

use std::path::PathBuf;

use mfgnet_core::checkpoint::Checkpoint;
use mfgnet_core::config::RunConfig;
use mfgnet_core::environments::{self, ExperimentKind};
use mfgnet_core::run;
use mfgnet_core::trainer::HistoryRow;
use mfgnet_core::validation;
use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: mfgnet_core::Error) -> PyErr {
    match e {
        mfgnet_core::Error::Config { .. }
        | mfgnet_core::Error::Dimension { .. }
        | mfgnet_core::Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// A `dim x n` matrix whose columns are the given points.
fn columns(points: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let dim = points.first().map_or(0, Vec::len);
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(PyValueError::new_err("points must be a non-empty list of equal-length lists"));
    }
    Ok(Array2::from_shape_fn((dim, points.len()), |(i, j)| points[j][i]))
}

/// Resolved run configuration.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml_str(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        RunConfig::from_path(&path).map(|inner| Self { inner }).map_err(err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn experiment(&self) -> String {
        self.inner.experiment.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn nu(&self) -> f64 {
        self.inner.nu
    }

    #[getter]
    fn iterations(&self) -> u64 {
        self.inner.iterations
    }

    #[setter]
    fn set_iterations(&mut self, n: u64) {
        self.inner.iterations = n;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.inner.output_dir = dir;
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(experiment={:?}, dim={}, nu={}, iterations={})",
            self.inner.experiment, self.inner.dim, self.inner.nu, self.inner.iterations
        )
    }
}

fn row_dict<'py>(py: Python<'py>, row: &HistoryRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iter", row.iter)?;
    d.set_item("l0", row.l0)?;
    d.set_item("lt", row.lt)?;
    d.set_item("lhjb", row.lhjb)?;
    d.set_item("monitor_residual", row.monitor_residual)?;
    d.set_item("rel_error_phi", row.rel_error_phi)?;
    d.set_item("rel_error_rho", row.rel_error_rho)?;
    Ok(d)
}

/// Trains into `config.output_dir` and returns the logged history rows.
#[pyfunction]
#[pyo3(signature = (config, resume = false))]
fn train<'py>(py: Python<'py>, config: &PyRunConfig, resume: bool) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config.inner.clone();
    let out = py.detach(|| run::run_training(&cfg, resume)).map_err(err)?;
    out.rows.iter().map(|r| row_dict(py, r)).collect()
}

/// Trajectory CSV text (`sample_id,t,x_1,...,x_d`) for a saved checkpoint.
#[pyfunction]
#[pyo3(signature = (checkpoint, config, n_samples = 100, n_times = 16))]
fn export_trajectories(checkpoint: PathBuf, config: &PyRunConfig, n_samples: usize, n_times: usize) -> PyResult<String> {
    let ck = Checkpoint::load(&checkpoint).map_err(err)?;
    let mut buf = Vec::new();
    run::export_trajectories(&ck, &config.inner, n_samples, n_times, &mut buf).map_err(err)?;
    String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Relative errors of an analytic-experiment checkpoint; also appended to its history.
#[pyfunction]
fn validate<'py>(py: Python<'py>, checkpoint: PathBuf, config: &PyRunConfig) -> PyResult<Bound<'py, PyDict>> {
    let ck = Checkpoint::load(&checkpoint).map_err(err)?;
    let cfg = config.inner.clone();
    let report = py.detach(|| run::validate_checkpoint(&ck, &cfg)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("rel_error_phi", report.rel_error_phi)?;
    d.set_item("rel_error_rho", report.rel_error_rho)?;
    d.set_item("points", report.points)?;
    Ok(d)
}

/// Closed-form stationary solution with quadratic Hamiltonian and entropy interaction.
#[pyclass(name = "AnalyticSolution")]
struct PyAnalyticSolution {
    inner: validation::AnalyticSolution,
}

#[pymethods]
impl PyAnalyticSolution {
    #[new]
    #[pyo3(signature = (gamma, nu = 1.0, beta = 1.0, dim = 2))]
    fn new(gamma: f64, nu: f64, beta: f64, dim: usize) -> PyResult<Self> {
        validation::AnalyticSolution::new(gamma, nu, beta, dim)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    fn phi(&self, x: Vec<f64>, t: f64) -> PyResult<f64> {
        self.check(&x)?;
        Ok(self.inner.phi(&x, t))
    }

    fn rho(&self, x: Vec<f64>) -> PyResult<f64> {
        self.check(&x)?;
        Ok(self.inner.rho(&x))
    }
}

impl PyAnalyticSolution {
    fn check(&self, x: &[f64]) -> PyResult<()> {
        if x.len() != self.inner.dim {
            return Err(PyValueError::new_err(format!(
                "expected a point of dimension {}, got {}",
                self.inner.dim,
                x.len()
            )));
        }
        Ok(())
    }
}

/// Gaussian kernel density estimate with Scott bandwidth.
#[pyclass(name = "KdeEstimator")]
struct PyKde {
    inner: validation::KdeEstimator,
}

#[pymethods]
impl PyKde {
    /// `samples` is a list of points; `scale` defaults to the pooled sample deviation.
    #[new]
    #[pyo3(signature = (samples, scale = None))]
    fn new(samples: Vec<Vec<f64>>, scale: Option<f64>) -> PyResult<Self> {
        let arr = columns(&samples)?;
        let inner = match scale {
            Some(s) => validation::KdeEstimator::new(arr, s),
            None => validation::KdeEstimator::scott(arr),
        }
        .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn bandwidth(&self) -> f64 {
        self.inner.bandwidth()
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale()
    }

    fn density(&self, q: Vec<f64>) -> PyResult<f64> {
        self.inner.density(&q).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction]
#[pyo3(signature = (c, p, eps = 1e-3))]
fn hamiltonian_norm(c: f64, p: Vec<f64>, eps: f64) -> f64 {
    environments::hamiltonian_norm(c, &p, eps)
}

#[pyfunction]
#[pyo3(signature = (x, p, mass = 0.5, gravity = 9.81))]
fn quadcopter_hamiltonian(x: Vec<f64>, p: Vec<f64>, mass: f64, gravity: f64) -> PyResult<f64> {
    environments::quadcopter_hamiltonian(&x, &p, mass, gravity).map_err(err)
}

#[pyfunction]
fn relative_error(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    validation::relative_error(&pred, &truth).map_err(err)
}

/// `(name, description)` for every experiment.
#[pyfunction]
fn list_experiments() -> Vec<(&'static str, &'static str)> {
    ExperimentKind::ALL.iter().map(|k| (k.name(), k.describe())).collect()
}

#[pymodule]
fn mfgnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyAnalyticSolution>()?;
    m.add_class::<PyKde>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(export_trajectories, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(hamiltonian_norm, m)?)?;
    m.add_function(wrap_pyfunction!(quadcopter_hamiltonian, m)?)?;
    m.add_function(wrap_pyfunction!(relative_error, m)?)?;
    m.add_function(wrap_pyfunction!(list_experiments, m)?)?;
    Ok(())
}
