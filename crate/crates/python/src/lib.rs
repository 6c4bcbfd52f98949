//! Python bindings: experiment configs, runs and saved checkpoints.

use std::path::PathBuf;

use nalgebra::DMatrix;
use odvff_core::config::ExperimentConfig;
use odvff_core::error::Error;
use odvff_core::runner::{resolve_output_dir, run_experiment, Checkpoint};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(odvff, OdvffError, PyException);
create_exception!(odvff, ConfigError, OdvffError);
create_exception!(odvff, DataError, OdvffError);
create_exception!(odvff, NumericalError, OdvffError);

fn to_py(e: Error) -> PyErr {
    let msg = match e.field() {
        Some(f) => format!("{f}: {e}"),
        None => e.to_string(),
    };
    match e.kind() {
        "config" => ConfigError::new_err(msg),
        "data" => DataError::new_err(msg),
        "numerical" => NumericalError::new_err(msg),
        "input" => PyValueError::new_err(msg),
        _ => OdvffError::new_err(msg),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]))
}

/// A validated experiment definition.
#[pyclass(name = "ExperimentConfig", module = "odvff", frozen)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml(text).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn replications(&self) -> usize {
        self.inner.replications
    }

    #[getter]
    fn methods(&self) -> Vec<(String, usize, usize)> {
        self.inner
            .methods
            .iter()
            .map(|m| (m.method.name().to_string(), m.n_beta, m.n_gamma))
            .collect()
    }

    /// Runs every method and replication. Returns the output directory, one
    /// dict per successful run and one per failed run.
    #[pyo3(signature = (out=None, jobs=1))]
    fn run<'py>(&self, py: Python<'py>, out: Option<PathBuf>, jobs: usize) -> PyResult<Bound<'py, PyDict>> {
        let dir = resolve_output_dir(&self.inner, out.as_deref());
        let report = py.detach(|| run_experiment(&self.inner, &dir, jobs)).map_err(to_py)?;
        let records = report
            .records
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("method", &r.method)?;
                d.set_item("n_beta", r.n_beta)?;
                d.set_item("n_gamma", r.n_gamma)?;
                d.set_item("seed", r.seed)?;
                d.set_item("log_lik", r.log_lik)?;
                d.set_item("rmse", r.rmse)?;
                d.set_item("coverage", r.coverage)?;
                d.set_item("seconds", r.seconds)?;
                Ok(d)
            })
            .collect::<PyResult<Vec<_>>>()?;
        let failures = report
            .failures
            .iter()
            .map(|f| {
                let d = PyDict::new(py);
                d.set_item("method", &f.method)?;
                d.set_item("n_beta", f.n_beta)?;
                d.set_item("n_gamma", f.n_gamma)?;
                d.set_item("seed", f.seed)?;
                d.set_item("error", &f.error)?;
                Ok(d)
            })
            .collect::<PyResult<Vec<_>>>()?;
        let result = PyDict::new(py);
        result.set_item("out_dir", report.out_dir)?;
        result.set_item("records", records)?;
        result.set_item("failures", failures)?;
        Ok(result)
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentConfig(name={:?}, methods={}, replications={})",
            self.inner.name,
            self.inner.methods.len(),
            self.inner.replications
        )
    }
}

/// A trained model saved by a run, with its data standardization.
#[pyclass(name = "Checkpoint", module = "odvff", frozen)]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.method.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    /// Hyperparameter name to value, on the natural (not log) scale.
    #[getter]
    fn hyperparameters(&self) -> Vec<(String, f64)> {
        let m = &self.inner.model;
        m.hyperparameter_names()
            .into_iter()
            .zip(m.hyperparameters())
            .map(|(n, v)| (n.trim_start_matches("log_").to_string(), v.exp()))
            .collect()
    }

    /// Test metrics as (log_lik, rmse, coverage), if the run finished.
    #[getter]
    fn metrics(&self) -> Option<(f64, f64, Option<f64>)> {
        self.inner.metrics.map(|m| (m.log_lik, m.rmse, m.coverage))
    }

    /// Predictive latent mean and variance at rows of `x`, in the original
    /// data units.
    fn predict(&self, py: Python<'_>, x: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let x = matrix(x)?;
        let pred = py.detach(|| self.inner.predict(&x)).map_err(to_py)?;
        Ok((pred.mean.as_slice().to_vec(), pred.variance.as_slice().to_vec()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(method={:?}, n_beta={}, n_gamma={}, seed={})",
            self.inner.method.method.name(),
            self.inner.method.n_beta,
            self.inner.method.n_gamma,
            self.inner.seed
        )
    }
}

#[pymodule]
fn odvff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("OdvffError", py.get_type::<OdvffError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("NumericalError", py.get_type::<NumericalError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_become_matrix_rows() {
        let m = matrix(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(m.shape(), (3, 2));
        assert_eq!(m[(2, 1)], 6.0);
        assert!(matrix(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert_eq!(matrix(Vec::new()).unwrap().nrows(), 0);
    }
}
