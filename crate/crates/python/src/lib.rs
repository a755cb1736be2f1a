use std::path::Path;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use safenvelope::gp::{fit_gp, GpModel, GpPrior};
use safenvelope::runtime::{safety_filter, FilterConfig};
use safenvelope::safe_set::SafeCertificate;
use safenvelope::scenarios::{self, BaselineVerdict, Command, ScenarioConfig};
use safenvelope::system_model::{DataSet, Polytope};
use safenvelope::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::ConfigInvalid(_)
        | Error::DimensionMismatch(_)
        | Error::UnknownScenario(_)
        | Error::EmptyDataSet
        | Error::InvalidModel(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Names accepted by `builtin_config`.
#[pyfunction]
fn builtin_scenarios() -> Vec<&'static str> {
    scenarios::BUILTIN_SCENARIOS.to_vec()
}

/// JSON configuration of a built-in scenario.
#[pyfunction]
fn builtin_config(name: &str) -> PyResult<String> {
    scenarios::builtin_config(name)
        .and_then(|c| c.to_json())
        .map_err(py_err)
}

#[pyclass(frozen, get_all)]
struct RunResult {
    report: String,
    success: bool,
    files: Vec<String>,
    certificate: Option<String>,
}

/// Runs one command (`shape`, `synthesize`, `simulate`, ...) on a JSON
/// configuration and writes the artifacts into `out_dir`.
#[pyfunction]
fn run_scenario(
    py: Python<'_>,
    config_json: &str,
    command: &str,
    out_dir: &str,
) -> PyResult<RunResult> {
    let cfg: ScenarioConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let command = Command::parse(command).map_err(py_err)?;
    let out = py
        .detach(|| scenarios::run_scenario(cfg, command, Path::new(out_dir)))
        .map_err(py_err)?;
    let certificate = out
        .certificate
        .as_ref()
        .map(|c| serde_json::to_string(c).map_err(|e| PyRuntimeError::new_err(e.to_string())))
        .transpose()?;
    Ok(RunResult {
        report: out.report,
        success: out.success,
        files: out.files.iter().map(|p| p.display().to_string()).collect(),
        certificate,
    })
}

/// Certified safe set `{x : x'Px <= gamma}` with gain `K`.
#[pyclass(frozen)]
struct Certificate(SafeCertificate);

#[pymethods]
impl Certificate {
    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        serde_json::from_str(s)
            .map(Certificate)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn p(&self) -> Vec<Vec<f64>> {
        rows(&self.0.p)
    }

    #[getter]
    fn k(&self) -> Vec<Vec<f64>> {
        rows(&self.0.k)
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }

    fn level(&self, x: Vec<f64>) -> PyResult<f64> {
        if x.len() != self.0.p.nrows() {
            return Err(PyValueError::new_err("state dimension mismatch"));
        }
        Ok(self.0.level(&vector(&x)))
    }

    /// Filtered input and whether the certified gain took over.
    #[pyo3(signature = (x, ubar, u_a, u_b, boundary_fraction = 0.02))]
    fn filter(
        &self,
        x: Vec<f64>,
        ubar: Vec<f64>,
        u_a: Vec<Vec<f64>>,
        u_b: Vec<f64>,
        boundary_fraction: f64,
    ) -> PyResult<(Vec<f64>, bool)> {
        let u_poly = Polytope::new(matrix(&u_a)?, vector(&u_b)).map_err(py_err)?;
        let cfg = FilterConfig {
            boundary_fraction,
            ..FilterConfig::default()
        };
        cfg.validate().map_err(py_err)?;
        let (u, active) =
            safety_filter(&vector(&x), &vector(&ubar), &self.0, &u_poly, &cfg).map_err(py_err)?;
        Ok((u.iter().copied().collect(), active))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Exact GP regression with an independent SE kernel per output.
#[pyclass(frozen)]
struct GaussianProcess(GpModel);

#[pymethods]
impl GaussianProcess {
    #[new]
    #[pyo3(signature = (xs, ds, sigma_f, lengthscale, mean = 0.0))]
    fn new(
        xs: Vec<Vec<f64>>,
        ds: Vec<Vec<f64>>,
        sigma_f: f64,
        lengthscale: f64,
        mean: f64,
    ) -> PyResult<Self> {
        let n = xs.first().map_or(0, Vec::len);
        let data = DataSet::new(
            xs.iter().map(|x| vector(x)).collect(),
            ds.iter().map(|d| vector(d)).collect(),
        )
        .map_err(py_err)?;
        fit_gp(&data, &GpPrior::uniform(n, mean, sigma_f, lengthscale))
            .map(GaussianProcess)
            .map_err(py_err)
    }

    /// Posterior mean and variance per output.
    fn posterior(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let post = self.0.posterior(&vector(&x)).map_err(py_err)?;
        Ok((
            post.mean.iter().copied().collect(),
            post.variance.iter().copied().collect(),
        ))
    }
}

/// Admissible gain range `(k_lo, k_hi)` of the robust scalar design, or `None`.
#[pyfunction]
fn robust_baseline_1d(bound_w: f64, x: (f64, f64), u: (f64, f64)) -> Option<(f64, f64)> {
    match scenarios::robust_baseline_1d(bound_w, [x.0, x.1], [u.0, u.1]) {
        BaselineVerdict::Feasible { k_lo, k_hi } => Some((k_lo, k_hi)),
        BaselineVerdict::Infeasible { .. } => None,
    }
}

#[pymodule]
#[pyo3(name = "safenvelope")]
fn safenvelope_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(builtin_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(robust_baseline_1d, m)?)?;
    m.add_class::<RunResult>()?;
    m.add_class::<Certificate>()?;
    m.add_class::<GaussianProcess>()?;
    Ok(())
}
