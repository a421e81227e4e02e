//! Python bindings for `precond_lab`.
//!
//! Matrices cross the boundary as lists of rows (a 2-D numpy array converts
//! automatically); column `i` of `x` is sample `i`, as in the Rust crate.

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use precond_lab::data::{make_spectrum, make_teacher, synth_generate, Case};
use precond_lab::model::{init_p_isotropic, init_readout, loss, loss_and_grad, predict, MlpParams};
use precond_lab::optim::{Optimizer, PreconditionerSpec, UpdateRule};
use precond_lab::runners::config::{ExperimentConfig, ExperimentKind};
use precond_lab::runners::run_tables;
use precond_lab::spectra::{covariance, gram, matrix_power, CovarianceScale, Preconditioner, DEFAULT_FLOOR};
use precond_lab::LabError;

fn err(e: LabError) -> PyErr {
    match e {
        LabError::Config(_) | LabError::InvalidArgument(_) | LabError::Dimension { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(PyValueError::new_err("ragged matrix: rows have different lengths"));
    }
    Array2::from_shape_vec((n_rows, n_cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn parse_scale(name: &str) -> PyResult<CovarianceScale> {
    match name {
        "sum" => Ok(CovarianceScale::Sum),
        "mean" => Ok(CovarianceScale::Mean),
        _ => Err(PyValueError::new_err(format!("unknown covariance scale `{name}` (sum|mean)"))),
    }
}

fn parse_case(name: &str) -> PyResult<Case> {
    match name {
        "high" => Ok(Case::High),
        "low" => Ok(Case::Low),
        _ => Err(PyValueError::new_err(format!("unknown case `{name}` (high|low)"))),
    }
}

/// `Σ = XXᵀ` (or `XXᵀ/N` with `scale="mean"`).
#[pyfunction]
#[pyo3(signature = (x, scale = "sum"))]
fn input_covariance(x: Vec<Vec<f64>>, scale: &str) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&covariance(&to_array(x)?, parse_scale(scale)?)))
}

/// `Σ^p` on the eigenbasis; eigenvalues below `floor·λmax` are treated as zero.
#[pyfunction]
#[pyo3(signature = (sigma, p, floor = DEFAULT_FLOOR))]
fn covariance_power(sigma: Vec<Vec<f64>>, p: f64, floor: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&matrix_power(&to_array(sigma)?, p, floor).map_err(err)?.matrix))
}

/// Preconditioned Gram matrix `XᵀPX`.
#[pyfunction]
fn gram_matrix(x: Vec<Vec<f64>>, p: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let pc = Preconditioner {
        matrix: to_array(p)?,
        power: f64::NAN,
        floor: 0.0,
    };
    Ok(to_rows(&gram(&to_array(x)?, &pc).map_err(err)?))
}

/// Synthetic High/Low regression data: returns `(x, y, sigma_noise)`.
#[pyfunction]
#[pyo3(signature = (case, n, snr, seed, d_x = 10, lam = 10.0))]
fn synthetic_dataset(
    case: &str,
    n: usize,
    snr: f64,
    seed: u64,
    d_x: usize,
    lam: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
    let case = parse_case(case)?;
    let spectrum = make_spectrum(case, d_x, lam).map_err(err)?;
    let teacher = make_teacher(case, d_x).map_err(err)?;
    let (data, calibrated) = synth_generate(&spectrum, &teacher, n, snr, seed, "python").map_err(err)?;
    Ok((to_rows(&data.x), to_rows(&data.y), calibrated.sigma_noise))
}

/// Two-layer ReLU network parameters.
#[pyclass(name = "Mlp")]
struct PyMlp {
    inner: MlpParams,
}

#[pymethods]
impl PyMlp {
    /// First-layer columns drawn from `N(0, sigma² P)`; `p_matrix=None` means `P = I`.
    #[staticmethod]
    #[pyo3(signature = (d_x, d_h, d_y, sigma, seed, p_matrix = None))]
    fn init(d_x: usize, d_h: usize, d_y: usize, sigma: f64, seed: u64, p_matrix: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let pc = match p_matrix {
            Some(m) => Preconditioner {
                matrix: to_array(m)?,
                power: f64::NAN,
                floor: 0.0,
            },
            None => Preconditioner::identity(d_x),
        };
        let w1 = init_p_isotropic(&pc, sigma, d_h, seed).map_err(err)?;
        let (w2, b2) = init_readout(d_h, d_y, seed.wrapping_add(1));
        Ok(PyMlp {
            inner: MlpParams { w1, w2, b2 },
        })
    }

    #[getter]
    fn w1(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.w1)
    }

    #[getter]
    fn w2(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.w2)
    }

    #[getter]
    fn b2(&self) -> Vec<f64> {
        self.inner.b2.to_vec()
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&predict(&self.inner, &to_array(x)?).map_err(err)?))
    }

    fn loss(&self, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
        loss(&self.inner, &to_array(x)?, &to_array(y)?).map_err(err)
    }

    /// `(loss, dW1, dW2, db2)`.
    fn loss_and_grad(
        &self,
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
    ) -> PyResult<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
        let (l, g) = loss_and_grad(&self.inner, &to_array(x)?, &to_array(y)?).map_err(err)?;
        Ok((l, to_rows(&g.dw1), to_rows(&g.dw2), g.db2.to_vec()))
    }
}

/// Stateful optimizer. `rule` is a dict such as `{"kind": "cov_power", "p": -1}`
/// or `{"kind": "adam", "beta1": 0.9, "beta2": 0.999}`.
#[pyclass(name = "Optimizer")]
struct PyOptimizer {
    inner: Optimizer,
}

#[pymethods]
impl PyOptimizer {
    #[new]
    #[pyo3(signature = (rule_json, lr, weight_decay = 0.0, eps = 1e-8, p_matrix = None, seed = 0))]
    fn new(
        rule_json: &str,
        lr: f64,
        weight_decay: f64,
        eps: f64,
        p_matrix: Option<Vec<Vec<f64>>>,
        seed: u64,
    ) -> PyResult<Self> {
        let rule: UpdateRule =
            serde_json::from_str(rule_json).map_err(|e| PyValueError::new_err(format!("bad rule: {e}")))?;
        let pc = match p_matrix {
            Some(m) => Some(Preconditioner {
                matrix: to_array(m)?,
                power: rule.power().unwrap_or(f64::NAN),
                floor: 0.0,
            }),
            None => None,
        };
        let spec = PreconditionerSpec {
            rule,
            lr,
            weight_decay,
            eps,
        };
        Ok(PyOptimizer {
            inner: Optimizer::new(spec, pc, seed).map_err(err)?,
        })
    }

    /// One full-batch update in place; returns the loss before the update.
    fn step(&mut self, model: &mut PyMlp, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
        let info = self
            .inner
            .step(&mut model.inner, &to_array(x)?, &to_array(y)?)
            .map_err(err)?;
        Ok(info.loss)
    }
}

/// Default config for `experiment` as JSON text.
#[pyfunction]
#[pyo3(signature = (experiment = "robustness"))]
fn default_config(experiment: &str) -> PyResult<String> {
    let kind: ExperimentKind = serde_json::from_value(serde_json::Value::String(experiment.into()))
        .map_err(|e| PyValueError::new_err(format!("unknown experiment: {e}")))?;
    Ok(ExperimentConfig::for_experiment(kind).to_pretty_json())
}

/// Run a sweep from a JSON config and return `{file name: CSV text}`.
#[pyfunction]
#[pyo3(signature = (config_json, jobs = 1))]
fn run_experiment<'py>(py: Python<'py>, config_json: &str, jobs: usize) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ExperimentConfig::from_json_str(config_json).map_err(err)?;
    let tables = py.detach(|| run_tables(&cfg, jobs)).map_err(err)?;
    let out = PyDict::new(py);
    for (name, table) in tables {
        out.set_item(name, table.to_csv_string().map_err(err)?)?;
    }
    Ok(out)
}

/// Run the numerical check suite; returns a list of report dicts.
#[pyfunction]
fn verify_suite(py: Python<'_>) -> PyResult<Vec<Bound<'_, PyDict>>> {
    let cfg = ExperimentConfig::for_experiment(ExperimentKind::Verify);
    let reports = py.detach(|| precond_lab::verify::run_suite(&cfg.verify)).map_err(err)?;
    reports
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("name", r.name)?;
            d.set_item("passed", r.passed)?;
            d.set_item("deviation", r.deviation)?;
            d.set_item("tolerance", r.tolerance)?;
            d.set_item("instance", r.instance)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "precond_lab")]
fn precond_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMlp>()?;
    m.add_class::<PyOptimizer>()?;
    m.add_function(wrap_pyfunction!(input_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(covariance_power, m)?)?;
    m.add_function(wrap_pyfunction!(gram_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(verify_suite, m)?)?;
    Ok(())
}
