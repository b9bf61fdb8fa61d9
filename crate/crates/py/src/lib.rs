//! Python bindings for the stein-select library.
//!
//! Exposes the kernel evaluations, the NKSD estimators, the SVC scores and
//! the leave-one-out selection driver to Python. Data crosses the boundary
//! as plain lists of rows; anything array-like can be passed after
//! `tolist()`.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use nalgebra::DVector;

use stein_select::calibrate;
use stein_select::data::{self, DataMatrix, PpcaScenario, ToyScenario};
use stein_select::error::Error as CoreError;
use stein_select::kernel::{precompute_pairwise, KernelSpec};
use stein_select::nksd;
use stein_select::optimize::{minimize_ppca, pca_init, PpcaOptimOptions};
use stein_select::ppca;
use stein_select::score::{ExpFamily, GaussianLocationModel};
use stein_select::selection::{self, Decision, LeaveOneOutConfig, SelectionMethod};
use stein_select::svc::{self, BackgroundDimPolicy};

fn to_py_err(e: CoreError) -> PyErr {
    match e {
        CoreError::Config(_) | CoreError::Input(_) | CoreError::InsufficientData { .. } => {
            PyValueError::new_err(e.to_string())
        }
        CoreError::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        CoreError::Io { .. } => PyIOError::new_err(e.to_string()),
    }
}

fn data_matrix(rows: Vec<Vec<f64>>) -> PyResult<DataMatrix> {
    DataMatrix::from_rows(rows).map_err(to_py_err)
}

/// A kernel with fixed hyperparameters.
#[pyclass(name = "Kernel", from_py_object)]
#[derive(Clone)]
struct PyKernel {
    spec: KernelSpec,
}

#[pymethods]
impl PyKernel {
    /// Factored inverse multiquadric kernel on `dim` dimensions.
    #[staticmethod]
    fn factored_imq(beta: f64, c: f64, dim: usize) -> PyResult<Self> {
        Ok(PyKernel {
            spec: KernelSpec::factored_imq(beta, c, dim).map_err(to_py_err)?,
        })
    }

    /// RBF kernel on `dim` dimensions.
    #[staticmethod]
    fn rbf(bandwidth: f64, dim: usize) -> PyResult<Self> {
        Ok(PyKernel {
            spec: KernelSpec::rbf(bandwidth, dim).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn eval(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        self.spec.eval(&x, &y).map_err(to_py_err)
    }

    fn grad_x(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<f64>> {
        self.spec.eval_grad_x(&x, &y).map_err(to_py_err)
    }

    fn trace_cross(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        self.spec.eval_trace_cross(&x, &y).map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.spec)
    }
}

/// NKSD estimate of a Gaussian location model `N(mean, model_var I)`.
#[pyfunction]
fn nksd_gaussian(
    rows: Vec<Vec<f64>>,
    mean: Vec<f64>,
    model_var: f64,
    kernel: &PyKernel,
) -> PyResult<f64> {
    let data = data_matrix(rows)?;
    let d = data.n_cols();
    let model = GaussianLocationModel::isotropic(d, model_var, 1.0).map_err(to_py_err)?;
    let theta = DVector::from_vec(mean);
    let score = model.at(&theta).map_err(to_py_err)?;
    Ok(nksd::nksd_hat(&score, &data, &kernel.spec)
        .map_err(to_py_err)?
        .value)
}

/// Exact log SVC of the Gaussian location model with prior
/// `N(0, prior_var I)`, returned as a dict with the decomposition.
#[pyfunction]
#[pyo3(signature = (rows, model_var, prior_var, temp, m_b, kernel))]
fn svc_exact_gaussian<'py>(
    py: Python<'py>,
    rows: Vec<Vec<f64>>,
    model_var: f64,
    prior_var: f64,
    temp: f64,
    m_b: f64,
    kernel: &PyKernel,
) -> PyResult<Bound<'py, PyDict>> {
    let data = data_matrix(rows)?;
    let d = data.n_cols();
    let model = GaussianLocationModel::isotropic(d, model_var, prior_var).map_err(to_py_err)?;
    let qf = nksd::quadratic_coeffs(&model, &data, &kernel.spec).map_err(to_py_err)?;
    let result = svc::svc_exact_expfam(
        &qf,
        &DVector::zeros(d),
        &(nalgebra::DMatrix::identity(d, d) * prior_var),
        temp,
        m_b,
    )
    .map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("log_k", result.log_k)?;
    out.set_item("fit_term", result.fit_term)?;
    out.set_item("foreground_volume", result.foreground_volume)?;
    out.set_item("background_volume", result.background_volume)?;
    out.set_item(
        "theta_opt",
        result.theta_opt.iter().cloned().collect::<Vec<f64>>(),
    )?;
    Ok(out)
}

/// Effective background dimension under a policy string such as
/// `perdim:5` or `pitman-yor:0.5,1,0.2`.
#[pyfunction]
fn background_dim(policy: &str, n: usize, r_b: usize) -> PyResult<f64> {
    let policy = BackgroundDimPolicy::parse(policy).map_err(to_py_err)?;
    svc::background_dim(&policy, n, r_b).map_err(to_py_err)
}

/// A fitted pPCA model.
#[pyclass(name = "PpcaFit")]
struct PyPpcaFit {
    model: ppca::PpcaModel,
    #[pyo3(get)]
    objective: f64,
    #[pyo3(get)]
    grad_norm: f64,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    converged: bool,
}

#[pymethods]
impl PyPpcaFit {
    /// Fitted covariance `H Hᵀ + v I` as a list of rows.
    fn covariance(&self) -> Vec<Vec<f64>> {
        let cov = self.model.covariance();
        (0..cov.nrows())
            .map(|i| (0..cov.ncols()).map(|j| cov[(i, j)]).collect())
            .collect()
    }

    #[getter]
    fn v(&self) -> f64 {
        self.model.v()
    }

    #[getter]
    fn l_diag(&self) -> Vec<f64> {
        self.model.l_diag().iter().cloned().collect()
    }

    #[getter]
    fn u(&self) -> Vec<Vec<f64>> {
        let u = self.model.u();
        (0..u.nrows())
            .map(|i| (0..u.ncols()).map(|j| u[(i, j)]).collect())
            .collect()
    }
}

/// Fit a pPCA model by minimum NKSD with the factored IMQ kernel.
#[pyfunction]
#[pyo3(signature = (rows, latent_dim, alpha=0.1, seed=0))]
fn fit_ppca(rows: Vec<Vec<f64>>, latent_dim: usize, alpha: f64, seed: u64) -> PyResult<PyPpcaFit> {
    let data = data_matrix(rows)?;
    let d = data.n_cols();
    let spec = KernelSpec::factored_imq(-0.5, 1.0, d).map_err(to_py_err)?;
    let stats = precompute_pairwise(&spec, &data).map_err(to_py_err)?;
    let init = pca_init(&data, latent_dim, alpha).map_err(to_py_err)?;
    let mut rng = data::seeded_rng(0x9f1f, seed);
    let fit = minimize_ppca(&stats, vec![init], &PpcaOptimOptions::default(), &mut rng)
        .map_err(to_py_err)?;
    Ok(PyPpcaFit {
        model: fit.model,
        objective: fit.objective,
        grad_norm: fit.grad_norm,
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

fn report_to_py<'py>(
    py: Python<'py>,
    report: &selection::SelectionReport,
) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("reference_log_k", report.reference_log_k)?;
    let per = PyList::empty(py);
    for score in &report.per_foreground {
        let entry = PyDict::new(py);
        entry.set_item("foreground", score.foreground.label())?;
        entry.set_item("log_k", score.log_k)?;
        entry.set_item("log_ratio", score.log_ratio_vs_reference)?;
        entry.set_item("include", score.decision == Decision::Include)?;
        if let Some(err) = &score.error {
            entry.set_item("error", err)?;
        }
        per.append(entry)?;
    }
    out.set_item("per_foreground", per)?;
    if let Some(acc) = report.balanced_accuracy {
        out.set_item("balanced_accuracy", acc)?;
    }
    if let Some(criticism) = &report.criticism {
        let rows: Vec<(usize, f64)> = criticism.iter().map(|&(d, v)| (d + 1, v)).collect();
        out.set_item("criticism", rows)?;
    }
    Ok(out)
}

/// Leave-one-out data selection with the pPCA model. `truth`, when given,
/// holds one include/exclude flag per dimension and enables the balanced
/// accuracy field.
#[pyfunction]
#[pyo3(signature = (rows, latent_dim, temp=0.05, policy="pitman-yor:0.5,1,0.2", method="bic",
                    fast=true, alpha=0.1, criticism=false, truth=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn leave_one_out_ppca<'py>(
    py: Python<'py>,
    rows: Vec<Vec<f64>>,
    latent_dim: usize,
    temp: f64,
    policy: &str,
    method: &str,
    fast: bool,
    alpha: f64,
    criticism: bool,
    truth: Option<Vec<bool>>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let data = data_matrix(rows)?;
    let d = data.n_cols();
    let config = LeaveOneOutConfig {
        latent_dim,
        alpha,
        kernel: KernelSpec::factored_imq(-0.5, 1.0, d).map_err(to_py_err)?,
        temp,
        policy: BackgroundDimPolicy::parse(policy).map_err(to_py_err)?,
        method: SelectionMethod::parse(method).map_err(to_py_err)?,
        fast,
        optim: PpcaOptimOptions::default(),
        criticism,
        m_b_match_foreground_drop: false,
    };
    let truth_decisions: Option<Vec<Decision>> = truth.map(|t| {
        t.into_iter()
            .map(|keep| {
                if keep {
                    Decision::Include
                } else {
                    Decision::Exclude
                }
            })
            .collect()
    });
    let report = selection::leave_one_out(&data, &config, truth_decisions.as_deref(), seed)
        .map_err(to_py_err)?;
    report_to_py(py, &report)
}

/// Draw the bivariate toy dataset for a scenario.
#[pyfunction]
fn generate_toy(scenario: &str, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let scenario = ToyScenario::parse(scenario).map_err(to_py_err)?;
    let data = data::generate_toy(scenario, n, seed);
    Ok(data.rows_iter().map(|r| r.to_vec()).collect())
}

/// Simulate the six-dimensional pPCA dataset with corrupted dimensions;
/// returns `(rows, truth)` with truth[j] = True when dimension j is clean.
#[pyfunction]
fn generate_ppca_sim(scenario: &str, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<bool>)> {
    let scenario = PpcaScenario::parse(scenario).map_err(to_py_err)?;
    let (data, truth) = data::generate_ppca_sim(scenario, n, seed);
    Ok((data.rows_iter().map(|r| r.to_vec()).collect(), truth))
}

/// Median temperature estimate for the pPCA model by curvature matching.
#[pyfunction]
#[pyo3(signature = (dim, latent_dim, n, draws, prior_alpha=1.0, seed=0))]
fn calibrate_ppca<'py>(
    py: Python<'py>,
    dim: usize,
    latent_dim: usize,
    n: usize,
    draws: usize,
    prior_alpha: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = KernelSpec::factored_imq(-0.5, 1.0, dim).map_err(to_py_err)?;
    let result = calibrate::calibrate_ppca(dim, latent_dim, n, draws, prior_alpha, &spec, seed)
        .map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("t_median", result.t_median)?;
    out.set_item("t_hat_samples", result.t_hat_samples)?;
    out.set_item("excluded_draws", result.excluded_draws)?;
    Ok(out)
}

/// `(TN/negatives + TP/positives)/2` with True = include.
#[pyfunction]
fn balanced_accuracy(decisions: Vec<bool>, truth: Vec<bool>) -> PyResult<f64> {
    let conv = |v: Vec<bool>| -> Vec<Decision> {
        v.into_iter()
            .map(|keep| {
                if keep {
                    Decision::Include
                } else {
                    Decision::Exclude
                }
            })
            .collect()
    };
    selection::balanced_accuracy(&conv(decisions), &conv(truth)).map_err(to_py_err)
}

#[pymodule]
fn stein_select_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernel>()?;
    m.add_class::<PyPpcaFit>()?;
    m.add_function(wrap_pyfunction!(nksd_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(svc_exact_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(background_dim, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ppca, m)?)?;
    m.add_function(wrap_pyfunction!(leave_one_out_ppca, m)?)?;
    m.add_function(wrap_pyfunction!(generate_toy, m)?)?;
    m.add_function(wrap_pyfunction!(generate_ppca_sim, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_ppca, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    Ok(())
}
