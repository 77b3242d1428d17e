use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tdac_core as core;

create_exception!(tdac, TdacError, PyException);

fn to_py(err: core::Error) -> PyErr {
    match err {
        core::Error::Parameter(msg) => PyValueError::new_err(msg),
        other => TdacError::new_err(other.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn list(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

#[pyclass(name = "GarnetSpec", frozen)]
struct PyGarnetSpec(core::GarnetSpec);

#[pymethods]
impl PyGarnetSpec {
    #[new]
    #[pyo3(signature = (states, actions, branching, sigma, basis = 8, active = 3))]
    fn new(states: usize, actions: usize, branching: usize, sigma: f64, basis: usize, active: usize) -> PyResult<Self> {
        core::GarnetSpec::new(states, actions, branching, sigma, basis, active)
            .map(Self)
            .map_err(to_py)
    }

    #[staticmethod]
    fn small() -> Self {
        Self(core::GarnetSpec::small())
    }

    #[staticmethod]
    fn large() -> Self {
        Self(core::GarnetSpec::large())
    }

    #[getter]
    fn states(&self) -> usize {
        self.0.states
    }

    #[getter]
    fn actions(&self) -> usize {
        self.0.actions
    }

    fn __repr__(&self) -> String {
        let s = &self.0;
        format!(
            "GarnetSpec({}, {}, {}, {}, basis={}, active={})",
            s.states, s.actions, s.branching, s.sigma, s.basis, s.active
        )
    }
}

#[pyclass(name = "Mdp", frozen)]
struct PyMdp(core::Mdp);

#[pymethods]
impl PyMdp {
    #[staticmethod]
    fn garnet(spec: &PyGarnetSpec, seed: u64) -> PyResult<Self> {
        core::Mdp::garnet(&spec.0, seed).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        core::Mdp::from_json(text).map(Self).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.0.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.0.n_actions()
    }

    /// Rejected draws before this instance was accepted.
    #[getter]
    fn retries(&self) -> u32 {
        self.0.origin().map_or(0, |o| o.retries)
    }

    fn state_reward(&self) -> Vec<f64> {
        list(self.0.state_reward())
    }

    fn transition(&self, action: usize) -> PyResult<Vec<Vec<f64>>> {
        if action >= self.0.n_actions() {
            return Err(PyValueError::new_err(format!("action {action} out of range")));
        }
        Ok(rows(self.0.transition(action)))
    }
}

#[pyclass(name = "FeatureSet", frozen)]
struct PyFeatureSet(core::FeatureSet);

#[pymethods]
impl PyFeatureSet {
    /// `mode` is `"garnet"` or `"exclude-constant"`.
    #[staticmethod]
    #[pyo3(signature = (spec, seed, mode = "garnet"))]
    fn build(spec: &PyGarnetSpec, seed: u64, mode: &str) -> PyResult<Self> {
        let mode = match mode {
            "garnet" => core::FeatureMode::Garnet,
            "exclude-constant" => core::FeatureMode::ExcludeConstant,
            other => return Err(PyValueError::new_err(format!("unknown feature mode {other:?}"))),
        };
        core::FeatureSet::build(&spec.0, seed, mode).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn from_matrix(phi: Vec<Vec<f64>>, n_actions: usize) -> PyResult<Self> {
        let n = phi.len();
        let l = phi.first().map_or(0, Vec::len);
        if phi.iter().any(|r| r.len() != l) {
            return Err(PyValueError::new_err("ragged feature matrix"));
        }
        let m = DMatrix::from_row_iterator(n, l, phi.into_iter().flatten());
        core::FeatureSet::from_matrix(m, n_actions).map(Self).map_err(to_py)
    }

    #[getter]
    fn basis_size(&self) -> usize {
        self.0.basis_size()
    }

    #[getter]
    fn param_dim(&self) -> usize {
        self.0.param_dim()
    }

    fn phi(&self) -> Vec<Vec<f64>> {
        rows(self.0.phi())
    }
}

/// Exact quantities at `theta` as a dict.
#[pyfunction]
#[pyo3(signature = (mdp, features, theta, lam = 0.5))]
fn evaluate<'py>(
    py: Python<'py>,
    mdp: &PyMdp,
    features: &PyFeatureSet,
    theta: Vec<f64>,
    lam: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let theta = core::PolicyParams::new(theta).map_err(to_py)?;
    let b = core::OracleBundle::evaluate(&mdp.0, &features.0, &theta, lam).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("eta", b.eta)?;
    d.set_item("pi", list(&b.pi))?;
    d.set_item("h", list(&b.h))?;
    d.set_item("x_star", b.x_star)?;
    d.set_item("grad_eta", list(&b.grad_eta))?;
    d.set_item("grad_eta_via_h", list(&b.grad_eta_via_h))?;
    d.set_item("a", rows(&b.a))?;
    d.set_item("b", list(&b.b))?;
    d.set_item("w_star_td", list(&b.w_star_td))?;
    d.set_item("w_star_proj", list(&b.w_star_proj))?;
    d.set_item("eps_app", b.eps_app)?;
    d.set_item("stationarity_residual", b.stationarity_residual())?;
    d.set_item("poisson_residual", b.poisson_residual(mdp.0.state_reward()))?;
    d.set_item("td_residual", b.td_residual())?;
    Ok(d)
}

/// One run; returns the strided samples as dicts. `config` is an agent
/// table in TOML syntax, e.g. `'algorithm = "two_scale"'`.
#[pyfunction]
#[pyo3(signature = (mdp, features, seed, n_steps, stride, config = ""))]
fn run_single<'py>(
    py: Python<'py>,
    mdp: &PyMdp,
    features: &PyFeatureSet,
    seed: u64,
    n_steps: u64,
    stride: u64,
    config: &str,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let config: core::AlgoConfig =
        toml_agent(config).map_err(|e| PyValueError::new_err(format!("agent config: {e}")))?;
    let record = py
        .detach(|| core::run_single(&mdp.0, &features.0, &config, seed, n_steps, stride))
        .map_err(to_py)?;
    record
        .samples
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("n", s.n)?;
            d.set_item("eta_tilde", s.eta_tilde)?;
            d.set_item("eta_exact", s.eta_exact)?;
            d.set_item("grad_norm", s.grad_norm)?;
            d.set_item("w_dist", s.w_dist)?;
            Ok(d)
        })
        .collect()
}

fn toml_agent(text: &str) -> Result<core::AlgoConfig, String> {
    let config: core::AlgoConfig = toml::from_str(text).map_err(|e| e.to_string())?;
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

/// Runs a batch described by a TOML experiment and returns the CSV summary.
#[pyfunction]
fn run_batch(py: Python<'_>, config_toml: &str) -> PyResult<String> {
    let exp = core::Experiment::from_toml(config_toml).map_err(to_py)?;
    let batch = py.detach(|| core::run_batch(&exp)).map_err(to_py)?;
    let mut buf = Vec::new();
    core::harness::write_csv(&batch.summary.rows, &mut buf).map_err(to_py)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

type CheckRow = (String, f64, f64, bool);

/// Oracle self-checks; returns `(all_passed, [(name, worst, tolerance, passed)])`.
#[pyfunction]
#[pyo3(signature = (states, actions, trials, seed))]
fn verify(
    py: Python<'_>,
    states: usize,
    actions: usize,
    trials: usize,
    seed: u64,
) -> PyResult<(bool, Vec<CheckRow>)> {
    let opts = core::verify::VerifyOptions::new(states, actions, trials, seed);
    let report = py.detach(|| core::verify::run_verification(&opts)).map_err(to_py)?;
    let checks = report
        .checks
        .iter()
        .map(|c| (c.name.to_string(), c.worst, c.tolerance, c.passed))
        .collect();
    Ok((report.all_passed(), checks))
}

/// Runs the command-line interface with `argv` (without the program name).
#[pyfunction]
fn cli(argv: Vec<String>) -> i32 {
    core::cli::cli_dispatch(std::iter::once("tdac".to_string()).chain(argv))
}

#[pymodule]
fn tdac(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TdacError", m.py().get_type::<TdacError>())?;
    m.add_class::<PyGarnetSpec>()?;
    m.add_class::<PyMdp>()?;
    m.add_class::<PyFeatureSet>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_single, m)?)?;
    m.add_function(wrap_pyfunction!(run_batch, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
