//! Python bindings: the exact tabular track and the stochastic driver
//! behind a small scripting surface.
//!
//! Usage from Python:
//!
//!     import stro_py
//!     mdp = stro_py.Mdp.random(5, 3, 0.9, seed=0)
//!     policy, eta_star = stro_py.value_iteration(mdp, 1e-12)
//!     result = stro_py.run_tabular(mdp, stro_py.TabularPolicy.uniform(5, 3))
//!     print(result["final_eta"], eta_star)

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use stro_core::driver::{run_stro, StroConfig};
use stro_core::envs::{make_env, EnvKind};
use stro_core::mdp;
use stro_core::policy::{CategoricalPolicyParams, GaussianPolicyParams, MeanModelSpec, PolicyParams};
use stro_core::sampler::ValueBaseline;
use stro_core::tabular;

fn core_err(e: stro_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A finite MDP with exact dynamics.
#[pyclass(name = "Mdp", from_py_object)]
#[derive(Clone)]
struct PyMdp {
    inner: mdp::Mdp,
}

#[pymethods]
impl PyMdp {
    /// A seeded random MDP with well-mixed dynamics.
    #[staticmethod]
    #[pyo3(signature = (n_states, n_actions, discount, seed = 0))]
    fn random(n_states: usize, n_actions: usize, discount: f64, seed: u64) -> PyMdp {
        PyMdp {
            inner: mdp::random_mdp(n_states, n_actions, discount, seed),
        }
    }

    /// The exact MDP of the built-in chain task.
    #[staticmethod]
    fn chain() -> PyMdp {
        use stro_core::envs::Env;
        PyMdp {
            inner: stro_core::envs::ChainEnv::new(0).exact_mdp().unwrap(),
        }
    }

    /// The exact MDP of the built-in gridworld task.
    #[staticmethod]
    fn gridworld() -> PyMdp {
        use stro_core::envs::Env;
        PyMdp {
            inner: stro_core::envs::GridworldEnv::new(0).exact_mdp().unwrap(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<PyMdp> {
        Ok(PyMdp {
            inner: mdp::Mdp::from_json(text).map_err(core_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    #[getter]
    fn discount(&self) -> f64 {
        self.inner.discount()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mdp(n_states={}, n_actions={}, discount={})",
            self.inner.n_states(),
            self.inner.n_actions(),
            self.inner.discount()
        )
    }
}

/// A tabular stochastic policy.
#[pyclass(name = "TabularPolicy", from_py_object)]
#[derive(Clone)]
struct PyTabularPolicy {
    inner: mdp::TabularPolicy,
}

#[pymethods]
impl PyTabularPolicy {
    #[staticmethod]
    fn uniform(n_states: usize, n_actions: usize) -> PyTabularPolicy {
        PyTabularPolicy {
            inner: mdp::TabularPolicy::uniform(n_states, n_actions),
        }
    }

    #[staticmethod]
    fn random(n_states: usize, n_actions: usize, seed: u64) -> PyTabularPolicy {
        PyTabularPolicy {
            inner: mdp::TabularPolicy::random(n_states, n_actions, seed),
        }
    }

    #[staticmethod]
    fn from_probs(n_states: usize, n_actions: usize, probs: Vec<f64>) -> PyResult<PyTabularPolicy> {
        Ok(PyTabularPolicy {
            inner: mdp::TabularPolicy::new(n_states, n_actions, probs).map_err(core_err)?,
        })
    }

    /// Row-major action probabilities.
    fn probs(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_states())
            .map(|s| self.inner.row(s).to_vec())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "TabularPolicy(n_states={}, n_actions={})",
            self.inner.n_states(),
            self.inner.n_actions()
        )
    }
}

/// Exact policy evaluation: value functions, advantages, discounted
/// visitation and total expected reward, as a dict.
#[pyfunction]
fn evaluate(py: Python<'_>, mdp: &PyMdp, policy: &PyTabularPolicy) -> PyResult<Py<PyDict>> {
    let eval = mdp::evaluate(&mdp.inner, &policy.inner).map_err(core_err)?;
    let out = PyDict::new(py);
    out.set_item("v", eval.v.clone())?;
    out.set_item("q", eval.q.clone())?;
    out.set_item("adv", eval.adv.clone())?;
    out.set_item("visit", eval.visit.clone())?;
    out.set_item("eta", eval.eta)?;
    Ok(out.into())
}

/// Value iteration; returns `(greedy_policy, eta_star)`.
#[pyfunction]
#[pyo3(signature = (mdp, tol = 1e-12))]
fn value_iteration(mdp: &PyMdp, tol: f64) -> PyResult<(PyTabularPolicy, f64)> {
    let (policy, eta) = mdp::value_iteration(&mdp.inner, tol).map_err(core_err)?;
    Ok((PyTabularPolicy { inner: policy }, eta))
}

/// Surrogate objective of a candidate around a base policy.
#[pyfunction]
fn surrogate_l(mdp: &PyMdp, base: &PyTabularPolicy, candidate: &PyTabularPolicy) -> PyResult<f64> {
    let eval = mdp::evaluate(&mdp.inner, &base.inner).map_err(core_err)?;
    mdp::surrogate_l(&mdp.inner, &base.inner, &eval, &candidate.inner).map_err(core_err)
}

/// Policy advantage of a candidate with respect to a base policy.
#[pyfunction]
fn policy_advantage(
    mdp: &PyMdp,
    base: &PyTabularPolicy,
    candidate: &PyTabularPolicy,
) -> PyResult<f64> {
    let eval = mdp::evaluate(&mdp.inner, &base.inner).map_err(core_err)?;
    mdp::policy_advantage(&mdp.inner, &eval, &candidate.inner).map_err(core_err)
}

/// The optimal policy advantage; zero exactly at an optimal policy.
#[pyfunction]
fn optimal_advantage(mdp: &PyMdp, policy: &PyTabularPolicy) -> PyResult<f64> {
    let eval = mdp::evaluate(&mdp.inner, &policy.inner).map_err(core_err)?;
    Ok(mdp::optimal_advantage(&mdp.inner, &eval))
}

/// Exact maximizer of the surrogate within a visitation-weighted
/// total-variation budget around the base policy.
#[pyfunction]
fn solve_tv_subproblem(
    mdp: &PyMdp,
    base: &PyTabularPolicy,
    delta: f64,
) -> PyResult<PyTabularPolicy> {
    let eval = mdp::evaluate(&mdp.inner, &base.inner).map_err(core_err)?;
    let solved =
        tabular::solve_tv_subproblem(&mdp.inner, &base.inner, &eval, delta).map_err(core_err)?;
    Ok(PyTabularPolicy { inner: solved })
}

/// Run the deterministic trust-region loop. `config_json` holds overrides
/// for the loop parameters (beta0, beta1, gamma1..3, delta0, max_iters,
/// tol_astar). Returns a dict with per-iteration rows and the final state.
#[pyfunction]
#[pyo3(signature = (mdp, init, config_json = None))]
fn run_tabular(
    py: Python<'_>,
    mdp: &PyMdp,
    init: &PyTabularPolicy,
    config_json: Option<&str>,
) -> PyResult<Py<PyDict>> {
    let config: tabular::TrConfig = match config_json {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| PyValueError::new_err(format!("bad config: {e}")))?,
        None => tabular::TrConfig::default(),
    };
    let trace = tabular::run(&mdp.inner, &init.inner, &config).map_err(core_err)?;
    let rows = PyList::empty(py);
    for r in &trace.rows {
        let row = PyDict::new(py);
        row.set_item("iter", r.iter)?;
        row.set_item("eta", r.eta)?;
        row.set_item("delta", r.delta)?;
        row.set_item("ratio", r.ratio)?;
        row.set_item("astar", r.astar)?;
        row.set_item("accepted", r.accepted)?;
        rows.append(row)?;
    }
    let out = PyDict::new(py);
    out.set_item("rows", rows)?;
    out.set_item("final_eta", trace.final_eta)?;
    out.set_item("final_astar", trace.final_astar)?;
    out.set_item("converged", trace.converged)?;
    out.set_item(
        "final_policy",
        PyTabularPolicy {
            inner: trace.final_policy,
        },
    )?;
    Ok(out.into())
}

/// Run the stochastic driver on a built-in environment. `env_kind` is one
/// of `chain`, `gridworld`, `point_mass_1d`, `point_mass_2d`, `lq_scalar`;
/// the policy family follows the environment (categorical for discrete,
/// Gaussian otherwise). `config_json` holds overrides for the driver
/// parameters (n, mu0, max_env_steps, seed, ...).
#[pyfunction]
#[pyo3(signature = (env_kind, config_json = None))]
fn run_stro_builtin(
    py: Python<'_>,
    env_kind: &str,
    config_json: Option<&str>,
) -> PyResult<Py<PyDict>> {
    let kind: EnvKind = serde_json::from_str(&format!("\"{env_kind}\""))
        .map_err(|e| PyValueError::new_err(format!("unknown env kind {env_kind:?}: {e}")))?;
    let config: StroConfig = match config_json {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| PyValueError::new_err(format!("bad config: {e}")))?,
        None => StroConfig::default(),
    };
    let mut env = make_env(kind, 0);
    let spec = env.spec().clone();
    let (policy, baseline) = if spec.is_discrete() {
        (
            PolicyParams::Categorical(CategoricalPolicyParams::new(spec.obs_dim, spec.action_dim)),
            ValueBaseline::tabular(spec.obs_dim),
        )
    } else {
        (
            PolicyParams::Gaussian(GaussianPolicyParams::new(
                MeanModelSpec::linear(spec.obs_dim, spec.action_dim),
                0.0,
            )),
            ValueBaseline::quadratic(spec.obs_dim),
        )
    };
    let result = run_stro(env.as_mut(), policy, baseline, &config)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;

    let records = PyList::empty(py);
    for r in &result.records {
        let row = PyDict::new(py);
        row.set_item("iter", r.iter)?;
        row.set_item("eta_hat_old", r.eta_hat_old)?;
        row.set_item("eta_hat_trial", r.eta_hat_trial)?;
        row.set_item("sigma_eta_hat", r.sigma_eta_hat)?;
        row.set_item("l_improvement", r.l_improvement)?;
        row.set_item("ratio", r.ratio)?;
        row.set_item("decision", r.decision.to_string())?;
        row.set_item("entropy", r.entropy)?;
        row.set_item("delta", r.delta)?;
        records.append(row)?;
    }
    let out = PyDict::new(py);
    out.set_item("records", records)?;
    out.set_item("env_steps", result.env_steps)?;
    out.set_item("final_policy_json", result.final_policy.to_json())?;
    out.set_item("accepted_iterations", result.accepted.len())?;
    Ok(out.into())
}

/// Exact total expected reward of a linear-Gaussian policy `a = w x` with
/// per-coordinate noise `stds` on the 1-D point-mass task, plus the task
/// optimum, as `(eta, eta_star, w_star)`.
#[pyfunction]
fn point_mass_exact_eta(w: f64, std: f64) -> (f64, f64, f64) {
    use stro_core::envs::{optimal_eta_scalar, PointMass1dEnv};
    let env = PointMass1dEnv::new(0);
    let weights = nalgebra::DMatrix::from_element(1, 1, w);
    let eta = env.exact_eta(&weights, &[std]);
    let (eta_star, w_star) = optimal_eta_scalar(env.dynamics());
    (eta, eta_star, w_star)
}

#[pymodule]
fn stro_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMdp>()?;
    m.add_class::<PyTabularPolicy>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(value_iteration, m)?)?;
    m.add_function(wrap_pyfunction!(surrogate_l, m)?)?;
    m.add_function(wrap_pyfunction!(policy_advantage, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_advantage, m)?)?;
    m.add_function(wrap_pyfunction!(solve_tv_subproblem, m)?)?;
    m.add_function(wrap_pyfunction!(run_tabular, m)?)?;
    m.add_function(wrap_pyfunction!(run_stro_builtin, m)?)?;
    m.add_function(wrap_pyfunction!(point_mass_exact_eta, m)?)?;
    Ok(())
}
