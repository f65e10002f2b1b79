//! Python module `aoi_mdp_py`.
//!
//! States cross the boundary as `(z, z_d, e, d0, d1)` tuples and actions as
//! `0` (hold) / `1` (transmit). Invalid input raises `ValueError`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use aoi_mdp::experiment::{default_known_state, policy_slice};
use aoi_mdp::kernel::{self, TransitionKernel};
use aoi_mdp::simulator::{
    direct_aoi_trace, evaluate_policy_mc, simulate_episode, verify_aoi_consistency, DecisionRule,
    EvalSummary,
};
use aoi_mdp::solver::{self, SolveError};
use aoi_mdp::{Action, Baseline, CostSpec, RandomVector, ScenarioConfig, StateSpace, SystemState};

type StateTuple = (u8, u8, usize, usize, usize);
/// `(k, state, action, (w_s, w_e, w_z), cost)`
type TraceRow = (usize, StateTuple, u8, (bool, bool, u8), f64);

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_state(t: StateTuple) -> SystemState {
    SystemState::new(t.0, t.1, t.2, t.3, t.4)
}

fn to_tuple(s: &SystemState) -> StateTuple {
    (s.z, s.z_d, s.e, s.d0, s.d1)
}

fn to_action(a: u8) -> PyResult<Action> {
    Action::from_u8(a).ok_or_else(|| value_error(format!("action must be 0 or 1, got {a}")))
}

/// Model parameters. Switching probabilities are given as `p01` (normal to
/// alarm) and `p10` (alarm to normal).
#[pyclass(name = "Config", frozen, from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ScenarioConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (
        p_e = 0.8, p_s = 0.8, p01 = 0.1, p10 = 0.2, e_max = 5, d_max0 = 10, d_max1 = 10,
        gamma = 0.99, f_weight = 1.0, f_exponent = 1.0, h_weight = 1.0, h_exponent = 2.0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        p_e: f64,
        p_s: f64,
        p01: f64,
        p10: f64,
        e_max: usize,
        d_max0: usize,
        d_max1: usize,
        gamma: f64,
        f_weight: f64,
        f_exponent: f64,
        h_weight: f64,
        h_exponent: f64,
    ) -> PyResult<Self> {
        let inner = ScenarioConfig {
            p_e,
            p_s,
            e_max,
            d_max0,
            d_max1,
            gamma,
            cost: CostSpec {
                f_weight,
                f_exponent,
                h_weight,
                h_exponent,
            },
            ..ScenarioConfig::default()
        }
        .with_switching(p01, p10)
        .validate()
        .map_err(value_error)?;
        Ok(Self { inner })
    }

    /// Reads the model section of an experiment file.
    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        let spec = aoi_mdp::config::load_experiment(path).map_err(value_error)?;
        Ok(Self { inner: spec.base })
    }

    #[getter]
    fn p_e(&self) -> f64 {
        self.inner.p_e
    }
    #[getter]
    fn p_s(&self) -> f64 {
        self.inner.p_s
    }
    #[getter]
    fn p_z(&self) -> [[f64; 2]; 2] {
        self.inner.p_z
    }
    #[getter]
    fn e_max(&self) -> usize {
        self.inner.e_max
    }
    #[getter]
    fn d_max0(&self) -> usize {
        self.inner.d_max0
    }
    #[getter]
    fn d_max1(&self) -> usize {
        self.inner.d_max1
    }
    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }
    #[getter]
    fn num_states(&self) -> usize {
        StateSpace::new(self.inner).size()
    }

    fn value_bound(&self) -> f64 {
        self.inner.value_bound()
    }

    fn state_index(&self, state: StateTuple) -> PyResult<usize> {
        StateSpace::new(self.inner)
            .index_of(&to_state(state))
            .map_err(value_error)
    }

    fn state(&self, index: usize) -> PyResult<StateTuple> {
        StateSpace::new(self.inner)
            .state_of(index)
            .map(|s| to_tuple(&s))
            .map_err(value_error)
    }

    fn stage_cost(&self, state: StateTuple) -> PyResult<f64> {
        let s = self.checked(state)?;
        Ok(kernel::stage_cost(&s, &self.inner))
    }

    fn next_state(&self, state: StateTuple, action: u8, w_s: bool, w_e: bool, w_z: u8) -> PyResult<StateTuple> {
        let s = self.checked(state)?;
        let w = RandomVector { w_s, w_e, w_z };
        kernel::next_state(&s, to_action(action)?, &w, &self.inner)
            .map(|n| to_tuple(&n))
            .map_err(value_error)
    }

    /// Successor distribution as `[(state, probability), ...]`.
    fn transitions(&self, state: StateTuple, action: u8) -> PyResult<Vec<(StateTuple, f64)>> {
        let s = self.checked(state)?;
        let a = to_action(action)?;
        if !a.is_admissible(&s) {
            return Err(value_error(format!("transmit is not admissible in {s}")));
        }
        Ok(kernel::transition_distribution(&s, a, &self.inner)
            .into_iter()
            .map(|(n, p)| (to_tuple(&n), p))
            .collect())
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "Config(p_e={}, p_s={}, p01={}, p10={}, e_max={}, d_max0={}, d_max1={}, gamma={})",
            c.p_e, c.p_s, c.p_z[0][1], c.p_z[1][0], c.e_max, c.d_max0, c.d_max1, c.gamma
        )
    }
}

impl PyConfig {
    fn checked(&self, state: StateTuple) -> PyResult<SystemState> {
        let s = to_state(state);
        if s.is_valid(&self.inner) {
            Ok(s)
        } else {
            Err(value_error(format!("state {s} is outside the state space")))
        }
    }
}

/// Result of value iteration. A run that hits `max_iter` is still returned,
/// with `converged == False`.
#[pyclass(name = "Solution", frozen)]
struct PySolution {
    config: ScenarioConfig,
    kernel: TransitionKernel,
    solution: aoi_mdp::Solution,
}

#[pymethods]
impl PySolution {
    #[getter]
    fn values(&self) -> Vec<f64> {
        self.solution.value.0.clone()
    }
    #[getter]
    fn policy(&self) -> Vec<u8> {
        self.solution.policy.0.iter().map(|a| a.as_u8()).collect()
    }
    #[getter]
    fn iterations(&self) -> usize {
        self.solution.report.iterations
    }
    #[getter]
    fn residual(&self) -> f64 {
        self.solution.report.residual
    }
    #[getter]
    fn optimality_bound(&self) -> f64 {
        self.solution.report.optimality_bound
    }
    #[getter]
    fn converged(&self) -> bool {
        self.solution.report.converged
    }

    fn value(&self, state: StateTuple) -> PyResult<f64> {
        Ok(self.solution.value[self.index(state)?])
    }

    fn action(&self, state: StateTuple) -> PyResult<u8> {
        Ok(self.solution.policy[self.index(state)?].as_u8())
    }

    /// Q(s, transmit) - Q(s, hold).
    fn gap(&self, state: StateTuple) -> PyResult<f64> {
        let i = self.index(state)?;
        Ok(solver::action_value_gap(&self.solution.value, &self.kernel, i))
    }

    /// Actions over energy (rows) and the age of `z` (columns) with the
    /// other age fixed at `other`.
    #[pyo3(signature = (z, other, z_d = None))]
    fn policy_slice(&self, z: u8, other: usize, z_d: Option<u8>) -> PyResult<Vec<Vec<u8>>> {
        if z > 1 {
            return Err(value_error(format!("z must be 0 or 1, got {z}")));
        }
        let z_d = match z_d {
            Some(v) => v,
            None => default_known_state(&self.config, z, other).map_err(value_error)?,
        };
        let slice = policy_slice(&self.solution.policy, &self.config, z, z_d, other).map_err(value_error)?;
        Ok(slice
            .grid
            .iter()
            .map(|row| row.iter().map(|a| a.as_u8()).collect())
            .collect())
    }

    /// Violation counts of the three structural checks.
    fn check<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let (t, g, l) = py.detach(|| {
            (
                solver::check_threshold_structure(&self.solution.policy, &self.config),
                solver::check_gap_monotonicity(&self.solution.value, &self.kernel),
                solver::check_lemma1_inequality(&self.solution.value, &self.config),
            )
        });
        let out = PyDict::new(py);
        out.set_item("threshold", t.violations.len())?;
        out.set_item("gap_monotonicity", g.violations.len())?;
        out.set_item("lemma1", l.violations.len())?;
        Ok(out)
    }

    /// Monte Carlo estimate of the discounted cost of the optimal policy.
    #[pyo3(signature = (episodes = 10_000, horizon = 1375, seed = 0, s0 = (0, 0, 0, 1, 0)))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        episodes: usize,
        horizon: usize,
        seed: u64,
        s0: StateTuple,
    ) -> PyResult<Bound<'py, PyDict>> {
        evaluate(py, &self.solution.policy, &self.config, episodes, horizon, seed, s0)
    }

    #[pyo3(signature = (horizon, seed = 0, s0 = (0, 0, 0, 1, 0)))]
    fn trace<'py>(&self, py: Python<'py>, horizon: usize, seed: u64, s0: StateTuple) -> PyResult<Bound<'py, PyDict>> {
        trace(py, &self.solution.policy, &self.config, horizon, seed, s0)
    }
}

impl PySolution {
    fn index(&self, state: StateTuple) -> PyResult<usize> {
        self.kernel.space().index_of(&to_state(state)).map_err(value_error)
    }
}

fn summary_dict<'py>(py: Python<'py>, s: &EvalSummary) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("mean", s.mean_discounted_cost)?;
    out.set_item("std_error", s.std_error)?;
    out.set_item("n_episodes", s.n_episodes)?;
    out.set_item("horizon", s.horizon)?;
    out.set_item("truncation_bound", s.truncation_bound)?;
    Ok(out)
}

fn evaluate<'py, P: DecisionRule>(
    py: Python<'py>,
    rule: &P,
    cfg: &ScenarioConfig,
    episodes: usize,
    horizon: usize,
    seed: u64,
    s0: StateTuple,
) -> PyResult<Bound<'py, PyDict>> {
    let s0 = to_state(s0);
    let summary = py
        .detach(|| evaluate_policy_mc(rule, cfg, &s0, horizon, episodes, seed, None))
        .map_err(value_error)?;
    summary_dict(py, &summary)
}

fn trace<'py, P: DecisionRule>(
    py: Python<'py>,
    rule: &P,
    cfg: &ScenarioConfig,
    horizon: usize,
    seed: u64,
    s0: StateTuple,
) -> PyResult<Bound<'py, PyDict>> {
    let trace = simulate_episode(rule, cfg, &to_state(s0), horizon, seed).map_err(value_error)?;
    let rows: Vec<TraceRow> = trace
        .steps
        .iter()
        .map(|st| {
            let w = st.disturbance;
            (st.k, to_tuple(&st.state), st.action.as_u8(), (w.w_s, w.w_e, w.w_z), st.cost)
        })
        .collect();
    let out = PyDict::new(py);
    out.set_item("steps", rows)?;
    out.set_item("direct_ages", direct_aoi_trace(&trace))?;
    out.set_item("consistent", verify_aoi_consistency(&trace).consistent)?;
    Ok(out)
}

fn baseline(name: &str) -> PyResult<Baseline> {
    Baseline::parse(name).ok_or_else(|| {
        value_error(format!(
            "unknown baseline `{name}`; expected never, always, alarm_only or random:P"
        ))
    })
}

/// Value iteration from zero until the sup-norm residual drops below `tol`.
#[pyfunction]
#[pyo3(signature = (config, tol = solver::DEFAULT_TOLERANCE, max_iter = solver::DEFAULT_MAX_ITER))]
fn solve(py: Python<'_>, config: &PyConfig, tol: f64, max_iter: usize) -> PyResult<PySolution> {
    let cfg = config.inner;
    py.detach(|| {
        let kernel = kernel::build_kernel(&cfg);
        let solution = match solver::value_iteration_with_kernel(&kernel, tol, max_iter) {
            Ok(s) => s,
            Err(SolveError::NotConverged(s)) => *s,
            Err(e) => return Err(value_error(e)),
        };
        Ok(PySolution {
            config: cfg,
            kernel,
            solution,
        })
    })
}

/// Monte Carlo estimate for a baseline policy (`never`, `always`,
/// `alarm_only`, `random:P`).
#[pyfunction]
#[pyo3(signature = (config, name, episodes = 10_000, horizon = 1375, seed = 0, s0 = (0, 0, 0, 1, 0)))]
fn evaluate_baseline<'py>(
    py: Python<'py>,
    config: &PyConfig,
    name: &str,
    episodes: usize,
    horizon: usize,
    seed: u64,
    s0: StateTuple,
) -> PyResult<Bound<'py, PyDict>> {
    evaluate(py, &baseline(name)?, &config.inner, episodes, horizon, seed, s0)
}

#[pyfunction]
#[pyo3(signature = (config, name, horizon, seed = 0, s0 = (0, 0, 0, 1, 0)))]
fn trace_baseline<'py>(
    py: Python<'py>,
    config: &PyConfig,
    name: &str,
    horizon: usize,
    seed: u64,
    s0: StateTuple,
) -> PyResult<Bound<'py, PyDict>> {
    trace(py, &baseline(name)?, &config.inner, horizon, seed, s0)
}

#[pymodule]
fn aoi_mdp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySolution>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(trace_baseline, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_tuples_round_trip() {
        let s = SystemState::new(1, 0, 3, 4, 7);
        assert_eq!(to_state(to_tuple(&s)), s);
    }

    #[test]
    fn actions_are_binary() {
        assert_eq!(to_action(1).unwrap(), Action::Transmit);
        assert!(to_action(2).is_err());
        assert!(baseline("sometimes").is_err());
        assert_eq!(baseline("random:0.25").unwrap(), Baseline::Random(0.25));
    }
}
