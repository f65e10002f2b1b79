//! Discounted-cost dynamic programming over the full state space.
//!
//! Value iteration starts from `V = 0` and applies synchronous Bellman
//! backups until the sup-norm change drops below the tolerance. The
//! structural checkers operate on converged results:
//!
//! * [`check_threshold_structure`]: per `(z, z_d, e)` slice the transmit
//!   region of the `(d0, d1)` grid must be up-closed under the element-wise
//!   order.
//! * [`check_gap_monotonicity`]: the action-value gap `Q(s,1) - Q(s,0)` must
//!   be non-increasing in `(d0, d1)` within each slice, and vanish at `e = 0`.
//! * [`check_lemma1_inequality`]: `(1 - p_s) [V(s⁺_{E-1}) - V(s⁻_{E-1})] <=
//!   V(s⁺_E) - V(s⁻_E)` for every dominated AoI pair.

use std::collections::BTreeSet;

use rayon::prelude::*;
use thiserror::Error;

use crate::kernel::{build_kernel, disturbance_distribution, next_state, stage_cost, TransitionKernel};
use crate::model::{Action, ScenarioConfig, StateSpace, SystemState};

/// Gaps with magnitude at or below this resolve to holding.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Numerical slack for the value-function inequalities.
pub const CHECK_SLACK: f64 = 1e-8;

pub const DEFAULT_TOLERANCE: f64 = 1e-9;

pub const DEFAULT_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction(pub Vec<f64>);

impl ValueFunction {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sup_distance(&self, other: &ValueFunction) -> f64 {
        sup_distance(&self.0, &other.0)
    }
}

impl std::ops::Index<usize> for ValueFunction {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy(pub Vec<Action>);

impl Policy {
    pub fn never(n: usize) -> Self {
        Self(vec![Action::Hold; n])
    }

    pub fn actions(&self) -> &[Action] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// First state whose action is not admissible there.
    pub fn first_inadmissible(&self, space: &StateSpace) -> Option<usize> {
        self.0
            .iter()
            .enumerate()
            .find(|(i, a)| !a.is_admissible(&space.state_unchecked(*i)))
            .map(|(i, _)| i)
    }
}

impl std::ops::Index<usize> for Policy {
    type Output = Action;

    fn index(&self, i: usize) -> &Action {
        &self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// Sup-norm change of the last backup.
    pub residual: f64,
    /// `gamma * residual / (1 - gamma)`.
    pub optimality_bound: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub value: ValueFunction,
    pub policy: Policy,
    pub report: SolveReport,
}

#[derive(Debug, Clone, Error)]
pub enum SolveError {
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error(
        "value iteration stopped after {} iterations with residual {:e}",
        .0.report.iterations,
        .0.report.residual
    )]
    NotConverged(Box<Solution>),
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[inline]
fn q_value(kernel: &TransitionKernel, v: &[f64], gamma: f64, state: usize, a: Action) -> f64 {
    kernel.costs()[state] + gamma * kernel.row(state, a).expect(v)
}

/// One synchronous application of the Bellman operator. Returns the new
/// iterate and its sup-norm distance from `v`.
pub fn bellman_backup(
    v: &ValueFunction,
    kernel: &TransitionKernel,
    cfg: &ScenarioConfig,
) -> (ValueFunction, f64) {
    let mut out = vec![0.0; v.len()];
    let delta = backup_into(&v.0, &mut out, kernel, cfg.gamma);
    (ValueFunction(out), delta)
}

fn backup_into(v: &[f64], out: &mut [f64], kernel: &TransitionKernel, gamma: f64) -> f64 {
    let space = kernel.space();
    out.par_iter_mut()
        .enumerate()
        .with_min_len(256)
        .map(|(i, slot)| {
            let hold = q_value(kernel, v, gamma, i, Action::Hold);
            *slot = if space.state_unchecked(i).e > 0 {
                hold.min(q_value(kernel, v, gamma, i, Action::Transmit))
            } else {
                hold
            };
            (*slot - v[i]).abs()
        })
        .reduce(|| 0.0, f64::max)
}

/// Solves the discounted problem for `cfg` from scratch.
pub fn value_iteration(
    cfg: &ScenarioConfig,
    tol: f64,
    max_iter: usize,
) -> Result<Solution, SolveError> {
    let kernel = build_kernel(cfg);
    value_iteration_with_kernel(&kernel, tol, max_iter)
}

/// Value iteration on a prebuilt kernel.
pub fn value_iteration_with_kernel(
    kernel: &TransitionKernel,
    tol: f64,
    max_iter: usize,
) -> Result<Solution, SolveError> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(SolveError::InvalidTolerance(tol));
    }
    let gamma = kernel.config().gamma;
    let n = kernel.num_states();
    let mut current = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        residual = backup_into(&current, &mut next, kernel, gamma);
        std::mem::swap(&mut current, &mut next);
        iterations += 1;
        if residual < tol {
            break;
        }
    }
    let value = ValueFunction(current);
    let policy = extract_policy(&value, kernel);
    let converged = residual < tol;
    let solution = Solution {
        value,
        policy,
        report: SolveReport {
            iterations,
            residual,
            optimality_bound: gamma * residual / (1.0 - gamma),
            converged,
        },
    };
    if converged {
        Ok(solution)
    } else {
        Err(SolveError::NotConverged(Box::new(solution)))
    }
}

/// `Q(s, Transmit) - Q(s, Hold)` under `v`. Zero on an empty buffer, where
/// both rows coincide.
pub fn action_value_gap(v: &ValueFunction, kernel: &TransitionKernel, state: usize) -> f64 {
    let gamma = kernel.config().gamma;
    q_value(kernel, &v.0, gamma, state, Action::Transmit)
        - q_value(kernel, &v.0, gamma, state, Action::Hold)
}

/// Greedy policy; transmits only when the gap is below `-TIE_TOLERANCE`.
pub fn extract_policy(v: &ValueFunction, kernel: &TransitionKernel) -> Policy {
    let actions = (0..kernel.num_states())
        .into_par_iter()
        .map(|i| {
            if action_value_gap(v, kernel, i) < -TIE_TOLERANCE {
                Action::Transmit
            } else {
                Action::Hold
            }
        })
        .collect();
    Policy(actions)
}

/// `N`-stage discounted cost with zero terminal value, by plain backward
/// induction over the disturbance law. Shares no code with the kernel rows
/// or [`bellman_backup`].
pub fn finite_horizon_oracle(cfg: &ScenarioConfig, horizon: usize) -> ValueFunction {
    assert!(horizon >= 1, "horizon must be at least 1");
    let space = StateSpace::new(*cfg);
    // unmerged (successor, probability) lists per state and action
    let branches: Vec<Vec<Vec<(usize, f64)>>> = space
        .states()
        .map(|s| {
            let actions: &[Action] = if s.e == 0 { &[Action::Hold] } else { &Action::ALL };
            actions
                .iter()
                .map(|&a| {
                    disturbance_distribution(&s, a, cfg)
                        .into_iter()
                        .map(|(w, p)| {
                            let next = next_state(&s, a, &w, cfg).expect("admissible");
                            (space.index_unchecked(&next), p)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let costs: Vec<f64> = space.states().map(|s| stage_cost(&s, cfg)).collect();

    let mut tail = vec![0.0; space.size()];
    for _ in 0..horizon {
        let mut stage = vec![0.0; space.size()];
        for (i, options) in branches.iter().enumerate() {
            let mut best = f64::INFINITY;
            for atoms in options {
                let mut expected = 0.0;
                for &(j, p) in atoms {
                    expected += p * tail[j];
                }
                best = best.min(expected);
            }
            stage[i] = costs[i] + cfg.gamma * best;
        }
        tail = stage;
    }
    ValueFunction(tail)
}

/// `(z, z_d, e)`.
pub type SliceKey = (u8, u8, usize);

/// Witness that an ordering property fails between two AoI pairs of a
/// slice, `lower <= upper` element-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub slice: SliceKey,
    pub lower: (usize, usize),
    pub upper: (usize, usize),
    /// Amount by which the inequality is exceeded (1 for policy checks).
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StructureReport {
    pub holds: bool,
    pub violations: Vec<Violation>,
}

impl StructureReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            holds: violations.is_empty(),
            violations,
        }
    }
}

/// Restricts checks to a subset of states; pairs are compared only when
/// both members are in scope.
#[derive(Debug, Clone, Default)]
pub enum CheckScope {
    #[default]
    All,
    Only(BTreeSet<usize>),
}

impl CheckScope {
    fn contains(&self, i: usize) -> bool {
        match self {
            CheckScope::All => true,
            CheckScope::Only(set) => set.contains(&i),
        }
    }
}

fn slices(cfg: &ScenarioConfig) -> Vec<SliceKey> {
    let mut out = Vec::with_capacity(4 * (cfg.e_max + 1));
    for z in 0..2 {
        for z_d in 0..2 {
            for e in 0..=cfg.e_max {
                out.push((z, z_d, e));
            }
        }
    }
    out
}

fn age_pairs(cfg: &ScenarioConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity((cfg.d_max0 + 1) * (cfg.d_max1 + 1));
    for d0 in 0..=cfg.d_max0 {
        for d1 in 0..=cfg.d_max1 {
            out.push((d0, d1));
        }
    }
    out
}

/// Visits every dominated pair `lower <= upper` (including equal pairs)
/// within every slice and collects the violations `test` reports.
fn scan_pairs<F>(space: &StateSpace, scope: &CheckScope, test: F) -> Vec<Violation>
where
    F: Fn(SliceKey, usize, usize) -> Option<f64> + Sync,
{
    let cfg = *space.config();
    let pairs = age_pairs(&cfg);
    slices(&cfg)
        .into_par_iter()
        .flat_map_iter(|key| {
            let (z, z_d, e) = key;
            let idx = |(d0, d1): (usize, usize)| {
                space.index_unchecked(&SystemState::new(z, z_d, e, d0, d1))
            };
            let mut found = Vec::new();
            for &lo in &pairs {
                let i = idx(lo);
                if !scope.contains(i) {
                    continue;
                }
                for &hi in pairs.iter().filter(|hi| hi.0 >= lo.0 && hi.1 >= lo.1) {
                    let j = idx(hi);
                    if !scope.contains(j) {
                        continue;
                    }
                    if let Some(excess) = test(key, i, j) {
                        found.push(Violation {
                            slice: key,
                            lower: lo,
                            upper: hi,
                            excess,
                        });
                    }
                }
            }
            found
        })
        .collect()
}

/// Up-closure of the transmit region in every slice.
pub fn check_threshold_structure(policy: &Policy, cfg: &ScenarioConfig) -> StructureReport {
    check_threshold_structure_in(policy, cfg, &CheckScope::All)
}

pub fn check_threshold_structure_in(
    policy: &Policy,
    cfg: &ScenarioConfig,
    scope: &CheckScope,
) -> StructureReport {
    let space = StateSpace::new(*cfg);
    assert_eq!(policy.len(), space.size(), "policy size mismatch");
    let violations = scan_pairs(&space, scope, |_, lo, hi| {
        (policy[lo] == Action::Transmit && policy[hi] == Action::Hold).then_some(1.0)
    });
    StructureReport::from_violations(violations)
}

/// Monotonicity of the action-value gap within every slice, plus an exact
/// zero gap on the empty-buffer slices.
pub fn check_gap_monotonicity(v: &ValueFunction, kernel: &TransitionKernel) -> StructureReport {
    check_gap_monotonicity_in(v, kernel, &CheckScope::All)
}

pub fn check_gap_monotonicity_in(
    v: &ValueFunction,
    kernel: &TransitionKernel,
    scope: &CheckScope,
) -> StructureReport {
    let gaps: Vec<f64> = (0..kernel.num_states())
        .into_par_iter()
        .map(|i| action_value_gap(v, kernel, i))
        .collect();
    let violations = scan_pairs(kernel.space(), scope, |(_, _, e), lo, hi| {
        if e == 0 {
            // exact: both rows are identical on an empty buffer
            let worst = gaps[lo].abs().max(gaps[hi].abs());
            (worst != 0.0).then_some(worst)
        } else {
            let excess = gaps[hi] - gaps[lo];
            (excess > CHECK_SLACK).then_some(excess)
        }
    });
    StructureReport::from_violations(violations)
}

/// The energy-exchange inequality between adjacent buffer levels.
/// Violations are reported on the slice with the higher energy level.
pub fn check_lemma1_inequality(v: &ValueFunction, cfg: &ScenarioConfig) -> StructureReport {
    check_lemma1_inequality_in(v, cfg, &CheckScope::All)
}

pub fn check_lemma1_inequality_in(
    v: &ValueFunction,
    cfg: &ScenarioConfig,
    scope: &CheckScope,
) -> StructureReport {
    let space = StateSpace::new(*cfg);
    assert_eq!(v.len(), space.size(), "value function size mismatch");
    let keep = 1.0 - cfg.p_s;
    let violations = scan_pairs(&space, scope, |(_, _, e), lo, hi| {
        if e == 0 {
            return None;
        }
        // same AoI pair, one energy unit less
        let below = |i: usize| {
            let mut s = space.state_unchecked(i);
            s.e -= 1;
            space.index_unchecked(&s)
        };
        let (lo_m, hi_m) = (below(lo), below(hi));
        if !(scope.contains(lo_m) && scope.contains(hi_m)) {
            return None;
        }
        let lhs = keep * (v[hi_m] - v[lo_m]);
        let rhs = v[hi] - v[lo];
        let excess = lhs - rhs;
        (excess > CHECK_SLACK).then_some(excess)
    });
    StructureReport::from_violations(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> ScenarioConfig {
        ScenarioConfig {
            e_max: 1,
            d_max0: 2,
            d_max1: 2,
            gamma: 0.9,
            ..Default::default()
        }
    }

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            e_max: 2,
            d_max0: 4,
            d_max1: 4,
            gamma: 0.95,
            ..Default::default()
        }
    }

    #[test]
    fn backup_of_zero_is_stage_cost() {
        let cfg = small();
        let k = build_kernel(&cfg);
        let (out, delta) = bellman_backup(&ValueFunction::zeros(k.num_states()), &k, &cfg);
        assert_eq!(out.values(), k.costs());
        assert_eq!(delta, k.costs().iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn backup_at_empty_buffer_uses_hold_only() {
        let cfg = small();
        let k = build_kernel(&cfg);
        let v = ValueFunction((0..k.num_states()).map(|i| (i % 7) as f64).collect());
        let (out, _) = bellman_backup(&v, &k, &cfg);
        for (i, s) in k.space().states().enumerate().filter(|(_, s)| s.e == 0) {
            let hold = k.costs()[i] + cfg.gamma * k.row(i, Action::Hold).expect(&v.0);
            assert_eq!(out[i], hold, "{s}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn backup_contracts(seed_a in prop::collection::vec(0.0f64..500.0, 72),
                            seed_b in prop::collection::vec(0.0f64..500.0, 72)) {
            let cfg = tiny();
            let k = build_kernel(&cfg);
            prop_assert_eq!(k.num_states(), 72);
            let (a, b) = (ValueFunction(seed_a), ValueFunction(seed_b));
            let (ta, _) = bellman_backup(&a, &k, &cfg);
            let (tb, _) = bellman_backup(&b, &k, &cfg);
            prop_assert!(ta.sup_distance(&tb) <= cfg.gamma * a.sup_distance(&b) + 1e-9);
        }
    }

    #[test]
    fn value_iteration_converges_within_bounds() {
        let cfg = small();
        let sol = value_iteration(&cfg, 1e-9, DEFAULT_MAX_ITER).unwrap();
        assert!(sol.report.converged);
        assert!(sol.report.residual < 1e-9);
        let bound = cfg.value_bound();
        assert!(sol.value.values().iter().all(|&x| (0.0..=bound).contains(&x)));
        let space = StateSpace::new(cfg);
        assert_eq!(sol.policy.first_inadmissible(&space), None);
    }

    #[test]
    fn not_converged_carries_partial_result() {
        match value_iteration(&small(), 1e-9, 10) {
            Err(SolveError::NotConverged(sol)) => {
                assert_eq!(sol.report.iterations, 10);
                assert!(!sol.report.converged);
                assert_eq!(sol.value.len(), StateSpace::new(small()).size());
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
        assert!(matches!(
            value_iteration(&small(), 0.0, 10),
            Err(SolveError::InvalidTolerance(_))
        ));
    }

    #[test]
    fn no_buffer_means_never_transmit() {
        let cfg = ScenarioConfig { e_max: 0, ..small() };
        let sol = value_iteration(&cfg, 1e-10, DEFAULT_MAX_ITER).unwrap();
        assert!(sol.policy.actions().iter().all(|&a| a == Action::Hold));
        // V solves V = g + gamma P V for the single available action
        let k = build_kernel(&cfg);
        for i in 0..k.num_states() {
            let rhs = k.costs()[i] + cfg.gamma * k.row(i, Action::Hold).expect(&sol.value.0);
            assert!((sol.value[i] - rhs).abs() < 1e-8);
        }
    }

    #[test]
    fn oracle_first_stage_and_monotone_in_horizon() {
        let cfg = tiny();
        let v1 = finite_horizon_oracle(&cfg, 1);
        let space = StateSpace::new(cfg);
        for (i, s) in space.states().enumerate() {
            assert_eq!(v1[i], stage_cost(&s, &cfg));
        }
        let mut prev = v1;
        for n in [2, 5, 20, 80] {
            let vn = finite_horizon_oracle(&cfg, n);
            assert!(vn.values().iter().zip(prev.values()).all(|(a, b)| a >= b));
            prev = vn;
        }
    }

    #[test]
    fn value_iteration_matches_oracle() {
        let cfg = ScenarioConfig { gamma: 0.99, ..tiny() };
        let sol = value_iteration(&cfg, 1e-11, DEFAULT_MAX_ITER).unwrap();
        let n = 2000;
        let vn = finite_horizon_oracle(&cfg, n);
        let bound = cfg.gamma.powi(n as i32) * cfg.value_bound();
        assert!(sol.value.sup_distance(&vn) <= bound + 1e-9);
    }

    #[test]
    fn policy_follows_gap_sign() {
        let cfg = small();
        let k = build_kernel(&cfg);
        let sol = value_iteration_with_kernel(&k, 1e-9, DEFAULT_MAX_ITER).unwrap();
        for i in 0..k.num_states() {
            let gap = action_value_gap(&sol.value, &k, i);
            assert_eq!(sol.policy[i] == Action::Transmit, gap < -TIE_TOLERANCE);
            if k.space().state_unchecked(i).e == 0 {
                assert_eq!(gap, 0.0);
            }
        }
    }

    #[test]
    fn useless_channel_never_transmits() {
        let cfg = ScenarioConfig { p_s: 0.0, ..small() };
        let k = build_kernel(&cfg);
        let sol = value_iteration_with_kernel(&k, 1e-10, DEFAULT_MAX_ITER).unwrap();
        for i in 0..k.num_states() {
            assert!(action_value_gap(&sol.value, &k, i) >= -TIE_TOLERANCE);
        }
        assert!(sol.policy.actions().iter().all(|&a| a == Action::Hold));
    }

    #[test]
    fn threshold_checker_flags_isolated_transmit() {
        let cfg = small();
        let space = StateSpace::new(cfg);
        let mut policy = Policy::never(space.size());
        assert!(check_threshold_structure(&policy, &cfg).holds);

        let i = space.index_unchecked(&SystemState::new(0, 0, 1, 1, 1));
        policy.0[i] = Action::Transmit;
        let report = check_threshold_structure(&policy, &cfg);
        assert!(!report.holds);
        assert!(report
            .violations
            .iter()
            .any(|v| v.slice == (0, 0, 1) && v.lower == (1, 1) && v.upper == (2, 2)));
        assert!(report.violations.iter().all(|v| v.lower == (1, 1)));
    }

    #[test]
    fn scoped_threshold_check_ignores_out_of_scope_states() {
        let cfg = small();
        let space = StateSpace::new(cfg);
        let mut policy = Policy::never(space.size());
        let i = space.index_unchecked(&SystemState::new(0, 0, 1, 1, 1));
        policy.0[i] = Action::Transmit;
        let scope = CheckScope::Only((0..space.size()).filter(|&j| j != i).collect());
        assert!(check_threshold_structure_in(&policy, &cfg, &scope).holds);
    }

    #[test]
    fn structure_holds_on_small_optimum() {
        let cfg = small();
        let k = build_kernel(&cfg);
        let sol = value_iteration_with_kernel(&k, 1e-10, DEFAULT_MAX_ITER).unwrap();
        assert!(check_threshold_structure(&sol.policy, &cfg).holds);
        assert!(check_gap_monotonicity(&sol.value, &k).holds);
        assert!(check_lemma1_inequality(&sol.value, &cfg).holds);
    }

    #[test]
    fn lemma1_with_certain_success_reduces_to_monotone_value() {
        let cfg = ScenarioConfig { p_s: 1.0, ..small() };
        let sol = value_iteration(&cfg, 1e-10, DEFAULT_MAX_ITER).unwrap();
        assert!(check_lemma1_inequality(&sol.value, &cfg).holds);
    }

    #[test]
    fn lemma1_checker_detects_broken_values() {
        let cfg = small();
        let space = StateSpace::new(cfg);
        // V decreasing in d0 on the e = 1 slices breaks the right-hand side
        let v = ValueFunction(
            space
                .states()
                .map(|s| if s.e == 1 { 10.0 - s.d0 as f64 } else { 0.0 })
                .collect(),
        );
        let report = check_lemma1_inequality(&v, &cfg);
        assert!(!report.holds);
        assert!(report.violations.iter().all(|v| v.slice.2 == 1));
    }
}
