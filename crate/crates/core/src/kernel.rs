//! Single-slot dynamics and the sparse transition kernel.
//!
//! Given a state, an action and a disturbance `(W^s, W^e, W^z)` the next
//! state is deterministic ([`next_state`]). The disturbance components are
//! independent Bernoulli draws, so every `(state, action)` row of the kernel
//! has at most eight atoms before merging duplicate successors.

use std::collections::{BTreeSet, VecDeque};

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{Action, RandomVector, ScenarioConfig, StateSpace, SystemState};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("action {action:?} is not admissible in state {state}")]
    InadmissibleAction { state: SystemState, action: Action },
    #[error("channel success reported without a transmission attempt in state {state}")]
    InvalidDisturbance { state: SystemState },
}

/// `{Hold}` on an empty buffer, both actions otherwise.
pub fn admissible_actions(s: &SystemState) -> &'static [Action] {
    if s.e == 0 {
        &[Action::Hold]
    } else {
        &Action::ALL
    }
}

/// Outcome of one slot, including whether a harvested unit was lost to a
/// full buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub state: SystemState,
    pub energy_discarded: bool,
}

/// Applies one slot of the dynamics.
pub fn next_state(
    s: &SystemState,
    a: Action,
    w: &RandomVector,
    cfg: &ScenarioConfig,
) -> Result<SystemState, KernelError> {
    step(s, a, w, cfg).map(|st| st.state)
}

/// [`next_state`] that also reports buffer overflow.
pub fn step(
    s: &SystemState,
    a: Action,
    w: &RandomVector,
    cfg: &ScenarioConfig,
) -> Result<Step, KernelError> {
    if !a.is_admissible(s) {
        return Err(KernelError::InadmissibleAction {
            state: *s,
            action: a,
        });
    }
    if w.w_s && a == Action::Hold {
        return Err(KernelError::InvalidDisturbance { state: *s });
    }
    Ok(step_unchecked(s, a, w, cfg))
}

#[inline]
fn step_unchecked(s: &SystemState, a: Action, w: &RandomVector, cfg: &ScenarioConfig) -> Step {
    let z_d = if w.w_s { s.z } else { s.z_d };
    let raw_e = s.e + w.w_e as usize - a.as_u8() as usize;
    let e = raw_e.min(cfg.e_max);
    Step {
        state: SystemState {
            z: w.w_z,
            z_d,
            e,
            d0: next_age(s, 0, w.w_s, cfg.d_max0),
            d1: next_age(s, 1, w.w_s, cfg.d_max1),
        },
        energy_discarded: raw_e > cfg.e_max,
    }
}

/// Recursive age update for the counter tied to source state `source`.
#[inline]
fn next_age(s: &SystemState, source: u8, success: bool, cap: usize) -> usize {
    let age = s.age(source);
    if success {
        if source == s.z {
            1
        } else {
            0
        }
    } else if s.z != s.z_d || source == s.z {
        // destination is out of date, or this is the known active state
        (age + 1).min(cap)
    } else {
        0
    }
}

fn bernoulli(p: f64) -> [(bool, f64); 2] {
    [(false, 1.0 - p), (true, p)]
}

/// Joint law of `(W^s, W^e, W^z)` given the state and action, with zero
/// atoms removed. `W^s` is forced to zero unless a transmission is attempted
/// with energy in the buffer.
pub fn disturbance_distribution(
    s: &SystemState,
    a: Action,
    cfg: &ScenarioConfig,
) -> Vec<(RandomVector, f64)> {
    let attempt = a == Action::Transmit && s.e > 0;
    let success: &[(bool, f64)] = if attempt {
        &[(false, 1.0 - cfg.p_s), (true, cfg.p_s)]
    } else {
        &[(false, 1.0)]
    };
    let row = cfg.p_z[s.z as usize];
    let mut out = Vec::with_capacity(8);
    for &(w_s, ps) in success {
        for (w_e, pe) in bernoulli(cfg.p_e) {
            for (w_z, pz) in [(0u8, row[0]), (1u8, row[1])] {
                let p = ps * pe * pz;
                if p > 0.0 {
                    out.push((RandomVector::new(w_s, w_e, w_z), p));
                }
            }
        }
    }
    out
}

/// Successor distribution of `(s, a)`, duplicates merged, sorted by state
/// index. Transmitting on an empty buffer is treated as holding.
pub fn transition_distribution(
    s: &SystemState,
    a: Action,
    cfg: &ScenarioConfig,
) -> Vec<(SystemState, f64)> {
    let space = StateSpace::new(*cfg);
    merged_row(&space, s, a)
        .into_iter()
        .map(|(i, p)| (space.state_unchecked(i), p))
        .collect()
}

fn merged_row(space: &StateSpace, s: &SystemState, a: Action) -> Vec<(usize, f64)> {
    let cfg = space.config();
    let a = if a.is_admissible(s) { a } else { Action::Hold };
    let mut atoms: Vec<(usize, f64)> = disturbance_distribution(s, a, cfg)
        .into_iter()
        .map(|(w, p)| {
            let next = step_unchecked(s, a, &w, cfg).state;
            (space.index_unchecked(&next), p)
        })
        .collect();
    atoms.sort_by_key(|&(i, _)| i);
    let mut merged: Vec<(usize, f64)> = Vec::with_capacity(atoms.len());
    for (i, p) in atoms {
        match merged.last_mut() {
            Some((j, q)) if *j == i => *q += p,
            _ => merged.push((i, p)),
        }
    }
    merged
}

/// `(1 - z) f(d0) + z h(d1)`; independent of the action.
#[inline]
pub fn stage_cost(s: &SystemState, cfg: &ScenarioConfig) -> f64 {
    if s.z == 0 {
        cfg.cost.normal(s.d0)
    } else {
        cfg.cost.alarm(s.d1)
    }
}

/// One `(state, action)` row of the kernel.
#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    pub successors: &'a [u32],
    pub probabilities: &'a [f64],
}

impl<'a> Row<'a> {
    pub fn len(&self) -> usize {
        self.successors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.successors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + 'a {
        self.successors
            .iter()
            .zip(self.probabilities)
            .map(|(&i, &p)| (i as usize, p))
    }

    /// `sum_j P(j) v[j]`.
    #[inline]
    pub fn expect(&self, v: &[f64]) -> f64 {
        self.successors
            .iter()
            .zip(self.probabilities)
            .map(|(&i, &p)| p * v[i as usize])
            .sum()
    }
}

/// Sparse kernel in compressed-row form. Row `2 * state + action` holds the
/// successor distribution; at `e = 0` the transmit row is a copy of the hold
/// row. Stage costs are cached alongside.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    space: StateSpace,
    costs: Vec<f64>,
    offsets: Vec<usize>,
    successors: Vec<u32>,
    probabilities: Vec<f64>,
}

impl TransitionKernel {
    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn config(&self) -> &ScenarioConfig {
        self.space.config()
    }

    pub fn num_states(&self) -> usize {
        self.space.size()
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    #[inline]
    pub fn row(&self, state: usize, action: Action) -> Row<'_> {
        let r = 2 * state + action.as_u8() as usize;
        let (lo, hi) = (self.offsets[r], self.offsets[r + 1]);
        Row {
            successors: &self.successors[lo..hi],
            probabilities: &self.probabilities[lo..hi],
        }
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_atoms(&self) -> usize {
        self.successors.len()
    }
}

/// Builds rows for every `(state, action)` pair of the full product space.
pub fn build_kernel(cfg: &ScenarioConfig) -> TransitionKernel {
    let space = StateSpace::new(*cfg);
    assert!(
        space.size() <= u32::MAX as usize,
        "state space too large for 32-bit successor indices"
    );
    let rows: Vec<[Vec<(usize, f64)>; 2]> = (0..space.size())
        .into_par_iter()
        .map(|i| {
            let s = space.state_unchecked(i);
            let hold = merged_row(&space, &s, Action::Hold);
            let transmit = if s.e > 0 {
                merged_row(&space, &s, Action::Transmit)
            } else {
                hold.clone()
            };
            [hold, transmit]
        })
        .collect();

    let mut offsets = Vec::with_capacity(2 * space.size() + 1);
    let mut successors = Vec::with_capacity(space.size() * 8);
    let mut probabilities = Vec::with_capacity(space.size() * 8);
    offsets.push(0);
    for row in rows.iter().flatten() {
        for &(j, p) in row {
            successors.push(j as u32);
            probabilities.push(p);
        }
        offsets.push(successors.len());
    }
    let costs = space.states().map(|s| stage_cost(&s, cfg)).collect();
    TransitionKernel {
        space,
        costs,
        offsets,
        successors,
        probabilities,
    }
}

/// Forward closure of `s0` under every admissible action.
pub fn reachable_states(kernel: &TransitionKernel, s0: &SystemState) -> BTreeSet<usize> {
    let space = kernel.space();
    let start = space.index_unchecked(s0);
    let mut seen = vec![false; space.size()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        for a in Action::ALL {
            for (j, _) in kernel.row(i, a).iter() {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    seen.iter()
        .enumerate()
        .filter_map(|(i, &r)| r.then_some(i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg() -> ScenarioConfig {
        ScenarioConfig::default()
    }

    #[test]
    fn admissibility() {
        let c = cfg();
        assert_eq!(admissible_actions(&SystemState::new(0, 0, 0, 1, 0)), &[Action::Hold]);
        assert_eq!(admissible_actions(&SystemState::new(0, 0, 1, 1, 0)).len(), 2);
        assert_eq!(
            admissible_actions(&SystemState::new(1, 0, c.e_max, 1, 0)).len(),
            2
        );
    }

    #[test]
    fn dynamics_examples() {
        let c = cfg();
        let t = Action::Transmit;
        let h = Action::Hold;
        assert_eq!(
            next_state(&SystemState::new(0, 0, 2, 3, 0), t, &RandomVector::new(true, false, 0), &c),
            Ok(SystemState::new(0, 0, 1, 1, 0))
        );
        assert_eq!(
            next_state(&SystemState::new(0, 1, 1, 4, 6), h, &RandomVector::new(false, true, 1), &c),
            Ok(SystemState::new(1, 1, 2, 5, 7))
        );
        assert_eq!(
            next_state(&SystemState::new(1, 0, 1, 2, 9), t, &RandomVector::new(true, true, 1), &c),
            Ok(SystemState::new(1, 1, 1, 0, 1))
        );
        let full = SystemState::new(0, 0, c.e_max, 1, 0);
        let st = step(&full, h, &RandomVector::new(false, true, 0), &c).unwrap();
        assert_eq!(st.state.e, c.e_max);
        assert!(st.energy_discarded);
    }

    #[test]
    fn saturation_holds_at_cap() {
        let c = ScenarioConfig { d_max0: 4, d_max1: 3, ..cfg() };
        let s = SystemState::new(1, 0, 0, 4, 3);
        let n = next_state(&s, Action::Hold, &RandomVector::new(false, false, 1), &c).unwrap();
        assert_eq!((n.d0, n.d1), (4, 3));
    }

    #[test]
    fn forcing_rule_and_admissibility_errors() {
        let c = cfg();
        let s = SystemState::new(0, 0, 2, 1, 0);
        assert_eq!(
            next_state(&s, Action::Hold, &RandomVector::new(true, false, 0), &c),
            Err(KernelError::InvalidDisturbance { state: s })
        );
        let empty = SystemState::new(0, 0, 0, 1, 0);
        assert!(matches!(
            next_state(&empty, Action::Transmit, &RandomVector::new(false, false, 0), &c),
            Err(KernelError::InadmissibleAction { .. })
        ));
    }

    #[test]
    fn disturbance_law() {
        let c = cfg();
        let s = SystemState::new(0, 0, 2, 1, 0);
        let d = disturbance_distribution(&s, Action::Transmit, &c);
        assert_eq!(d.len(), 8);
        let p = d
            .iter()
            .find(|(w, _)| *w == RandomVector::new(true, true, 0))
            .unwrap()
            .1;
        assert_abs_diff_eq!(p, 0.8 * 0.8 * 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(d.iter().map(|x| x.1).sum::<f64>(), 1.0, epsilon = 1e-12);

        for (st, a) in [
            (s, Action::Hold),
            (SystemState::new(0, 0, 0, 1, 0), Action::Transmit),
        ] {
            let d = disturbance_distribution(&st, a, &c);
            assert_eq!(d.len(), 4);
            assert!(d.iter().all(|(w, _)| !w.w_s));
        }

        let c1 = ScenarioConfig { p_e: 1.0, ..c };
        assert!(disturbance_distribution(&s, Action::Transmit, &c1)
            .iter()
            .all(|(w, _)| w.w_e));
    }

    #[test]
    fn hold_transition_from_reference_start() {
        // enumerated by hand over (w_e, w_z) with w_s = 0
        let c = cfg();
        let got = transition_distribution(&SystemState::reference_start(), Action::Hold, &c);
        let want = [
            (SystemState::new(0, 0, 0, 2, 0), 0.2 * 0.9),
            (SystemState::new(0, 0, 1, 2, 0), 0.8 * 0.9),
            (SystemState::new(1, 0, 0, 2, 0), 0.2 * 0.1),
            (SystemState::new(1, 0, 1, 2, 0), 0.8 * 0.1),
        ];
        assert_eq!(got.len(), want.len());
        for ((gs, gp), (ws, wp)) in got.iter().zip(want.iter()) {
            assert_eq!(gs, ws);
            assert_abs_diff_eq!(*gp, *wp, epsilon = 1e-15);
        }
    }

    #[test]
    fn certain_success_overwrites_known_state() {
        let c = ScenarioConfig { p_s: 1.0, ..cfg() };
        let s = SystemState::new(1, 0, 2, 3, 4);
        for (next, _) in transition_distribution(&s, Action::Transmit, &c) {
            assert_eq!(next.z_d, 1);
        }
    }

    #[test]
    fn stage_costs() {
        let c = cfg();
        assert_eq!(stage_cost(&SystemState::new(0, 0, 0, 3, 0), &c), 3.0);
        assert_eq!(stage_cost(&SystemState::new(1, 1, 0, 7, 4), &c), 16.0);
        assert_eq!(stage_cost(&SystemState::new(1, 1, 0, 7, 0), &c), 0.0);
        assert_eq!(c.max_stage_cost(), 100.0);
        assert_abs_diff_eq!(c.value_bound(), 1e4, epsilon = 1e-9);
    }

    #[test]
    fn reference_kernel_shape() {
        let k = build_kernel(&cfg());
        assert_eq!(k.num_states(), 2904);
        assert_eq!(k.num_rows(), 5808);
        for i in 0..k.num_states() {
            for a in Action::ALL {
                let row = k.row(i, a);
                assert!((1..=8).contains(&row.len()));
                assert!(row.probabilities.iter().all(|&p| p > 0.0));
                assert!((row.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(row.successors.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn empty_buffer_rows_alias() {
        let k = build_kernel(&cfg());
        let sp = *k.space();
        for (i, s) in sp.states().enumerate().filter(|(_, s)| s.e == 0) {
            let (h, t) = (k.row(i, Action::Hold), k.row(i, Action::Transmit));
            assert_eq!(h.successors, t.successors, "{s}");
            assert_eq!(h.probabilities, t.probabilities);
        }
    }

    #[test]
    fn reachability_from_reference_start() {
        let c = cfg();
        let k = build_kernel(&c);
        let s0 = SystemState::reference_start();
        let reach = reachable_states(&k, &s0);
        let sp = k.space();
        assert!(reach.contains(&sp.index_unchecked(&s0)));
        let mut lagged = 0;
        for &i in &reach {
            let s = sp.state_unchecked(i);
            // a delivered normal-state report always leaves d0 >= 1
            assert!(!(s.z == 0 && s.z_d == 0 && s.d0 == 0), "{s}");
            if s.z == 0 && s.z_d == 0 && s.d1 > 0 {
                // the alarm counter survives exactly one slot after the
                // source silently returns to the known state
                lagged += 1;
                for a in Action::ALL {
                    for (j, _) in k.row(i, a).iter() {
                        assert_eq!(sp.state_unchecked(j).d1, 0);
                    }
                }
            }
        }
        assert!(lagged > 0);
        // closure: one more expansion adds nothing
        for &i in &reach {
            for a in Action::ALL {
                for (j, _) in k.row(i, a).iter() {
                    assert!(reach.contains(&j));
                }
            }
        }
        assert!(reach.len() < sp.size());
    }
}
