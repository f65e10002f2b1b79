//! Seeded Monte Carlo rollouts and an independent AoI bookkeeping oracle.
//!
//! Every episode draws from its own ChaCha8 stream selected by episode
//! index under the master seed, so estimates are bit-identical regardless of
//! how episodes are scheduled across threads. Randomised decision rules get
//! a separate stream from the disturbances.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::kernel::{stage_cost, step};
use crate::model::{Action, RandomVector, ScenarioConfig, StateSpace, SystemState};
use crate::solver::Policy;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("truncation bound {bound:e} for horizon {horizon} exceeds the cap {cap:e}")]
    TruncationTooCoarse { bound: f64, horizon: usize, cap: f64 },
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("at least one episode is required")]
    NoEpisodes,
    #[error("initial state {0} is outside the state space")]
    InvalidStart(SystemState),
    #[error("policy covers {got} states, the state space has {expected}")]
    PolicySize { got: usize, expected: usize },
}

/// Anything that can pick an action each slot.
pub trait DecisionRule: Sync {
    /// Must return an admissible action for `state`.
    fn decide(&self, state: &SystemState, index: usize, rng: &mut dyn RngCore) -> Action;

    /// Number of states the rule is defined on, if it is tabular.
    fn table_size(&self) -> Option<usize> {
        None
    }
}

impl DecisionRule for Policy {
    fn decide(&self, _state: &SystemState, index: usize, _rng: &mut dyn RngCore) -> Action {
        self[index]
    }

    fn table_size(&self) -> Option<usize> {
        Some(self.len())
    }
}

/// Reference policies to compare the optimum against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    Never,
    Always,
    /// Transmit with this probability whenever the buffer is non-empty.
    Random(f64),
    /// Transmit only while the source is in alarm.
    AlarmOnly,
}

impl Baseline {
    pub fn name(&self) -> String {
        match self {
            Baseline::Never => "never".into(),
            Baseline::Always => "always".into(),
            Baseline::Random(p) => format!("random:{p}"),
            Baseline::AlarmOnly => "alarm_only".into(),
        }
    }

    /// Parses `never`, `always`, `alarm_only` or `random:<p>`.
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "never" => Some(Baseline::Never),
            "always" => Some(Baseline::Always),
            "alarm_only" => Some(Baseline::AlarmOnly),
            _ => {
                let p: f64 = name.strip_prefix("random:")?.parse().ok()?;
                (0.0..=1.0).contains(&p).then_some(Baseline::Random(p))
            }
        }
    }
}

pub fn make_baseline(kind: Baseline) -> Baseline {
    if let Baseline::Random(p) = kind {
        assert!((0.0..=1.0).contains(&p), "transmit probability must lie in [0, 1]");
    }
    kind
}

impl DecisionRule for Baseline {
    fn decide(&self, state: &SystemState, _index: usize, rng: &mut dyn RngCore) -> Action {
        if state.e == 0 {
            return Action::Hold;
        }
        let transmit = match *self {
            Baseline::Never => false,
            Baseline::Always => true,
            Baseline::Random(p) => rng.random::<f64>() < p,
            Baseline::AlarmOnly => state.z == 1,
        };
        if transmit {
            Action::Transmit
        } else {
            Action::Hold
        }
    }
}

/// Draws `(W^s, W^e, W^z)`. Always consumes three uniforms so streams stay
/// aligned across actions.
pub fn sample_disturbance<R: Rng + ?Sized>(
    s: &SystemState,
    a: Action,
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> RandomVector {
    let (us, ue, uz): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let attempt = a == Action::Transmit && s.e > 0;
    RandomVector {
        w_s: attempt && us < cfg.p_s,
        w_e: ue < cfg.p_e,
        w_z: u8::from(uz >= cfg.p_z[s.z as usize][0]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub k: usize,
    pub state: SystemState,
    pub action: Action,
    pub disturbance: RandomVector,
    pub cost: f64,
    /// A harvested unit arrived at a full buffer and was lost.
    pub energy_discarded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub steps: Vec<TraceStep>,
    pub seed: u64,
    pub horizon: usize,
    /// `(d_max0, d_max1)` of the generating config.
    pub age_caps: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub mean_discounted_cost: f64,
    pub std_error: f64,
    pub n_episodes: usize,
    pub horizon: usize,
    /// `gamma^horizon * g_max / (1 - gamma)`.
    pub truncation_bound: f64,
}

/// Streams for one episode: disturbances and the decision rule.
fn episode_rngs(seed: u64, episode: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut world = ChaCha8Rng::seed_from_u64(seed);
    world.set_stream(2 * episode);
    let mut agent = ChaCha8Rng::seed_from_u64(seed);
    agent.set_stream(2 * episode + 1);
    (world, agent)
}

fn check_inputs<P: DecisionRule + ?Sized>(
    policy: &P,
    cfg: &ScenarioConfig,
    s0: &SystemState,
    horizon: usize,
) -> Result<StateSpace, SimError> {
    if horizon == 0 {
        return Err(SimError::EmptyHorizon);
    }
    if !s0.is_valid(cfg) {
        return Err(SimError::InvalidStart(*s0));
    }
    let space = StateSpace::new(*cfg);
    if let Some(got) = policy.table_size() {
        if got != space.size() {
            return Err(SimError::PolicySize {
                got,
                expected: space.size(),
            });
        }
    }
    Ok(space)
}

fn rollout<P, F>(
    policy: &P,
    space: &StateSpace,
    s0: SystemState,
    horizon: usize,
    seed: u64,
    episode: u64,
    mut visit: F,
) where
    P: DecisionRule + ?Sized,
    F: FnMut(TraceStep),
{
    let cfg = space.config();
    let (mut world, mut agent) = episode_rngs(seed, episode);
    let mut state = s0;
    for k in 0..horizon {
        let index = space.index_unchecked(&state);
        let action = policy.decide(&state, index, &mut agent);
        let w = sample_disturbance(&state, action, cfg, &mut world);
        let next = step(&state, action, &w, cfg)
            .unwrap_or_else(|e| panic!("decision rule produced an invalid step: {e}"));
        visit(TraceStep {
            k,
            state,
            action,
            disturbance: w,
            cost: stage_cost(&state, cfg),
            energy_discarded: next.energy_discarded,
        });
        state = next.state;
    }
}

/// One full trajectory of `horizon` slots starting at `s0`.
pub fn simulate_episode<P: DecisionRule + ?Sized>(
    policy: &P,
    cfg: &ScenarioConfig,
    s0: &SystemState,
    horizon: usize,
    seed: u64,
) -> Result<EpisodeTrace, SimError> {
    let space = check_inputs(policy, cfg, s0, horizon)?;
    let mut steps = Vec::with_capacity(horizon);
    rollout(policy, &space, *s0, horizon, seed, 0, |st| steps.push(st));
    Ok(EpisodeTrace {
        steps,
        seed,
        horizon,
        age_caps: (cfg.d_max0, cfg.d_max1),
    })
}

pub fn truncation_bound(cfg: &ScenarioConfig, horizon: usize) -> f64 {
    cfg.gamma.powf(horizon as f64) * cfg.value_bound()
}

/// Smallest horizon whose tail bound is at most `fraction` of
/// `g_max / (1 - gamma)`.
pub fn horizon_for_fraction(cfg: &ScenarioConfig, fraction: f64) -> usize {
    (fraction.ln() / cfg.gamma.ln()).ceil().max(1.0) as usize
}

/// Mean and standard error of the truncated discounted cost over
/// `n_episodes` independent rollouts.
pub fn evaluate_policy_mc<P: DecisionRule + ?Sized>(
    policy: &P,
    cfg: &ScenarioConfig,
    s0: &SystemState,
    horizon: usize,
    n_episodes: usize,
    seed: u64,
    truncation_cap: Option<f64>,
) -> Result<EvalSummary, SimError> {
    let space = check_inputs(policy, cfg, s0, horizon)?;
    if n_episodes == 0 {
        return Err(SimError::NoEpisodes);
    }
    let bound = truncation_bound(cfg, horizon);
    if let Some(cap) = truncation_cap {
        if bound > cap {
            return Err(SimError::TruncationTooCoarse { bound, horizon, cap });
        }
    }
    let returns: Vec<f64> = (0..n_episodes as u64)
        .into_par_iter()
        .map(|ep| {
            let mut total = 0.0;
            let mut discount = 1.0;
            rollout(policy, &space, *s0, horizon, seed, ep, |st| {
                total += discount * st.cost;
                discount *= cfg.gamma;
            });
            total
        })
        .collect();

    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std_error = if returns.len() > 1 {
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(EvalSummary {
        mean_discounted_cost: mean,
        std_error,
        n_episodes,
        horizon,
        truncation_bound: bound,
    })
}

/// Recomputes both ages at every slot from the event history alone: the
/// generation time of the last delivered update and the last time the source
/// changed state.
///
/// The age pair recorded at slot `k` describes the source as it was during
/// slot `k - 1`, the last slot whose update could have been sent, so branch
/// selection uses `Z_{k-1}` and only changes strictly before `k` count.
/// Counters saturate at their caps. The history before slot 0 is taken to be
/// the one implied by the initial state.
pub fn direct_aoi_trace(trace: &EpisodeTrace) -> Vec<(usize, usize)> {
    let Some(first) = trace.steps.first() else {
        return Vec::new();
    };
    let caps = [trace.age_caps.0, trace.age_caps.1];
    let s0 = first.state;
    let age = |d: i64, cap: usize| (d.max(0) as usize).min(cap);

    // generation slot of the freshest delivered update
    let mut delivered_at = -(s0.age(s0.z_d) as i64);
    let mut known = s0.z_d;
    // slot of the latest source change; implied by the initial state only
    // when the destination is already out of date
    let mut changed_at: Option<i64> = (s0.z != s0.z_d).then(|| -(s0.age(s0.z) as i64));

    let mut out = Vec::with_capacity(trace.steps.len());
    out.push((s0.d0, s0.d1));
    for window in trace.steps.windows(2) {
        let (prev, cur) = (&window[0], &window[1]);
        let k = cur.k as i64;
        let prev_source = prev.state.z;
        if prev.disturbance.w_s {
            delivered_at = k - 1;
            known = prev_source;
        }
        if prev.k > 0 {
            let before = trace.steps[prev.k - 1].state.z;
            if before != prev_source {
                changed_at = Some(k - 1);
            }
        }
        let mut ages = [0usize; 2];
        for source in 0..2u8 {
            let cap = caps[source as usize];
            ages[source as usize] = if source == known {
                age(k - delivered_at, cap)
            } else if source == prev_source {
                changed_at.map_or(cap, |t| age(k - t, cap))
            } else {
                0
            };
        }
        out.push((ages[0], ages[1]));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AoiMismatch {
    pub k: usize,
    pub recursive: (usize, usize),
    pub direct: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AoiConsistency {
    pub consistent: bool,
    pub first_mismatch: Option<AoiMismatch>,
}

/// Compares the ages carried in the trace states against
/// [`direct_aoi_trace`].
pub fn verify_aoi_consistency(trace: &EpisodeTrace) -> AoiConsistency {
    let direct = direct_aoi_trace(trace);
    let first_mismatch = trace
        .steps
        .iter()
        .zip(&direct)
        .find(|(st, d)| (st.state.d0, st.state.d1) != **d)
        .map(|(st, d)| AoiMismatch {
            k: st.k,
            recursive: (st.state.d0, st.state.d1),
            direct: *d,
        });
    AoiConsistency {
        consistent: first_mismatch.is_none(),
        first_mismatch,
    }
}
