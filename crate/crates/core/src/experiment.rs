//! Experiment descriptions: a base scenario, optional sweep axes, the
//! initial state, and solver / Monte Carlo settings.

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{Action, ConfigError, ScenarioConfig, SystemState};
use crate::solver::{value_iteration, Policy, SolveError, SolveReport, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("sweep point {point}: {source}")]
    Point { point: String, source: ConfigError },
    #[error("initial state {state} lies outside the state space of sweep point {point}")]
    StartOutOfRange { state: SystemState, point: String },
    #[error("invalid sweep axis `{0}`")]
    Axis(String),
    #[error("invalid slice: {0}")]
    Slice(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOLERANCE,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSettings {
    pub episodes: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for McSettings {
    /// Horizon 1375 keeps the tail below 1e-6 of `g_max / (1 - gamma)` at
    /// `gamma = 0.99`.
    fn default() -> Self {
        Self {
            episodes: 10_000,
            horizon: 1375,
            seed: 0,
        }
    }
}

/// One swept parameter and its values, in sweep order.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    EnergyProbability(Vec<f64>),
    SuccessProbability(Vec<f64>),
    BufferSize(Vec<usize>),
    /// `P_01`, the normal-to-alarm switching probability.
    ToAlarm(Vec<f64>),
    /// `P_10`, the alarm-to-normal switching probability.
    ToNormal(Vec<f64>),
    /// Paired `(P_01, P_10)` values.
    Switching(Vec<(f64, f64)>),
}

/// A coordinate on one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisValue {
    Real(f64),
    Count(usize),
    Pair(f64, f64),
}

impl SweepAxis {
    pub fn len(&self) -> usize {
        match self {
            SweepAxis::EnergyProbability(v)
            | SweepAxis::SuccessProbability(v)
            | SweepAxis::ToAlarm(v)
            | SweepAxis::ToNormal(v) => v.len(),
            SweepAxis::BufferSize(v) => v.len(),
            SweepAxis::Switching(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// CSV column names for this axis.
    pub fn columns(&self) -> Vec<&'static str> {
        match self {
            SweepAxis::EnergyProbability(_) => vec!["p_e"],
            SweepAxis::SuccessProbability(_) => vec!["p_s"],
            SweepAxis::BufferSize(_) => vec!["e_max"],
            SweepAxis::ToAlarm(_) => vec!["p01"],
            SweepAxis::ToNormal(_) => vec!["p10"],
            SweepAxis::Switching(_) => vec!["p01", "p10"],
        }
    }

    pub fn value(&self, i: usize) -> AxisValue {
        match self {
            SweepAxis::EnergyProbability(v)
            | SweepAxis::SuccessProbability(v)
            | SweepAxis::ToAlarm(v)
            | SweepAxis::ToNormal(v) => AxisValue::Real(v[i]),
            SweepAxis::BufferSize(v) => AxisValue::Count(v[i]),
            SweepAxis::Switching(v) => AxisValue::Pair(v[i].0, v[i].1),
        }
    }

    fn apply(&self, i: usize, cfg: &mut ScenarioConfig) {
        match self {
            SweepAxis::EnergyProbability(v) => cfg.p_e = v[i],
            SweepAxis::SuccessProbability(v) => cfg.p_s = v[i],
            SweepAxis::BufferSize(v) => cfg.e_max = v[i],
            SweepAxis::ToAlarm(v) => cfg.p_z[0] = [1.0 - v[i], v[i]],
            SweepAxis::ToNormal(v) => cfg.p_z[1] = [v[i], 1.0 - v[i]],
            SweepAxis::Switching(v) => *cfg = cfg.with_switching(v[i].0, v[i].1),
        }
    }

    /// Parses `name=v1,v2,...`. Names: `p_e`, `p_s`, `e_max`, `p01`, `p10`
    /// and `switching`, whose values are `p01:p10` pairs.
    pub fn parse(spec: &str) -> Result<Self, SpecError> {
        let err = || SpecError::Axis(spec.to_string());
        let (name, values) = spec.split_once('=').ok_or_else(err)?;
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(err());
        }
        let reals = || -> Result<Vec<f64>, SpecError> {
            items.iter().map(|s| s.parse().map_err(|_| err())).collect()
        };
        Ok(match name.trim() {
            "p_e" => SweepAxis::EnergyProbability(reals()?),
            "p_s" => SweepAxis::SuccessProbability(reals()?),
            "p01" => SweepAxis::ToAlarm(reals()?),
            "p10" => SweepAxis::ToNormal(reals()?),
            "e_max" => SweepAxis::BufferSize(
                items
                    .iter()
                    .map(|s| s.parse().map_err(|_| err()))
                    .collect::<Result<_, _>>()?,
            ),
            "switching" => SweepAxis::Switching(
                items
                    .iter()
                    .map(|s| {
                        let (a, b) = s.split_once(':').ok_or_else(err)?;
                        Ok((a.trim().parse().map_err(|_| err())?, b.trim().parse().map_err(|_| err())?))
                    })
                    .collect::<Result<_, SpecError>>()?,
            ),
            _ => return Err(err()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub base: ScenarioConfig,
    pub axes: Vec<SweepAxis>,
    pub s0: SystemState,
    pub solver: SolverSettings,
    pub mc: McSettings,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            base: ScenarioConfig::default(),
            axes: Vec::new(),
            s0: SystemState::reference_start(),
            solver: SolverSettings::default(),
            mc: McSettings::default(),
        }
    }
}

/// A fully resolved sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub coordinates: Vec<AxisValue>,
    pub config: ScenarioConfig,
}

impl ExperimentSpec {
    /// Cartesian product of the axes, first axis slowest. With no axes the
    /// base scenario is the only point.
    pub fn points(&self) -> Result<Vec<SweepPoint>, SpecError> {
        let total: usize = self.axes.iter().map(SweepAxis::len).product();
        let mut out = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut positions = vec![0; self.axes.len()];
            for (slot, axis) in positions.iter_mut().zip(&self.axes).rev() {
                *slot = rem % axis.len();
                rem /= axis.len();
            }
            let mut cfg = self.base;
            let mut coordinates = Vec::with_capacity(self.axes.len());
            for (axis, &i) in self.axes.iter().zip(&positions) {
                axis.apply(i, &mut cfg);
                coordinates.push(axis.value(i));
            }
            let label = || format!("{coordinates:?}");
            let cfg = cfg.validate().map_err(|source| SpecError::Point {
                point: label(),
                source,
            })?;
            if !self.s0.is_valid(&cfg) {
                return Err(SpecError::StartOutOfRange {
                    state: self.s0,
                    point: label(),
                });
            }
            out.push(SweepPoint {
                coordinates,
                config: cfg,
            });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        self.points().map(|_| ())
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub j_star_s0: f64,
    pub report: SolveReport,
}

/// Solves every sweep point (in parallel) and returns rows in sweep order.
/// Non-converged points are returned with their partial values and
/// `report.converged == false`.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<Vec<SweepRow>, SpecError> {
    let points = spec.points()?;
    Ok(points
        .into_par_iter()
        .map(|point| {
            let solution = match value_iteration(&point.config, spec.solver.tol, spec.solver.max_iter) {
                Ok(sol) => sol,
                Err(SolveError::NotConverged(sol)) => *sol,
                Err(SolveError::InvalidTolerance(t)) => panic!("invalid solver tolerance {t}"),
            };
            let space = crate::model::StateSpace::new(point.config);
            let j = solution.value[space.index_unchecked(&spec.s0)];
            SweepRow {
                point,
                j_star_s0: j,
                report: solution.report,
            }
        })
        .collect())
}

/// A 2-D cut through a policy: rows are energy levels `0..=e_max`, columns
/// the age of the current source state `0..=cap`, with the other age fixed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicySlice {
    pub z: u8,
    pub z_d: u8,
    pub other_age: usize,
    pub grid: Vec<Vec<Action>>,
}

/// Destination state implied by the other age when not given explicitly:
/// a zero other age means the destination is up to date, a saturated one
/// means it still holds the opposite state.
pub fn default_known_state(cfg: &ScenarioConfig, z: u8, other_age: usize) -> Result<u8, SpecError> {
    let other_cap = cfg.age_cap(1 - z);
    if other_age == 0 {
        Ok(z)
    } else if other_age == other_cap {
        Ok(1 - z)
    } else {
        Err(SpecError::Slice(format!(
            "other age {other_age} is neither 0 nor the cap {other_cap}; give z_d explicitly"
        )))
    }
}

pub fn policy_slice(
    policy: &Policy,
    cfg: &ScenarioConfig,
    z: u8,
    z_d: u8,
    other_age: usize,
) -> Result<PolicySlice, SpecError> {
    if z > 1 || z_d > 1 {
        return Err(SpecError::Slice(format!("z = {z}, z_d = {z_d} must be binary")));
    }
    let other_cap = cfg.age_cap(1 - z);
    if other_age > other_cap {
        return Err(SpecError::Slice(format!(
            "other age {other_age} exceeds its cap {other_cap}"
        )));
    }
    let space = crate::model::StateSpace::new(*cfg);
    if policy.len() != space.size() {
        return Err(SpecError::Slice("policy does not match the state space".into()));
    }
    let grid = (0..=cfg.e_max)
        .map(|e| {
            (0..=cfg.age_cap(z))
                .map(|age| {
                    let (d0, d1) = if z == 0 { (age, other_age) } else { (other_age, age) };
                    policy[space.index_unchecked(&SystemState::new(z, z_d, e, d0, d1))]
                })
                .collect()
        })
        .collect();
    Ok(PolicySlice {
        z,
        z_d,
        other_age,
        grid,
    })
}
