//! Flat `key = value` configuration files with dotted sections, e.g.
//!
//! ```text
//! model.p_e = 0.8
//! model.p01 = 0.1
//! model.e_max = 5
//! solver.tol = 1e-9
//! init.d0 = 1
//! sweep.p_e = [0.1, 0.5, 0.9]
//! ```
//!
//! The syntax is TOML, so `[model]` section headers work as well. Every key
//! is optional and defaults to the reference experiment. `p00`/`p11` are
//! redundant with `p01`/`p10`; when both members of a pair are given they
//! must sum to one.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::experiment::{ExperimentSpec, McSettings, SolverSettings, SpecError, SweepAxis};
use crate::model::{ConfigError, CostSpec, ScenarioConfig, SystemState, STOCHASTIC_TOL};

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed configuration: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("model.{first} = {a} and model.{second} = {b} do not sum to 1")]
    Redundant {
        first: &'static str,
        second: &'static str,
        a: f64,
        b: f64,
    },
    #[error("invalid model: {0}")]
    Model(#[from] ConfigError),
    #[error("invalid experiment: {0}")]
    Spec(#[from] SpecError),
    #[error("{0}")]
    Setting(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    cost: RawCost,
    #[serde(default)]
    solver: RawSolver,
    #[serde(default)]
    mc: RawMc,
    #[serde(default)]
    init: RawInit,
    #[serde(default)]
    sweep: RawSweep,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    p_e: Option<f64>,
    p_s: Option<f64>,
    p00: Option<f64>,
    p01: Option<f64>,
    p10: Option<f64>,
    p11: Option<f64>,
    e_max: Option<usize>,
    d_max0: Option<usize>,
    d_max1: Option<usize>,
    gamma: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    f_weight: Option<f64>,
    f_exponent: Option<f64>,
    h_weight: Option<f64>,
    h_exponent: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    tol: Option<f64>,
    max_iter: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMc {
    episodes: Option<usize>,
    horizon: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInit {
    z: Option<u8>,
    z_d: Option<u8>,
    e: Option<usize>,
    d0: Option<usize>,
    d1: Option<usize>,
}

/// Axes in the order listed here; the first present axis varies slowest.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    e_max: Option<Vec<usize>>,
    p_s: Option<Vec<f64>>,
    p_e: Option<Vec<f64>>,
    p01: Option<Vec<f64>>,
    p10: Option<Vec<f64>>,
    switching: Option<Vec<(f64, f64)>>,
}

/// Resolves one switching probability from its two redundant spellings.
fn switching(
    off: Option<f64>,
    diag: Option<f64>,
    names: (&'static str, &'static str),
    default: f64,
) -> Result<f64, ConfigFileError> {
    match (off, diag) {
        (Some(a), Some(b)) => {
            if (a + b - 1.0).abs() > STOCHASTIC_TOL {
                return Err(ConfigFileError::Redundant {
                    first: names.0,
                    second: names.1,
                    a,
                    b,
                });
            }
            Ok(a)
        }
        (Some(a), None) => Ok(a),
        (None, Some(b)) => Ok(1.0 - b),
        (None, None) => Ok(default),
    }
}

pub fn parse_experiment(text: &str) -> Result<ExperimentSpec, ConfigFileError> {
    let raw: RawFile = toml::from_str(text)?;
    let defaults = ExperimentSpec::default();
    let base = defaults.base;

    let m = raw.model;
    let p01 = switching(m.p01, m.p00, ("p01", "p00"), base.p_z[0][1])?;
    let p10 = switching(m.p10, m.p11, ("p10", "p11"), base.p_z[1][0])?;
    let c = raw.cost;
    let config = ScenarioConfig {
        p_e: m.p_e.unwrap_or(base.p_e),
        p_s: m.p_s.unwrap_or(base.p_s),
        p_z: base.p_z,
        e_max: m.e_max.unwrap_or(base.e_max),
        d_max0: m.d_max0.unwrap_or(base.d_max0),
        d_max1: m.d_max1.unwrap_or(base.d_max1),
        gamma: m.gamma.unwrap_or(base.gamma),
        cost: CostSpec {
            f_weight: c.f_weight.unwrap_or(base.cost.f_weight),
            f_exponent: c.f_exponent.unwrap_or(base.cost.f_exponent),
            h_weight: c.h_weight.unwrap_or(base.cost.h_weight),
            h_exponent: c.h_exponent.unwrap_or(base.cost.h_exponent),
        },
    }
    .with_switching(p01, p10)
    .validate()?;

    let i = raw.init;
    let s0 = SystemState {
        z: i.z.unwrap_or(defaults.s0.z),
        z_d: i.z_d.unwrap_or(defaults.s0.z_d),
        e: i.e.unwrap_or(defaults.s0.e),
        d0: i.d0.unwrap_or(defaults.s0.d0),
        d1: i.d1.unwrap_or(defaults.s0.d1),
    };

    let solver = SolverSettings {
        tol: raw.solver.tol.unwrap_or(defaults.solver.tol),
        max_iter: raw.solver.max_iter.unwrap_or(defaults.solver.max_iter),
    };
    if solver.tol.is_nan() || solver.tol <= 0.0 {
        return Err(ConfigFileError::Setting(format!(
            "solver.tol must be positive, got {}",
            solver.tol
        )));
    }
    let mc = McSettings {
        episodes: raw.mc.episodes.unwrap_or(defaults.mc.episodes),
        horizon: raw.mc.horizon.unwrap_or(defaults.mc.horizon),
        seed: raw.mc.seed.unwrap_or(defaults.mc.seed),
    };
    if mc.episodes == 0 || mc.horizon == 0 {
        return Err(ConfigFileError::Setting(
            "mc.episodes and mc.horizon must be at least 1".into(),
        ));
    }

    let s = raw.sweep;
    let axes: Vec<SweepAxis> = [
        s.e_max.map(SweepAxis::BufferSize),
        s.p_s.map(SweepAxis::SuccessProbability),
        s.p_e.map(SweepAxis::EnergyProbability),
        s.p01.map(SweepAxis::ToAlarm),
        s.p10.map(SweepAxis::ToNormal),
        s.switching.map(SweepAxis::Switching),
    ]
    .into_iter()
    .flatten()
    .collect();
    if axes.iter().any(SweepAxis::is_empty) {
        return Err(ConfigFileError::Setting("sweep axes must not be empty".into()));
    }

    let spec = ExperimentSpec {
        base: config,
        axes,
        s0,
        solver,
        mc,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn load_experiment(path: impl AsRef<Path>) -> Result<ExperimentSpec, ConfigFileError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_experiment(&text)
}
