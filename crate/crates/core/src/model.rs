//! Domain types for the two-state source / energy buffer / dual-AoI model.
//!
//! A [`SystemState`] is the tuple `(z, z_d, e, d0, d1)`: true source state,
//! the source state last reported to the destination, buffered energy units,
//! and the age of information tracked separately for source state 0 (normal)
//! and 1 (alarm). [`StateSpace`] lays the full product space out densely in
//! mixed-radix order so that value functions and policies are plain vectors.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row-sum tolerance for the source transition matrix.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("p_e must lie in [0, 1], got {0}")]
    EnergyProbability(f64),
    #[error("p_s must lie in [0, 1], got {0}")]
    SuccessProbability(f64),
    #[error("p_z[{row}][{col}] must lie in [0, 1], got {value}")]
    TransitionEntry { row: usize, col: usize, value: f64 },
    #[error("p_z row {row} must sum to 1, sums to {sum}")]
    TransitionRowSum { row: usize, sum: f64 },
    #[error("gamma must lie in the open interval (0, 1), got {0}")]
    Discount(f64),
    #[error("d_max{which} must be at least 1")]
    AgeCap { which: usize },
    #[error("cost.{field} must be {requirement}, got {value}")]
    CostParameter {
        field: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("alarm cost h must dominate normal cost f: at age {age}, h = {h} < f = {f}")]
    CostDominance { age: usize, h: f64, f: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RangeError {
    #[error("state {0} lies outside the state space")]
    State(SystemState),
    #[error("index {index} out of range for a state space of size {size}")]
    Index { index: usize, size: usize },
}

/// Weighted power-law age penalties: `f(d) = f_weight * d^f_exponent` while
/// the source is normal and `h(d) = h_weight * d^h_exponent` in alarm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub f_weight: f64,
    pub f_exponent: f64,
    pub h_weight: f64,
    pub h_exponent: f64,
}

impl Default for CostSpec {
    /// Linear normal-state penalty, quadratic alarm-state penalty.
    fn default() -> Self {
        Self {
            f_weight: 1.0,
            f_exponent: 1.0,
            h_weight: 1.0,
            h_exponent: 2.0,
        }
    }
}

impl CostSpec {
    #[inline]
    pub fn normal(&self, age: usize) -> f64 {
        self.f_weight * (age as f64).powf(self.f_exponent)
    }

    #[inline]
    pub fn alarm(&self, age: usize) -> f64 {
        self.h_weight * (age as f64).powf(self.h_exponent)
    }

    fn validate(&self, max_age: usize) -> Result<(), ConfigError> {
        let positive = [("f_exponent", self.f_exponent), ("h_exponent", self.h_exponent)];
        for (field, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConfigError::CostParameter {
                    field,
                    requirement: "a positive finite real",
                    value,
                });
            }
        }
        let weights = [("f_weight", self.f_weight), ("h_weight", self.h_weight)];
        for (field, value) in weights {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ConfigError::CostParameter {
                    field,
                    requirement: "a nonnegative finite real",
                    value,
                });
            }
        }
        for age in 0..=max_age {
            let (f, h) = (self.normal(age), self.alarm(age));
            if h < f {
                return Err(ConfigError::CostDominance { age, h, f });
            }
        }
        Ok(())
    }
}

/// All model parameters of one scenario.
///
/// `p_z[i][j]` is the probability that the source moves from state `i` to
/// state `j` at the end of a slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub p_e: f64,
    pub p_s: f64,
    pub p_z: [[f64; 2]; 2],
    pub e_max: usize,
    pub d_max0: usize,
    pub d_max1: usize,
    pub gamma: f64,
    pub cost: CostSpec,
}

impl Default for ScenarioConfig {
    /// The reference experiment: `P_z = [[0.9, 0.1], [0.2, 0.8]]`,
    /// `p_e = p_s = 0.8`, a 5-unit buffer, age caps of 10 and `gamma = 0.99`.
    fn default() -> Self {
        Self {
            p_e: 0.8,
            p_s: 0.8,
            p_z: [[0.9, 0.1], [0.2, 0.8]],
            e_max: 5,
            d_max0: 10,
            d_max1: 10,
            gamma: 0.99,
            cost: CostSpec::default(),
        }
    }
}

impl ScenarioConfig {
    /// Returns the config unchanged if every parameter constraint holds,
    /// otherwise the first violated constraint.
    pub fn validate(self) -> Result<Self, ConfigError> {
        if !(0.0..=1.0).contains(&self.p_e) {
            return Err(ConfigError::EnergyProbability(self.p_e));
        }
        if !(0.0..=1.0).contains(&self.p_s) {
            return Err(ConfigError::SuccessProbability(self.p_s));
        }
        for (row, probs) in self.p_z.iter().enumerate() {
            for (col, &value) in probs.iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    return Err(ConfigError::TransitionEntry { row, col, value });
                }
            }
            let sum = probs[0] + probs[1];
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(ConfigError::TransitionRowSum { row, sum });
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(ConfigError::Discount(self.gamma));
        }
        if self.d_max0 < 1 {
            return Err(ConfigError::AgeCap { which: 0 });
        }
        if self.d_max1 < 1 {
            return Err(ConfigError::AgeCap { which: 1 });
        }
        self.cost.validate(self.d_max0.max(self.d_max1))?;
        Ok(self)
    }

    /// Sets the off-diagonal switching probabilities `P_01` and `P_10`,
    /// filling the diagonal so both rows stay stochastic.
    pub fn with_switching(mut self, p01: f64, p10: f64) -> Self {
        self.p_z = [[1.0 - p01, p01], [p10, 1.0 - p10]];
        self
    }

    #[inline]
    pub fn age_cap(&self, source: u8) -> usize {
        if source == 0 {
            self.d_max0
        } else {
            self.d_max1
        }
    }

    /// Largest stage cost over the state space.
    pub fn max_stage_cost(&self) -> f64 {
        self.cost.normal(self.d_max0).max(self.cost.alarm(self.d_max1))
    }

    /// Upper bound on any discounted cost, `g_max / (1 - gamma)`.
    pub fn value_bound(&self) -> f64 {
        self.max_stage_cost() / (1.0 - self.gamma)
    }
}

/// `(z, z_d, e, d0, d1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SystemState {
    pub z: u8,
    pub z_d: u8,
    pub e: usize,
    pub d0: usize,
    pub d1: usize,
}

impl SystemState {
    pub const fn new(z: u8, z_d: u8, e: usize, d0: usize, d1: usize) -> Self {
        Self { z, z_d, e, d0, d1 }
    }

    /// The initial state used throughout the reference experiments:
    /// normal source, known to the destination, empty buffer, `d0 = 1`.
    pub const fn reference_start() -> Self {
        Self::new(0, 0, 0, 1, 0)
    }

    #[inline]
    pub fn age(&self, source: u8) -> usize {
        if source == 0 {
            self.d0
        } else {
            self.d1
        }
    }

    pub fn is_valid(&self, cfg: &ScenarioConfig) -> bool {
        self.z <= 1
            && self.z_d <= 1
            && self.e <= cfg.e_max
            && self.d0 <= cfg.d_max0
            && self.d1 <= cfg.d_max1
    }
}

impl fmt::Display for SystemState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.z, self.z_d, self.e, self.d0, self.d1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Hold,
    Transmit,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Hold, Action::Transmit];

    #[inline]
    pub fn as_u8(self) -> u8 {
        match self {
            Action::Hold => 0,
            Action::Transmit => 1,
        }
    }

    pub fn from_u8(a: u8) -> Option<Self> {
        match a {
            0 => Some(Action::Hold),
            1 => Some(Action::Transmit),
            _ => None,
        }
    }

    #[inline]
    pub fn is_admissible(self, s: &SystemState) -> bool {
        self == Action::Hold || s.e > 0
    }
}

/// One realisation of the per-slot disturbances `(W^s, W^e, W^z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RandomVector {
    /// Channel success.
    pub w_s: bool,
    /// Energy arrival.
    pub w_e: bool,
    /// Next source state.
    pub w_z: u8,
}

impl RandomVector {
    pub const fn new(w_s: bool, w_e: bool, w_z: u8) -> Self {
        Self { w_s, w_e, w_z }
    }
}

/// Dense enumeration of every `(z, z_d, e, d0, d1)` tuple, `z` slowest and
/// `d1` fastest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateSpace {
    config: ScenarioConfig,
    // mixed-radix strides
    stride_z: usize,
    stride_zd: usize,
    stride_e: usize,
    stride_d0: usize,
    size: usize,
}

impl StateSpace {
    pub fn new(config: ScenarioConfig) -> Self {
        let stride_d0 = config.d_max1 + 1;
        let stride_e = stride_d0 * (config.d_max0 + 1);
        let stride_zd = stride_e * (config.e_max + 1);
        let stride_z = stride_zd * 2;
        Self {
            config,
            stride_z,
            stride_zd,
            stride_e,
            stride_d0,
            size: stride_z * 2,
        }
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn index_of(&self, s: &SystemState) -> Result<usize, RangeError> {
        if !s.is_valid(&self.config) {
            return Err(RangeError::State(*s));
        }
        Ok(self.index_unchecked(s))
    }

    /// Index of a state already known to be valid.
    #[inline]
    pub fn index_unchecked(&self, s: &SystemState) -> usize {
        s.z as usize * self.stride_z
            + s.z_d as usize * self.stride_zd
            + s.e * self.stride_e
            + s.d0 * self.stride_d0
            + s.d1
    }

    pub fn state_of(&self, index: usize) -> Result<SystemState, RangeError> {
        if index >= self.size {
            return Err(RangeError::Index {
                index,
                size: self.size,
            });
        }
        Ok(self.state_unchecked(index))
    }

    #[inline]
    pub fn state_unchecked(&self, index: usize) -> SystemState {
        let z = index / self.stride_z;
        let rem = index % self.stride_z;
        let z_d = rem / self.stride_zd;
        let rem = rem % self.stride_zd;
        let e = rem / self.stride_e;
        let rem = rem % self.stride_e;
        SystemState {
            z: z as u8,
            z_d: z_d as u8,
            e,
            d0: rem / self.stride_d0,
            d1: rem % self.stride_d0,
        }
    }

    /// All states in index order.
    pub fn states(&self) -> impl ExactSizeIterator<Item = SystemState> + '_ {
        (0..self.size).map(move |i| self.state_unchecked(i))
    }
}
