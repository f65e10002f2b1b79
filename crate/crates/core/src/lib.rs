//! Exact dynamic programming for state-aware Age of Information scheduling
//! on an energy-harvesting sensor that monitors a two-state Markov source.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: parameters, states and the dense state index.
//! * [`kernel`]: one-slot dynamics, disturbance law, stage cost and the
//!   sparse transition kernel.
//! * [`solver`]: value iteration, policy extraction, a backward-induction
//!   oracle and structural checkers for the optimal solution.
//! * [`simulator`]: seeded Monte Carlo rollouts, baseline policies and an
//!   independent AoI bookkeeping oracle.
//! * [`config`] and [`export`]: the text configuration format and CSV
//!   tables used by the command-line harness.

pub mod config;
pub mod experiment;
pub mod export;
pub mod kernel;
pub mod model;
pub mod simulator;
pub mod solver;

pub use kernel::{build_kernel, TransitionKernel};
pub use model::{Action, CostSpec, RandomVector, ScenarioConfig, StateSpace, SystemState};
pub use simulator::{Baseline, EpisodeTrace, EvalSummary};
pub use solver::{Policy, Solution, SolveReport, StructureReport, ValueFunction};
