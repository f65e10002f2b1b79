//! `aoi-mdp`: solve, sweep, check and simulate the state-aware AoI
//! scheduling model from the command line. Every command writes CSV files
//! into `--out` and reports through its exit status:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | input error (config, flags, policy file) |
//! | 2 | value iteration did not converge |
//! | 3 | a structural or AoI consistency check failed |

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aoi_mdp::config::{load_experiment, ConfigFileError};
use aoi_mdp::experiment::{default_known_state, policy_slice, run_sweep, ExperimentSpec, SweepAxis};
use aoi_mdp::export;
use aoi_mdp::simulator::{
    direct_aoi_trace, evaluate_policy_mc, simulate_episode, verify_aoi_consistency, DecisionRule,
};
use aoi_mdp::solver::{
    check_gap_monotonicity, check_lemma1_inequality, check_threshold_structure,
    value_iteration_with_kernel, SolveError,
};
use aoi_mdp::{build_kernel, Baseline, Policy, Solution, StateSpace, StructureReport, TransitionKernel};

#[derive(Parser)]
#[command(name = "aoi-mdp", version, about = "Energy-harvesting AoI scheduling MDP")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment file; the reference experiment is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides `mc.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 picks the number of cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Value iteration; writes value.csv, policy.csv and report.csv.
    Solve {
        /// Also dump the transition kernel to kernel.csv.
        #[arg(long)]
        kernel: bool,
    },
    /// J*(s0) over a parameter grid; writes sweep.csv.
    Sweep {
        /// Extra axis such as `p_e=0.1,0.5,0.9` or `switching=0.9:0.1,0.1:0.9`;
        /// repeatable, appended after the axes from the config file.
        #[arg(long = "axis")]
        axes: Vec<String>,
    },
    /// Optimal actions over (energy, age) for fixed z and other age;
    /// writes policy_table.csv.
    PolicyTable {
        #[arg(long)]
        z: u8,
        /// Age of the other source state, held fixed.
        #[arg(long)]
        other: usize,
        /// Destination state; inferred from `--other` when it is 0 or the cap.
        #[arg(long = "z-d")]
        z_d: Option<u8>,
    },
    /// Monte Carlo evaluation from the initial state; writes summary.csv.
    Simulate {
        /// `optimal`, `never`, `always`, `alarm_only`, `random:P`, or a
        /// policy CSV. Repeatable.
        #[arg(long, default_value = "optimal")]
        policy: Vec<String>,
        /// Overrides `mc.episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        /// Overrides `mc.horizon`.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Solves and checks threshold structure, gap monotonicity and the
    /// energy-difference inequality.
    Check {
        /// Check this policy CSV for threshold structure instead of the
        /// optimal one.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// One episode with recursive and directly recomputed ages; writes trace.csv.
    Trace {
        #[arg(long, default_value = "optimal")]
        policy: String,
        #[arg(long, default_value_t = 1000)]
        horizon: usize,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            message: message.to_string(),
        }
    }
}

impl From<ConfigFileError> for Failure {
    fn from(e: ConfigFileError) -> Self {
        Failure::input(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build_global()
    {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let g = cli.global;
    let mut spec = match &g.config {
        Some(path) => load_experiment(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = g.seed {
        spec.mc.seed = seed;
    }
    std::fs::create_dir_all(&g.out)
        .map_err(|e| Failure::input(format!("cannot create {}: {e}", g.out.display())))?;
    let out = g.out.as_path();
    match cli.command {
        Command::Solve { kernel } => solve(&spec, out, kernel),
        Command::Sweep { axes } => sweep(spec, out, &axes),
        Command::PolicyTable { z, other, z_d } => table(&spec, out, z, z_d, other),
        Command::Simulate {
            policy,
            episodes,
            horizon,
        } => simulate(spec, out, &policy, episodes, horizon),
        Command::Check { policy } => check(&spec, out, policy.as_deref()),
        Command::Trace { policy, horizon } => trace(&spec, out, &policy, horizon),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

fn written(name: &str, result: csv::Result<()>) -> Outcome {
    result.map_err(|e| Failure::input(format!("writing {name}: {e}")))
}

/// Solves the base scenario. A non-converged solution is still returned so
/// callers can write partial output before reporting exit code 2.
fn solve_base(spec: &ExperimentSpec) -> Result<(TransitionKernel, Solution, bool), Failure> {
    let kernel = build_kernel(&spec.base);
    match value_iteration_with_kernel(&kernel, spec.solver.tol, spec.solver.max_iter) {
        Ok(sol) => Ok((kernel, sol, true)),
        Err(SolveError::NotConverged(sol)) => Ok((kernel, *sol, false)),
        Err(e) => Err(Failure::input(e)),
    }
}

fn not_converged(sol: &Solution) -> Failure {
    Failure {
        code: 2,
        message: format!(
            "value iteration stopped after {} iterations with residual {}",
            sol.report.iterations,
            export::fmt_real(sol.report.residual)
        ),
    }
}

fn solve(spec: &ExperimentSpec, out: &Path, dump_kernel: bool) -> Outcome {
    let (kernel, sol, converged) = solve_base(spec)?;
    let space = kernel.space();
    let j = sol.value[space.index_unchecked(&spec.s0)];
    written("value.csv", export::write_value_table(create(out, "value.csv")?, space, &sol.value))?;
    written("policy.csv", export::write_policy_table(create(out, "policy.csv")?, space, &sol.policy))?;
    written("report.csv", export::write_solve_report(create(out, "report.csv")?, &sol.report, j))?;
    if dump_kernel {
        written("kernel.csv", export::write_kernel(create(out, "kernel.csv")?, &kernel))?;
    }
    if !converged {
        return Err(not_converged(&sol));
    }
    println!(
        "J*(s0) = {} after {} iterations (bound {})",
        export::fmt_real(j),
        sol.report.iterations,
        export::fmt_real(sol.report.optimality_bound)
    );
    Ok(())
}

fn sweep(mut spec: ExperimentSpec, out: &Path, extra: &[String]) -> Outcome {
    for a in extra {
        spec.axes.push(SweepAxis::parse(a).map_err(Failure::input)?);
    }
    let rows = run_sweep(&spec).map_err(Failure::input)?;
    written("sweep.csv", export::write_sweep(create(out, "sweep.csv")?, &spec.axes, &rows))?;
    let stalled = rows.iter().filter(|r| !r.report.converged).count();
    if stalled > 0 {
        return Err(Failure {
            code: 2,
            message: format!("{stalled} of {} sweep points did not converge", rows.len()),
        });
    }
    println!("{} sweep points", rows.len());
    Ok(())
}

fn table(spec: &ExperimentSpec, out: &Path, z: u8, z_d: Option<u8>, other: usize) -> Outcome {
    if z > 1 {
        return Err(Failure::input(format!("--z must be 0 or 1, got {z}")));
    }
    let z_d = match z_d {
        Some(v) => v,
        None => default_known_state(&spec.base, z, other).map_err(Failure::input)?,
    };
    // validate the slice before paying for a solve
    policy_slice(&Policy::never(StateSpace::new(spec.base).size()), &spec.base, z, z_d, other)
        .map_err(Failure::input)?;
    let (_, sol, converged) = solve_base(spec)?;
    let slice = policy_slice(&sol.policy, &spec.base, z, z_d, other).map_err(Failure::input)?;
    written(
        "policy_table.csv",
        export::write_policy_slice(create(out, "policy_table.csv")?, &slice),
    )?;
    if !converged {
        return Err(not_converged(&sol));
    }
    Ok(())
}

enum Source {
    Table(Policy),
    Baseline(Baseline),
}

impl Source {
    fn rule(&self) -> &dyn DecisionRule {
        match self {
            Source::Table(p) => p,
            Source::Baseline(b) => b,
        }
    }
}

/// Resolves a `--policy` argument. The optimal policy is solved at most once.
fn resolve(
    name: &str,
    spec: &ExperimentSpec,
    optimal: &mut Option<Policy>,
) -> Result<Source, Failure> {
    if name == "optimal" {
        if optimal.is_none() {
            let (_, sol, converged) = solve_base(spec)?;
            if !converged {
                return Err(not_converged(&sol));
            }
            *optimal = Some(sol.policy);
        }
        return Ok(Source::Table(optimal.clone().unwrap()));
    }
    if let Some(b) = Baseline::parse(name) {
        return Ok(Source::Baseline(b));
    }
    read_policy(Path::new(name), spec).map(Source::Table)
}

fn read_policy(path: &Path, spec: &ExperimentSpec) -> Result<Policy, Failure> {
    let file = File::open(path).map_err(|e| {
        Failure::input(format!(
            "`{}` is neither a known policy nor a readable file: {e}",
            path.display()
        ))
    })?;
    export::read_policy_table(BufReader::new(file), &StateSpace::new(spec.base))
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn simulate(
    mut spec: ExperimentSpec,
    out: &Path,
    policies: &[String],
    episodes: Option<usize>,
    horizon: Option<usize>,
) -> Outcome {
    spec.mc.episodes = episodes.unwrap_or(spec.mc.episodes);
    spec.mc.horizon = horizon.unwrap_or(spec.mc.horizon);
    let mut optimal = None;
    let mut rows = Vec::with_capacity(policies.len());
    for name in policies {
        let source = resolve(name, &spec, &mut optimal)?;
        let summary = evaluate_policy_mc(
            source.rule(),
            &spec.base,
            &spec.s0,
            spec.mc.horizon,
            spec.mc.episodes,
            spec.mc.seed,
            None,
        )
        .map_err(Failure::input)?;
        println!(
            "{name}: {} +/- {}",
            export::fmt_real(summary.mean_discounted_cost),
            export::fmt_real(summary.std_error)
        );
        rows.push((name.clone(), summary));
    }
    written("summary.csv", export::write_summaries(create(out, "summary.csv")?, &rows))
}

fn check(spec: &ExperimentSpec, out: &Path, policy: Option<&Path>) -> Outcome {
    let candidate = policy.map(|p| read_policy(p, spec)).transpose()?;
    let (kernel, sol, converged) = solve_base(spec)?;
    if !converged {
        return Err(not_converged(&sol));
    }
    let reports: [(&str, StructureReport); 3] = [
        (
            "threshold",
            check_threshold_structure(candidate.as_ref().unwrap_or(&sol.policy), &spec.base),
        ),
        ("gap_monotonicity", check_gap_monotonicity(&sol.value, &kernel)),
        ("lemma1", check_lemma1_inequality(&sol.value, &spec.base)),
    ];

    let mut summary = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(out, "check_report.csv")?);
    let mut failed = Vec::new();
    let mut result = summary.write_record(["check", "holds", "violations"]);
    for (name, report) in &reports {
        let file = format!("{name}_violations.csv");
        written(&file, export::write_violations(create(out, &file)?, report))?;
        result = result.and_then(|_| {
            summary.write_record([
                name.to_string(),
                report.holds.to_string(),
                report.violations.len().to_string(),
            ])
        });
        if !report.holds {
            failed.push(format!("{name} ({} violations)", report.violations.len()));
        }
    }
    written("check_report.csv", result.and_then(|_| Ok(summary.flush()?)))?;
    if failed.is_empty() {
        println!("all checks hold");
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!("failed: {}", failed.join(", ")),
        })
    }
}

fn trace(spec: &ExperimentSpec, out: &Path, policy: &str, horizon: usize) -> Outcome {
    let source = resolve(policy, spec, &mut None)?;
    let trace = simulate_episode(source.rule(), &spec.base, &spec.s0, horizon, spec.mc.seed)
        .map_err(Failure::input)?;
    let direct = direct_aoi_trace(&trace);
    written("trace.csv", export::write_trace(create(out, "trace.csv")?, &trace, Some(&direct)))?;
    let consistency = verify_aoi_consistency(&trace);
    match consistency.first_mismatch {
        None => Ok(()),
        Some(m) => Err(Failure {
            code: 3,
            message: format!(
                "age mismatch at slot {}: recursive {:?}, direct {:?}",
                m.k, m.recursive, m.direct
            ),
        }),
    }
}
