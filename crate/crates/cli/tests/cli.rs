use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "\
model.e_max = 2
model.d_max0 = 4
model.d_max1 = 4
mc.episodes = 300
mc.horizon = 400
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aoi-mdp"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn solve_reference_experiment() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["solve"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read(dir.path(), "report.csv");
    let row: Vec<&str> = report.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[3], "true");
    let j: f64 = row[4].parse().unwrap();
    assert!(j.is_finite() && j > 0.0 && j <= 1e4);
    assert_eq!(read(dir.path(), "value.csv").lines().count(), 2905);
    assert_eq!(read(dir.path(), "policy.csv").lines().count(), 2905);
    assert!(!dir.path().join("kernel.csv").exists());
}

#[test]
fn forced_non_convergence_keeps_partial_output() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "solver.tol = 1e-9\nsolver.max_iter = 10\n");
    let out = run(dir.path(), &["--config", &cfg, "solve"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let report = read(dir.path(), "report.csv");
    assert!(report.lines().nth(1).unwrap().starts_with("10,"));
    assert!(report.contains(",false,"));
    assert!(dir.path().join("value.csv").exists());
}

#[test]
fn input_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["--config", "/nonexistent/experiment.toml", "solve"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("/nonexistent/experiment.toml"));

    let cfg = write_config(dir.path(), "model.gamma = 1.0\n");
    let out = run(dir.path(), &["--config", &cfg, "solve"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("gamma"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), "model.p00 = 0.5\nmodel.p01 = 0.4\n");
    let out = run(dir.path(), &["--config", &cfg, "solve"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("p01"), "{}", stderr(&out));
}

#[test]
fn solve_dumps_kernel_on_request() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = run(dir.path(), &["--config", &cfg, "solve", "--kernel"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let kernel = read(dir.path(), "kernel.csv");
    assert!(kernel.starts_with("state_index,action,successor_index,probability\n"));
    assert!(!kernel.contains('\r'));
}

#[test]
fn sweep_rows_follow_axis_order_and_rerun_identically() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}sweep.e_max = [1, 2]\n"));
    let args = ["--config", cfg.as_str(), "sweep", "--axis", "p_e=0.3,0.6,0.9"];
    let out = run(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let first = read(dir.path(), "sweep.csv");
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], "e_max,p_e,J_star_s0,iterations,residual");
    assert_eq!(lines.len(), 1 + 2 * 3);
    let keys: Vec<String> = lines[1..]
        .iter()
        .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(keys, ["1,0.3", "1,0.6", "1,0.9", "2,0.3", "2,0.6", "2,0.9"]);
    let j: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(j[0] >= j[1] && j[1] >= j[2]);

    let out = run(dir.path(), &["--threads", "1", "--config", &cfg, "sweep", "--axis", "p_e=0.3,0.6,0.9"]);
    assert_eq!(code(&out), 0);
    assert_eq!(read(dir.path(), "sweep.csv"), first);
}

#[test]
fn sweep_rejects_invalid_axis() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["sweep", "--axis", "p_s=0.5,1.5"]);
    assert_eq!(code(&out), 1);
    let out = run(dir.path(), &["sweep", "--axis", "bogus=1"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn policy_table_slices() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["policy-table", "--z", "1", "--other", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = read(dir.path(), "policy_table.csv");
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 1 + 6);
    assert_eq!(lines[1], format!("0{}", ",0".repeat(11)));

    // other age neither 0 nor its cap needs an explicit destination state
    let out = run(dir.path(), &["policy-table", "--z", "0", "--other", "5"]);
    assert_eq!(code(&out), 1);
    let out = run(dir.path(), &["policy-table", "--z", "0", "--other", "5", "--z-d", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(dir.path(), &["policy-table", "--z", "0", "--other", "11"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn simulate_is_reproducible_and_ranks_baselines() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let args = [
        "--config", cfg.as_str(), "--seed", "7", "simulate", "--policy", "optimal", "--policy", "never",
    ];
    let out = run(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let first = read(dir.path(), "summary.csv");
    let means: Vec<f64> = first
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(means[1] >= means[0]);

    let out = run(dir.path(), &args);
    assert_eq!(code(&out), 0);
    assert_eq!(read(dir.path(), "summary.csv"), first);

    let out = run(dir.path(), &["--config", &cfg, "--seed", "8", "simulate"]);
    assert_eq!(code(&out), 0);
    assert_ne!(read(dir.path(), "summary.csv").lines().nth(1), first.lines().nth(1));
}

#[test]
fn simulate_accepts_policy_files() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(code(&run(dir.path(), &["--config", &cfg, "solve"])), 0);
    let policy = dir.path().join("policy.csv");
    let p = policy.to_str().unwrap();
    let out = run(dir.path(), &["--config", &cfg, "simulate", "--policy", p, "--policy", "optimal"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = read(dir.path(), "summary.csv");
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows[0].split_once(',').unwrap().1, rows[1].split_once(',').unwrap().1);

    // wrong dimensions: the file belongs to the small space
    let out = run(dir.path(), &["simulate", "--policy", p]);
    assert_eq!(code(&out), 1);

    let text = fs::read_to_string(&policy).unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, text.replacen("0,0,0,0,0,0", "0,0,0,0,0,1", 1)).unwrap();
    let out = run(dir.path(), &["--config", &cfg, "simulate", "--policy", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("admissible"), "{}", stderr(&out));
}

#[test]
fn check_reference_experiment() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["check"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        read(dir.path(), "check_report.csv"),
        "check,holds,violations\nthreshold,true,0\ngap_monotonicity,true,0\nlemma1,true,0\n"
    );
    for name in ["threshold", "gap_monotonicity", "lemma1"] {
        assert_eq!(read(dir.path(), &format!("{name}_violations.csv")).lines().count(), 1);
    }
}

#[test]
fn check_flags_corrupted_policy() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run(dir.path(), &["solve"])), 0);
    let text = read(dir.path(), "policy.csv");
    // transmit with one unit from age 2 on; holding at age 5 breaks the threshold
    assert!(text.contains("\n0,0,1,2,0,1\n"));
    let corrupted = text.replacen("\n0,0,1,5,0,1\n", "\n0,0,1,5,0,0\n", 1);
    assert_ne!(corrupted, text);
    let path = dir.path().join("corrupted.csv");
    fs::write(&path, corrupted).unwrap();

    let out = run(dir.path(), &["check", "--policy", path.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let violations = read(dir.path(), "threshold_violations.csv");
    assert!(violations.lines().count() > 1);
    assert!(violations.lines().skip(1).all(|l| l.starts_with("0,0,1,")));
    assert!(violations.contains("0,0,1,2,0,5,0,1\n"));
    assert!(read(dir.path(), "check_report.csv").contains("threshold,false,"));
}

#[test]
fn check_without_storage() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "model.e_max = 0\n");
    let out = run(dir.path(), &["--config", &cfg, "check"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn trace_ages_are_consistent() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["--seed", "3", "trace"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let trace = read(dir.path(), "trace.csv");
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines.len(), 1001);
    assert!(lines[0].ends_with("direct_d0,direct_d1,consistent"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",true")));

    let out = run(dir.path(), &["trace", "--horizon", "1", "--policy", "always"]);
    assert_eq!(code(&out), 0);
    assert_eq!(read(dir.path(), "trace.csv").lines().count(), 2);

    let out = run(dir.path(), &["trace", "--policy", "/nonexistent/policy.csv"]);
    assert_eq!(code(&out), 1);
}
