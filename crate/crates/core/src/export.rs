//! CSV tables: comma separated, one header row, `\n` line endings, reals
//! printed with 12 significant digits (exponent form below 1e-4 and from
//! 1e15 up).

use std::io::{Read, Write};

use thiserror::Error;

use crate::experiment::{AxisValue, PolicySlice, SweepAxis, SweepRow};
use crate::kernel::TransitionKernel;
use crate::model::{Action, StateSpace, SystemState};
use crate::simulator::{EpisodeTrace, EvalSummary};
use crate::solver::{Policy, SolveReport, StructureReport, ValueFunction};

const SIGNIFICANT: i32 = 12;

#[derive(Debug, Error)]
pub enum PolicyCsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("expected columns z,z_d,e,d0,d1,action")]
    Header,
    #[error("policy table has {got} rows, the state space has {expected}")]
    Size { got: usize, expected: usize },
    #[error("no action given for state {0}")]
    Missing(SystemState),
}

/// Decimal rendering with 12 significant digits, trailing zeros removed.
pub fn fmt_real(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i32;
    if !(-4..15).contains(&magnitude) {
        let s = format!("{:.*e}", (SIGNIFICANT - 1) as usize, x);
        let (mantissa, exponent) = s.split_once('e').unwrap();
        let mantissa = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        return format!("{mantissa}e{exponent}");
    }
    let decimals = (SIGNIFICANT - 1 - magnitude).clamp(0, 40) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        let trimmed = s.trim_end_matches('0').trim_end_matches('.');
        if trimmed == "-0" {
            "0".into()
        } else {
            trimmed.into()
        }
    } else {
        s
    }
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn state_fields(s: &SystemState) -> [String; 5] {
    [
        s.z.to_string(),
        s.z_d.to_string(),
        s.e.to_string(),
        s.d0.to_string(),
        s.d1.to_string(),
    ]
}

pub fn write_value_table<W: Write>(w: W, space: &StateSpace, v: &ValueFunction) -> csv::Result<()> {
    let mut out = writer(w);
    out.write_record(["z", "z_d", "e", "d0", "d1", "value"])?;
    for (i, s) in space.states().enumerate() {
        let [a, b, c, d, e] = state_fields(&s);
        out.write_record([a, b, c, d, e, fmt_real(v[i])])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_policy_table<W: Write>(w: W, space: &StateSpace, policy: &Policy) -> csv::Result<()> {
    let mut out = writer(w);
    out.write_record(["z", "z_d", "e", "d0", "d1", "action"])?;
    for (i, s) in space.states().enumerate() {
        let [a, b, c, d, e] = state_fields(&s);
        out.write_record([a, b, c, d, e, policy[i].as_u8().to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a table written by [`write_policy_table`]. Rows may come in any
/// order but must cover every state exactly once with an admissible action.
pub fn read_policy_table<R: Read>(r: R, space: &StateSpace) -> Result<Policy, PolicyCsvError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["z", "z_d", "e", "d0", "d1", "action"] {
        return Err(PolicyCsvError::Header);
    }
    let mut actions: Vec<Option<Action>> = vec![None; space.size()];
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| PolicyCsvError::Row { line, message };
        if record.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", record.len())));
        }
        let field = |k: usize| -> Result<usize, PolicyCsvError> {
            record[k]
                .parse::<usize>()
                .map_err(|_| bad(format!("`{}` is not a nonnegative integer", &record[k])))
        };
        let (z, z_d, a) = (field(0)?, field(1)?, field(5)?);
        if z > 1 || z_d > 1 {
            return Err(bad("z and z_d must be 0 or 1".into()));
        }
        let state = SystemState::new(z as u8, z_d as u8, field(2)?, field(3)?, field(4)?);
        let index = space
            .index_of(&state)
            .map_err(|e| bad(e.to_string()))?;
        let action = Action::from_u8(a.min(2) as u8).ok_or_else(|| bad(format!("action {a} is not 0 or 1")))?;
        if !action.is_admissible(&state) {
            return Err(bad(format!("transmit is not admissible in {state}")));
        }
        if actions[index].replace(action).is_some() {
            return Err(bad(format!("duplicate row for {state}")));
        }
        rows += 1;
    }
    if rows != space.size() {
        return Err(PolicyCsvError::Size {
            got: rows,
            expected: space.size(),
        });
    }
    actions
        .into_iter()
        .enumerate()
        .map(|(i, a)| a.ok_or_else(|| PolicyCsvError::Missing(space.state_unchecked(i))))
        .collect::<Result<Vec<_>, _>>()
        .map(Policy)
}

pub fn write_solve_report<W: Write>(w: W, report: &SolveReport, j_star_s0: f64) -> csv::Result<()> {
    let mut out = writer(w);
    out.write_record(["iterations", "residual", "optimality_bound", "converged", "J_star_s0"])?;
    out.write_record([
        report.iterations.to_string(),
        fmt_real(report.residual),
        fmt_real(report.optimality_bound),
        report.converged.to_string(),
        fmt_real(j_star_s0),
    ])?;
    out.flush()?;
    Ok(())
}

pub fn write_violations<W: Write>(w: W, report: &StructureReport) -> csv::Result<()> {
    let mut out = writer(w);
    out.write_record(["z", "z_d", "e", "lower_d0", "lower_d1", "upper_d0", "upper_d1", "excess"])?;
    for v in &report.violations {
        out.write_record([
            v.slice.0.to_string(),
            v.slice.1.to_string(),
            v.slice.2.to_string(),
            v.lower.0.to_string(),
            v.lower.1.to_string(),
            v.upper.0.to_string(),
            v.upper.1.to_string(),
            fmt_real(v.excess),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Kernel rows in `(state, action, successor)` order.
pub fn write_kernel<W: Write>(w: W, kernel: &TransitionKernel) -> csv::Result<()> {
    let mut out = writer(w);
    out.write_record(["state_index", "action", "successor_index", "probability"])?;
    for i in 0..kernel.num_states() {
        for a in Action::ALL {
            for (j, p) in kernel.row(i, a).iter() {
                out.write_record([
                    i.to_string(),
                    a.as_u8().to_string(),
                    j.to_string(),
                    fmt_real(p),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-slot trace rows. When `direct` is given, the independently
/// recomputed ages and a per-row consistency flag are appended.
pub fn write_trace<W: Write>(
    w: W,
    trace: &EpisodeTrace,
    direct: Option<&[(usize, usize)]>,
) -> csv::Result<()> {
    let mut out = writer(w);
    let mut header = vec!["k", "z", "z_d", "e", "d0", "d1", "action", "w_s", "w_e", "w_z", "cost"];
    if direct.is_some() {
        header.extend(["direct_d0", "direct_d1", "consistent"]);
    }
    out.write_record(&header)?;
    for (n, st) in trace.steps.iter().enumerate() {
        let [z, z_d, e, d0, d1] = state_fields(&st.state);
        let mut row = vec![
            st.k.to_string(),
            z,
            z_d,
            e,
            d0,
            d1,
            st.action.as_u8().to_string(),
            u8::from(st.disturbance.w_s).to_string(),
            u8::from(st.disturbance.w_e).to_string(),
            st.disturbance.w_z.to_string(),
            fmt_real(st.cost),
        ];
        if let Some(direct) = direct {
            let d = direct[n];
            row.push(d.0.to_string());
            row.push(d.1.to_string());
            row.push((d == (st.state.d0, st.state.d1)).to_string());
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per evaluated policy.
pub fn write_summaries<W: Write>(w: W, rows: &[(String, EvalSummary)]) -> csv::Result<()> {
    let mut out = writer(w);
    out.write_record([
        "policy",
        "mean",
        "std_error",
        "n_episodes",
        "horizon",
        "truncation_bound",
    ])?;
    for (name, s) in rows {
        out.write_record([
            name.clone(),
            fmt_real(s.mean_discounted_cost),
            fmt_real(s.std_error),
            s.n_episodes.to_string(),
            s.horizon.to_string(),
            fmt_real(s.truncation_bound),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_sweep<W: Write>(w: W, axes: &[SweepAxis], rows: &[SweepRow]) -> csv::Result<()> {
    let mut out = writer(w);
    let mut header: Vec<&str> = axes.iter().flat_map(|a| a.columns()).collect();
    header.extend(["J_star_s0", "iterations", "residual"]);
    out.write_record(&header)?;
    for row in rows {
        let mut fields: Vec<String> = Vec::with_capacity(header.len());
        for c in &row.point.coordinates {
            match *c {
                AxisValue::Real(x) => fields.push(fmt_real(x)),
                AxisValue::Count(n) => fields.push(n.to_string()),
                AxisValue::Pair(a, b) => {
                    fields.push(fmt_real(a));
                    fields.push(fmt_real(b));
                }
            }
        }
        fields.push(fmt_real(row.j_star_s0));
        fields.push(row.report.iterations.to_string());
        fields.push(fmt_real(row.report.residual));
        out.write_record(&fields)?;
    }
    out.flush()?;
    Ok(())
}

/// Energy levels as rows, ages of the current source state as columns.
pub fn write_policy_slice<W: Write>(w: W, slice: &PolicySlice) -> csv::Result<()> {
    let mut out = writer(w);
    let width = slice.grid.first().map_or(0, Vec::len);
    let mut header = vec!["e".to_string()];
    header.extend((0..width).map(|d| format!("age_{d}")));
    out.write_record(&header)?;
    for (e, row) in slice.grid.iter().enumerate() {
        let mut fields = vec![e.to_string()];
        fields.extend(row.iter().map(|a| a.as_u8().to_string()));
        out.write_record(&fields)?;
    }
    out.flush()?;
    Ok(())
}
