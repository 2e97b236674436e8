//! CSV logs.
//!
//! Floats are written with 17 significant digits, so a write/read cycle
//! reproduces every value bit for bit.
//!
//! Step log columns, in order:
//!
//! ```text
//! t, x, y, theta, v, omega, xr_x, xr_y, xr_theta, xr_v, xr_omega,
//! ua_l, ua_r, um_l, um_r, u_l, u_r, clip_l, clip_r, value, iterations,
//! kkt, generation, k_norm_l, k_norm_r, buffer_len, h_l, h_r, ut_l, ut_r
//! ```

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::bounds::{BoundsError, TrajectoryLog};
use crate::controller::{StepRecord, TrainingEvent};
use crate::governor::ReferenceTrajectory;
use crate::plant::{ControlVec, StateVec};

pub const RECORD_COLUMNS: [&str; 30] = [
    "t", "x", "y", "theta", "v", "omega", "xr_x", "xr_y", "xr_theta", "xr_v", "xr_omega", "ua_l", "ua_r", "um_l",
    "um_r", "u_l", "u_r", "clip_l", "clip_r", "value", "iterations", "kkt", "generation", "k_norm_l", "k_norm_r",
    "buffer_len", "h_l", "h_r", "ut_l", "ut_r",
];

pub const REFERENCE_COLUMNS: [&str; 8] = ["t", "x", "y", "theta", "v", "omega", "u_l", "u_r"];

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
}

/// Float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn join_floats(out: &mut Vec<String>, values: &[f64]) {
    out.extend(values.iter().map(|v| fmt_f64(*v)));
}

pub fn write_records<W: Write>(mut w: W, records: &[StepRecord]) -> std::io::Result<()> {
    writeln!(w, "{}", RECORD_COLUMNS.join(","))?;
    for r in records {
        let mut row = vec![r.t.to_string()];
        join_floats(&mut row, &r.state.0);
        join_floats(&mut row, &r.reference.0);
        join_floats(&mut row, &r.u_a.0);
        join_floats(&mut row, &r.u_m.0);
        join_floats(&mut row, &r.u.0);
        row.extend(r.clipped.iter().map(|c| u8::from(*c).to_string()));
        row.push(fmt_f64(r.value));
        row.push(r.iterations.to_string());
        row.push(fmt_f64(r.kkt_residual));
        row.push(r.generation.to_string());
        join_floats(&mut row, &r.k_norms);
        row.push(r.buffer_len.to_string());
        join_floats(&mut row, &r.h.0);
        join_floats(&mut row, &r.u_tilde.0);
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

struct Table {
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn read<R: BufRead>(r: R) -> Result<Self, CsvError> {
        let mut lines = r.lines().enumerate();
        let header = match lines.next() {
            Some((_, line)) => line?.trim().split(',').map(str::to_owned).collect::<Vec<_>>(),
            None => return Err(CsvError::Malformed { line: 1, message: "empty file".into() }),
        };
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<String> = line.trim().split(',').map(str::to_owned).collect();
            if fields.len() != header.len() {
                return Err(CsvError::Malformed {
                    line: i + 1,
                    message: format!("expected {} fields, found {}", header.len(), fields.len()),
                });
            }
            rows.push((i + 1, fields));
        }
        Ok(Self { header, rows })
    }

    fn column(&self, name: &str) -> Result<usize, CsvError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CsvError::MissingColumn(name.into()))
    }

    fn parse<T: std::str::FromStr>(line: usize, field: &str) -> Result<T, CsvError> {
        field.parse().map_err(|_| CsvError::Malformed {
            line,
            message: format!("cannot parse `{field}`"),
        })
    }
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<StepRecord>, CsvError> {
    let table = Table::read(r)?;
    if table.header != RECORD_COLUMNS {
        return Err(CsvError::Malformed {
            line: 1,
            message: "header does not match the step-log schema".into(),
        });
    }
    table
        .rows
        .iter()
        .map(|(line, f)| {
            let line = *line;
            let num = |i: usize| Table::parse::<f64>(line, &f[i]);
            let state = |i: usize| -> Result<StateVec, CsvError> {
                Ok(StateVec([num(i)?, num(i + 1)?, num(i + 2)?, num(i + 3)?, num(i + 4)?]))
            };
            let control = |i: usize| -> Result<ControlVec, CsvError> { Ok(ControlVec([num(i)?, num(i + 1)?])) };
            let flag = |i: usize| -> Result<bool, CsvError> {
                match f[i].as_str() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(CsvError::Malformed {
                        line,
                        message: format!("bad flag `{other}`"),
                    }),
                }
            };
            Ok(StepRecord {
                t: Table::parse(line, &f[0])?,
                state: state(1)?,
                reference: state(6)?,
                u_a: control(11)?,
                u_m: control(13)?,
                u: control(15)?,
                clipped: [flag(17)?, flag(18)?],
                value: num(19)?,
                iterations: Table::parse(line, &f[20])?,
                kkt_residual: num(21)?,
                generation: Table::parse(line, &f[22])?,
                k_norms: [num(23)?, num(24)?],
                buffer_len: Table::parse(line, &f[25])?,
                h: control(26)?,
                u_tilde: control(28)?,
            })
        })
        .collect()
}

/// Reference CSV; the row at `t = N_ref` carries the set-point control.
pub fn write_reference<W: Write>(mut w: W, r: &ReferenceTrajectory) -> std::io::Result<()> {
    writeln!(w, "{}", REFERENCE_COLUMNS.join(","))?;
    for (t, s) in r.states.iter().enumerate() {
        let mut row = vec![t.to_string()];
        join_floats(&mut row, &s.0);
        join_floats(&mut row, &r.control_at(t).0);
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_training_events<W: Write>(mut w: W, events: &[TrainingEvent]) -> std::io::Result<()> {
    writeln!(w, "launched_at,swapped_at,generation,samples,initial_loss,final_loss,mean_grad_norm")?;
    for e in events {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            e.launched_at,
            e.swapped_at,
            e.generation,
            e.samples,
            fmt_f64(e.report.initial_loss()),
            fmt_f64(e.report.final_loss()),
            fmt_f64(e.report.mean_grad_norm)
        )?;
    }
    Ok(())
}

/// Reads a state/control log from any CSV with columns `x, y, theta, v,
/// omega, u_l, u_r` (extra columns are ignored). Row `j` holds `x_j` and the
/// control applied at `x_j`; the control of the last row is dropped.
pub fn read_trajectory_log<R: BufRead>(r: R) -> Result<TrajectoryLog, CsvError> {
    let table = Table::read(r)?;
    let sc: Vec<usize> = ["x", "y", "theta", "v", "omega"]
        .iter()
        .map(|n| table.column(n))
        .collect::<Result<_, _>>()?;
    let uc = [table.column("u_l")?, table.column("u_r")?];
    let mut states = Vec::with_capacity(table.rows.len());
    let mut controls = Vec::with_capacity(table.rows.len());
    for (line, f) in &table.rows {
        let mut s = [0.0; 5];
        for (k, c) in sc.iter().enumerate() {
            s[k] = Table::parse(*line, &f[*c])?;
        }
        states.push(StateVec(s));
        controls.push(ControlVec([Table::parse(*line, &f[uc[0]])?, Table::parse(*line, &f[uc[1]])?]));
    }
    controls.pop();
    Ok(TrajectoryLog::new(states, controls)?)
}
