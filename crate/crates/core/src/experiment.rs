//! End-to-end orchestration: authority bounds, reference generation and the
//! closed-loop runs of both controllers.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{estimate_bounds, AuthorityBounds, BoundsError, TrajectoryLog};
use crate::config::{ConfigError, RunConfig, UncertaintyKind};
use crate::controller::{run_closed_loop, ControllerError, Mode, StepRecord, TrainingEvent};
use crate::governor::{generate_reference, tighten, GovernorError, GovernorSpec, ReferenceTrajectory, TightenedSets};
use crate::io::{write_records, write_reference, write_training_events};
use crate::metrics::{compare, run_metrics, Comparison, RunMetrics};
use crate::net::projection_bound;
use crate::ocp::SolverOptions;
use crate::plant::{NoUncertainty, RollingResistance, StateBox, TruePlant, NU, NX};
use crate::plot::{self, Panel, Series, PALETTE};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("reference generation failed: {0}")]
    Governor(#[from] GovernorError),
    #[error("{mode} run failed: {source}")]
    Controller {
        mode: Mode,
        #[source]
        source: ControllerError,
    },
    #[error("authority estimation failed: {0}")]
    Bounds(#[from] BoundsError),
    #[error("cannot write {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub fn true_plant(cfg: &RunConfig) -> TruePlant {
    match cfg.uncertainty {
        UncertaintyKind::Rolling => TruePlant::new(cfg.plant(), Box::new(RollingResistance)),
        UncertaintyKind::None => TruePlant::new(cfg.plant(), Box::new(NoUncertainty)),
    }
}

/// Everything shared by the runs of one experiment.
#[derive(Debug)]
pub struct Prepared {
    /// Configuration with `u_max_a` resolved.
    pub config: RunConfig,
    pub plant: TruePlant,
    pub sets: TightenedSets,
    pub reference: Arc<ReferenceTrajectory>,
    /// Estimated bounds (before the margin), when estimation was requested.
    pub estimated: Option<AuthorityBounds>,
}

pub fn reference_for(cfg: &RunConfig) -> Result<(TightenedSets, ReferenceTrajectory), GovernorError> {
    let (x_s, u_s) = cfg.setpoint();
    let sets = tighten(
        &StateBox::operational(),
        &x_s,
        cfg.u_max,
        cfg.u_max_a,
        cfg.state_tightening,
        cfg.control_tightening,
    )?;
    let spec = GovernorSpec {
        horizon: cfg.governor_horizon,
        q: cfg.q_mat(),
        r: cfg.r_mat(),
        options: SolverOptions::governor(),
    };
    let reference = generate_reference(&cfg.x0(), (x_s, u_s), &sets, &spec, &cfg.plant())?;
    Ok((sets, reference))
}

/// Estimates the authority bounds from a tube-MPC run that leaves the full
/// control budget to the MPC.
pub fn estimate_authority(cfg: &RunConfig, plant: &TruePlant) -> Result<AuthorityBounds, ExperimentError> {
    let probe = RunConfig {
        u_max_a: 0.0,
        estimate_authority: false,
        ..cfg.clone()
    };
    let (_, reference) = reference_for(&probe)?;
    let (records, _) = run_closed_loop(&probe, Mode::Tube, plant, Arc::new(reference))
        .map_err(|source| ExperimentError::Controller { mode: Mode::Tube, source })?;
    let log = log_from_records(&records, plant)?;
    Ok(estimate_bounds(&[log], &cfg.plant())?)
}

/// Trajectory log `(x_0 … x_T, u_0 … u_{T−1})` of a closed-loop run.
pub fn log_from_records(records: &[StepRecord], plant: &TruePlant) -> Result<TrajectoryLog, BoundsError> {
    let mut states: Vec<_> = records.iter().map(|r| r.state).collect();
    if let Some(last) = records.last() {
        states.push(plant.step(&last.state, &last.u));
    }
    TrajectoryLog::new(states, records.iter().map(|r| r.u).collect())
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, ExperimentError> {
    cfg.validate()?;
    let plant = true_plant(cfg);
    let mut config = cfg.clone();
    let mut estimated = None;
    if cfg.estimate_authority {
        let bounds = estimate_authority(cfg, &plant)?;
        config.u_max_a = bounds.with_margin(cfg.authority_margin).u_max_a;
        config.estimate_authority = false;
        config.validate()?;
        estimated = Some(bounds);
    }
    let (sets, reference) = reference_for(&config)?;
    Ok(Prepared {
        config,
        plant,
        sets,
        reference: Arc::new(reference),
        estimated,
    })
}

#[derive(Clone, Debug)]
pub struct ModeRun {
    pub mode: Mode,
    pub records: Vec<StepRecord>,
    pub events: Vec<TrainingEvent>,
}

pub fn run_mode(prepared: &Prepared, mode: Mode) -> Result<ModeRun, ExperimentError> {
    let (records, events) = run_closed_loop(&prepared.config, mode, &prepared.plant, prepared.reference.clone())
        .map_err(|source| ExperimentError::Controller { mode, source })?;
    Ok(ModeRun { mode, records, events })
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub u_max_a: f64,
    pub estimated: Option<AuthorityBounds>,
    pub projection_bound: f64,
    pub tail_control_bound: f64,
    pub reference_terminal_error: f64,
    pub reference_max_state_violation: f64,
    pub reference_flagged: bool,
    pub runs: BTreeMap<String, RunMetrics>,
    pub training_events: usize,
    /// Deep run (A) against tube run (B), when both were run.
    pub comparison: Option<Comparison>,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const REFERENCE_FILE: &str = "reference.csv";
pub const METRICS_FILE: &str = "metrics.json";

pub fn records_file(mode: Mode) -> String {
    format!("{mode}.csv")
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, ExperimentError> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|source| ExperimentError::Io { path, source })
}

fn io_at(dir: &Path, name: &str) -> impl FnOnce(std::io::Error) -> ExperimentError {
    let path = dir.join(name);
    move |source| ExperimentError::Io { path, source }
}

/// Runs the requested modes and writes every artifact into `out`.
pub fn run_experiment(cfg: &RunConfig, out: &Path, modes: &[Mode]) -> Result<ExperimentSummary, ExperimentError> {
    let prepared = prepare(cfg)?;
    fs::create_dir_all(out).map_err(io_at(out, ""))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml_string()).map_err(io_at(out, CONFIG_FILE))?;
    let mut w = create(out, REFERENCE_FILE)?;
    write_reference(&mut w, &prepared.reference)
        .and_then(|_| w.flush())
        .map_err(io_at(out, REFERENCE_FILE))?;

    let mut runs = Vec::new();
    for &mode in modes {
        let run = run_mode(&prepared, mode)?;
        let name = records_file(mode);
        let mut w = create(out, &name)?;
        write_records(&mut w, &run.records).and_then(|_| w.flush()).map_err(io_at(out, &name))?;
        if mode == Mode::Deep {
            let mut w = create(out, "training.csv")?;
            write_training_events(&mut w, &run.events)
                .and_then(|_| w.flush())
                .map_err(io_at(out, "training.csv"))?;
        }
        runs.push(run);
    }

    let c = &prepared.config;
    let deep = runs.iter().find(|r| r.mode == Mode::Deep);
    let tube = runs.iter().find(|r| r.mode == Mode::Tube);
    let comparison = match (deep, tube) {
        (Some(d), Some(t)) => Some(compare(&d.records, &t.records, &c.q).expect("same scenario and length")),
        _ => None,
    };
    let summary = ExperimentSummary {
        u_max_a: c.u_max_a,
        estimated: prepared.estimated,
        projection_bound: projection_bound(c.u_max_a, NU, *c.hidden_sizes.last().expect("validated")),
        tail_control_bound: c.u_max - c.u_max_a,
        reference_terminal_error: prepared.reference.terminal_error,
        reference_max_state_violation: prepared.reference.max_state_violation,
        reference_flagged: prepared.reference.flagged(),
        runs: runs
            .iter()
            .map(|r| (r.mode.to_string(), run_metrics(&r.records, &c.q)))
            .collect(),
        training_events: deep.map_or(0, |d| d.events.len()),
        comparison,
    };
    let json = serde_json::to_string_pretty(&summary).expect("metrics serialise");
    fs::write(out.join(METRICS_FILE), json + "\n").map_err(io_at(out, METRICS_FILE))?;

    for (name, svg) in figures(&runs, &prepared.reference, c.u_max_a) {
        fs::write(out.join(name), svg).map_err(io_at(out, name))?;
    }
    Ok(summary)
}

const STATE_NAMES: [&str; NX] = ["x", "y", "theta", "v", "omega"];

/// SVG figures for a set of runs: state overlay, learning signals, clip
/// fraction and optimal cost.
pub fn figures(runs: &[ModeRun], reference: &ReferenceTrajectory, u_max_a: f64) -> Vec<(&'static str, String)> {
    let color = |m: Mode| if m == Mode::Deep { PALETTE[0] } else { PALETTE[1] };
    let steps = runs.iter().map(|r| r.records.len()).max().unwrap_or(0);
    let mut out = Vec::new();

    let states: Vec<Panel> = (0..NX)
        .map(|i| {
            let mut p = Panel::new(&format!("state {}", STATE_NAMES[i]), "step", STATE_NAMES[i]);
            for r in runs {
                p = p.with(Series::from_values(r.mode.as_str(), r.records.iter().map(|s| s.state[i]), color(r.mode)));
            }
            p.with(Series::from_values("reference", (0..steps).map(|t| reference.state_at(t)[i]), PALETTE[5]).dashed())
        })
        .collect();
    out.push(("states.svg", plot::render(&states)));

    let values = runs.iter().fold(Panel::new("optimal tracking cost V_m", "step", "V_m"), |p, r| {
        p.with(Series::from_values(r.mode.as_str(), r.records.iter().map(|s| s.value), color(r.mode)))
    });
    out.push(("value.svg", plot::render(&[values])));

    if let Some(deep) = runs.iter().find(|r| r.mode == Mode::Deep) {
        let rec = &deep.records;
        let channel = |c: usize, side: &str| {
            Panel::new(&format!("{side} channel"), "step", "force")
                .with(Series::from_values("u^a", rec.iter().map(|s| s.u_a[c]), PALETTE[0]))
                .with(Series::from_values("u~ = u^a + h", rec.iter().map(|s| s.u_tilde[c]), PALETTE[1]))
                .with(Series::from_values("-h", rec.iter().map(|s| -s.h[c]), PALETTE[2]).dashed())
                .with(Series::from_values("+u_max_a", rec.iter().map(|_| u_max_a), PALETTE[5]).dashed())
                .with(Series::from_values("-u_max_a", rec.iter().map(|_| -u_max_a), PALETTE[5]).dashed())
        };
        out.push(("learning.svg", plot::render(&[channel(0, "left"), channel(1, "right")])));

        let mut active = 0usize;
        let cumulative: Vec<f64> = rec
            .iter()
            .enumerate()
            .map(|(i, s)| {
                active += s.clipped.iter().filter(|c| **c).count();
                active as f64 / (2.0 * (i + 1) as f64)
            })
            .collect();
        let clip = Panel::new("clip-active fraction of u^a", "step", "fraction")
            .with(Series::from_values("cumulative", cumulative, PALETTE[0]))
            .with(Series::from_values(
                "components clipped / 2",
                rec.iter().map(|s| s.clipped.iter().filter(|c| **c).count() as f64 / 2.0),
                PALETTE[4],
            ));
        out.push(("clip.svg", plot::render(&[clip])));
    }
    out
}
