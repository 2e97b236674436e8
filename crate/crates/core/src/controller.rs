//! Online tracking MPC, the tube-MPC baseline and the deep MPC loop.
//!
//! Per step the deep controller adapts the output layer on the last
//! transition, swaps in freshly trained hidden layers when one is due,
//! launches a training event on the training schedule, evaluates the
//! learning control, offers the experience to the buffer and finally solves
//! the tracking problem whose first control is shifted by `u^a`.

use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{BufferEntry, ReplayBuffer};
use crate::config::{RunConfig, TrainingMode};
use crate::governor::ReferenceTrajectory;
use crate::linalg::{pinv_left, Mat};
use crate::net::{
    adapt_step, column_norm, learning_control, projection_bound, publish_snapshot, train_hidden,
    FeatureSnapshot, HiddenParams, NetError, TrainReport, Transition, INPUT_DIM,
};
use crate::ocp::{self, shift_warm_start, NominalSkidSteer, OcpError, OcpProblem, SolverOptions};
use crate::plant::{discrete_input_matrix, ControlVec, PlantParams, StateVec, TruePlant, NU};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Deep,
    Tube,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Deep => "deep",
            Mode::Tube => "tube",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deep" => Ok(Mode::Deep),
            "tube" => Ok(Mode::Tube),
            other => Err(format!("unknown mode `{other}` (expected deep or tube)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(
        "tracking MPC failed at step {step} (x = {:?}, u^a = {:?}, x^r = {:?}): {source}",
        state.0, u_a.0, reference.0
    )]
    SolverFailed {
        step: usize,
        state: StateVec,
        u_a: ControlVec,
        reference: StateVec,
        #[source]
        source: OcpError,
    },
    #[error("training event launched at step {step} failed: {source}")]
    Training {
        step: usize,
        #[source]
        source: NetError,
    },
    #[error("training thread launched at step {step} panicked")]
    TrainingPanicked { step: usize },
}

/// One row of the closed-loop log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: StateVec,
    /// Reference state `x^r_t`.
    pub reference: StateVec,
    pub u_a: ControlVec,
    pub u_m: ControlVec,
    pub u: ControlVec,
    pub clipped: [bool; NU],
    /// Optimal tracking cost `V_m(x_t)`.
    pub value: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub generation: u64,
    /// Column norms of `K_t` after adaptation.
    pub k_norms: [f64; NU],
    pub buffer_len: usize,
    /// True uncertainty `h(x_t)`; filled from the plant oracle.
    pub h: ControlVec,
    /// Residual `ũ_t = u^a_t + h(x_t)`; filled from the plant oracle.
    pub u_tilde: ControlVec,
}

/// A training event and the swap that published it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingEvent {
    pub launched_at: usize,
    pub swapped_at: usize,
    pub samples: usize,
    pub generation: u64,
    pub report: TrainReport,
}

type TrainOutput = Result<(HiddenParams, TrainReport), NetError>;

enum Pending {
    Ready(TrainOutput),
    Running(JoinHandle<TrainOutput>),
}

struct PendingTraining {
    launched_at: usize,
    swap_at: usize,
    samples: usize,
    job: Pending,
}

/// Owned data of a tracking problem; borrow it with [`TrackingProblem::as_ocp`].
#[derive(Clone, Debug)]
pub struct TrackingProblem {
    pub dynamics: NominalSkidSteer,
    pub x0: Vec<f64>,
    pub q: Mat,
    pub r: Mat,
    pub qf: Mat,
    pub x_ref: Vec<Vec<f64>>,
    pub u_ref: Vec<Vec<f64>>,
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

impl TrackingProblem {
    pub fn horizon(&self) -> usize {
        self.u_ref.len()
    }

    pub fn as_ocp(&self) -> OcpProblem<'_> {
        OcpProblem {
            horizon: self.horizon(),
            x0: self.x0.clone(),
            q: self.q.clone(),
            r: self.r.clone(),
            qf: self.qf.clone(),
            x_ref: self.x_ref.clone(),
            u_ref: self.u_ref.clone(),
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            terminal_target: None,
            state_penalty: None,
            dynamics: &self.dynamics,
        }
    }
}

/// Stage-0 box `U − u^a`, nudged inwards by ulps where rounding would let
/// `u^a + u^m` leave `[−u_max, u_max]`.
pub fn shifted_first_box(u_max: f64, u_a: &ControlVec) -> (Vec<f64>, Vec<f64>) {
    let mut lower = vec![0.0; NU];
    let mut upper = vec![0.0; NU];
    for i in 0..NU {
        let (mut lo, mut hi) = (-u_max - u_a[i], u_max - u_a[i]);
        while u_a[i] + hi > u_max {
            hi = hi.next_down();
        }
        while u_a[i] + lo < -u_max {
            lo = lo.next_up();
        }
        lower[i] = lo;
        upper[i] = hi;
    }
    (lower, upper)
}

/// Tracking problem at time `t` from state `x_t` with learning control `u_a`.
pub fn build_tracking_problem(
    x_t: &StateVec,
    t: usize,
    u_a: &ControlVec,
    reference: &ReferenceTrajectory,
    cfg: &RunConfig,
) -> TrackingProblem {
    let n = cfg.horizon;
    let tail = cfg.u_max - cfg.u_max_a;
    let (first_lo, first_hi) = shifted_first_box(cfg.u_max, u_a);
    let mut lower = vec![vec![-tail; NU]; n];
    let mut upper = vec![vec![tail; NU]; n];
    lower[0] = first_lo;
    upper[0] = first_hi;
    TrackingProblem {
        dynamics: NominalSkidSteer { params: cfg.plant() },
        x0: x_t.0.to_vec(),
        q: cfg.q_mat(),
        r: cfg.r_mat(),
        qf: cfg.qf_mat(),
        x_ref: (0..=n).map(|i| reference.state_at(t + i).0.to_vec()).collect(),
        u_ref: (0..n).map(|i| reference.control_at(t + i).0.to_vec()).collect(),
        lower,
        upper,
    }
}

pub struct Controller {
    mode: Mode,
    cfg: RunConfig,
    params: PlantParams,
    reference: Arc<ReferenceTrajectory>,
    t: usize,
    k: Mat,
    bound: f64,
    g_pinv: Mat,
    snapshot: FeatureSnapshot,
    buffer: ReplayBuffer,
    warm: Option<Vec<Vec<f64>>>,
    previous: Option<(StateVec, ControlVec)>,
    pending: Option<PendingTraining>,
    events: Vec<TrainingEvent>,
    options: SolverOptions,
}

impl Controller {
    /// Controller with `K₀ = 0` and seeded hidden layers.
    pub fn new(cfg: &RunConfig, mode: Mode, reference: Arc<ReferenceTrajectory>) -> Self {
        let hidden = HiddenParams::init(INPUT_DIM, &cfg.hidden_sizes, cfg.init_scale, cfg.seed);
        Self::with_hidden(cfg, mode, reference, hidden)
    }

    pub fn with_hidden(
        cfg: &RunConfig,
        mode: Mode,
        reference: Arc<ReferenceTrajectory>,
        hidden: HiddenParams,
    ) -> Self {
        let params = cfg.plant();
        let width = hidden.feature_width();
        let g_pinv = pinv_left(&discrete_input_matrix(&params)).expect("input matrix has full column rank");
        Self {
            mode,
            cfg: cfg.clone(),
            params,
            reference,
            t: 0,
            k: Mat::zeros(width + 1, NU),
            bound: projection_bound(cfg.u_max_a, NU, width),
            g_pinv,
            snapshot: FeatureSnapshot::new(hidden),
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            warm: None,
            previous: None,
            pending: None,
            events: Vec::new(),
            options: SolverOptions::online(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn output_matrix(&self) -> &Mat {
        &self.k
    }

    pub fn projection_bound(&self) -> f64 {
        self.bound
    }

    pub fn snapshot(&self) -> &FeatureSnapshot {
        &self.snapshot
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn training_events(&self) -> &[TrainingEvent] {
        &self.events
    }

    /// Training instant `T_k = k · period`, `k ≥ 1`.
    pub fn is_training_instant(&self, t: usize) -> bool {
        t > 0 && t % self.cfg.train_every == 0
    }

    pub fn step(&mut self, x_t: &StateVec) -> Result<StepRecord, ControllerError> {
        match self.mode {
            Mode::Deep => self.deep_mpc_step(x_t),
            Mode::Tube => self.tube_mpc_step(x_t),
        }
    }

    pub fn deep_mpc_step(&mut self, x_t: &StateVec) -> Result<StepRecord, ControllerError> {
        let t = self.t;
        if let Some((x_prev, u_m_prev)) = self.previous {
            let tr = Transition {
                x_prev: &x_prev,
                x_now: x_t,
                u_m_prev: &u_m_prev,
            };
            self.k = adapt_step(&self.k, &self.snapshot, &tr, self.cfg.theta, self.bound, &self.g_pinv, &self.params);
        }
        let k_norms = [column_norm(&self.k, 0), column_norm(&self.k, 1)];
        assert!(
            k_norms.iter().all(|n| *n <= self.bound),
            "column bound violated at step {t}: {k_norms:?} > {}",
            self.bound
        );

        self.swap_if_due(t)?;
        if self.is_training_instant(t) {
            self.launch_training(t);
        }

        let (u_a, clipped) = learning_control(&self.k, &self.snapshot, x_t, self.cfg.u_max_a);
        assert!(u_a.inf_norm() <= self.cfg.u_max_a, "learning control exceeds its authority at step {t}");
        self.buffer.offer(
            BufferEntry {
                state: *x_t,
                label: u_a,
                clipped: clipped.iter().any(|c| *c),
                step: t,
            },
            &self.snapshot,
        );

        let mut record = self.solve_and_record(x_t, u_a)?;
        record.clipped = clipped;
        record.k_norms = k_norms;
        Ok(record)
    }

    pub fn tube_mpc_step(&mut self, x_t: &StateVec) -> Result<StepRecord, ControllerError> {
        self.solve_and_record(x_t, ControlVec::ZERO)
    }

    fn solve_and_record(&mut self, x_t: &StateVec, u_a: ControlVec) -> Result<StepRecord, ControllerError> {
        let t = self.t;
        let problem = build_tracking_problem(x_t, t, &u_a, &self.reference, &self.cfg);
        let warm = self.warm.as_deref().map(shift_warm_start);
        let solution = ocp::solve(&problem.as_ocp(), warm.as_deref(), &self.options).map_err(|source| {
            ControllerError::SolverFailed {
                step: t,
                state: *x_t,
                u_a,
                reference: self.reference.state_at(t),
                source,
            }
        })?;
        let u_m = solution.control(0);
        let u = u_a + u_m;
        assert!(
            u.inf_norm() <= self.cfg.u_max,
            "composite control {:?} exceeds u_max at step {t}",
            u.0
        );

        self.previous = Some((*x_t, u_m));
        self.warm = Some(solution.controls.clone());
        self.t += 1;
        Ok(StepRecord {
            t,
            state: *x_t,
            reference: self.reference.state_at(t),
            u_a,
            u_m,
            u,
            clipped: [false; NU],
            value: solution.objective,
            iterations: solution.iterations,
            kkt_residual: solution.kkt_residual,
            generation: self.snapshot.generation(),
            k_norms: [0.0; NU],
            buffer_len: self.buffer.len(),
            h: ControlVec::ZERO,
            u_tilde: ControlVec::ZERO,
        })
    }

    fn launch_training(&mut self, t: usize) {
        if self.pending.is_some() {
            // the previous event has not been published yet; skip this one
            return;
        }
        let samples = self.buffer.snapshot_for_training(self.cfg.exclude_clipped);
        if samples.is_empty() {
            return;
        }
        let count = samples.len();
        let frozen_k = self.k.clone();
        let hidden = self.snapshot.shared_params();
        let train_cfg = self.cfg.train_config(self.events.len() as u64);
        let job = match self.cfg.training_mode {
            TrainingMode::Sync => Pending::Ready(train_hidden(&samples, &frozen_k, &hidden, &train_cfg)),
            TrainingMode::Async => Pending::Running(std::thread::spawn(move || {
                train_hidden(&samples, &frozen_k, &hidden, &train_cfg)
            })),
        };
        self.pending = Some(PendingTraining {
            launched_at: t,
            swap_at: t + self.cfg.swap_delay,
            samples: count,
            job,
        });
    }

    fn swap_if_due(&mut self, t: usize) -> Result<(), ControllerError> {
        if self.pending.as_ref().map_or(true, |p| p.swap_at != t) {
            return Ok(());
        }
        let pending = self.pending.take().expect("checked above");
        let step = pending.launched_at;
        let output = match pending.job {
            Pending::Ready(out) => out,
            Pending::Running(handle) => handle.join().map_err(|_| ControllerError::TrainingPanicked { step })?,
        };
        let (trained, report) = output.map_err(|source| ControllerError::Training { step, source })?;
        self.snapshot = publish_snapshot(&self.snapshot, trained);
        self.events.push(TrainingEvent {
            launched_at: step,
            swapped_at: t,
            samples: pending.samples,
            generation: self.snapshot.generation(),
            report,
        });
        Ok(())
    }
}

/// Runs `cfg.steps` steps of the chosen controller against `plant` and fills
/// the oracle columns of every record.
pub fn run_closed_loop(
    cfg: &RunConfig,
    mode: Mode,
    plant: &TruePlant,
    reference: Arc<ReferenceTrajectory>,
) -> Result<(Vec<StepRecord>, Vec<TrainingEvent>), ControllerError> {
    let mut ctrl = Controller::new(cfg, mode, reference);
    run_with(&mut ctrl, cfg.x0(), cfg.steps, plant).map(|r| (r, ctrl.events.clone()))
}

/// Drives an existing controller for `steps` steps from `x0`.
pub fn run_with(
    ctrl: &mut Controller,
    x0: StateVec,
    steps: usize,
    plant: &TruePlant,
) -> Result<Vec<StepRecord>, ControllerError> {
    let oracle = plant.oracle();
    let mut x = x0;
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut record = ctrl.step(&x)?;
        record.h = oracle.h(&x);
        record.u_tilde = record.u_a + record.h;
        x = plant.step(&x, &record.u);
        records.push(record);
    }
    Ok(records)
}

/// Final state after applying the logged controls, for checking logs.
pub fn final_state(records: &[StepRecord], plant: &TruePlant) -> Option<StateVec> {
    records.last().map(|r| plant.step(&r.state, &r.u))
}
