//! Offline reference generation on tightened constraint sets.
//!
//! The nominal model is steered from the initial state to the set-point over
//! `N_ref` steps, in coordinates shifted so that the set-point is the origin.
//! The terminal state is pinned to the set-point by an equality constraint;
//! the tightened state box is imposed with a stiff hinge penalty and checked
//! afterwards.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;
use crate::ocp::{self, NominalSkidSteer, OcpError, OcpProblem, Shifted, SolverOptions, StatePenalty};
use crate::plant::{step_nominal, ControlVec, PlantParams, StateBox, StateVec, NU, NX};

/// Weight of the hinge penalty on the tightened state box.
pub const STATE_PENALTY_WEIGHT: f64 = 1e4;
/// Largest terminal error for which a reference is still usable.
pub const TERMINAL_ACCEPT: f64 = 1e-3;
/// State-box violation above which a reference is flagged.
pub const STATE_VIOLATION_FLAG: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GovernorError {
    #[error("no authority left for the MPC: u_max = {u_max}, u_max_a = {u_max_a}")]
    NoAuthority { u_max: f64, u_max_a: f64 },
    #[error("tightening factor must lie in (0, 1], got {0}")]
    BadFactor(f64),
    #[error("set-point is not an equilibrium of the nominal model (residual {0:e})")]
    NotEquilibrium(f64),
    #[error("initial state lies outside the operational box")]
    InitialStateOutside,
    #[error("terminal error {0:e} after all rounds; x0, N_ref and tightening are incompatible")]
    Infeasible(f64),
    #[error(transparent)]
    Solver(#[from] OcpError),
}

/// Tightened state box `X_r` and symmetric control bound of `U_r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightenedSets {
    pub states: StateBox,
    pub control_bound: f64,
}

/// Scales the state box about `center` by `state_factor` and the MPC's share
/// of the control budget, `u_max − u_max_a`, by `control_factor`.
pub fn tighten(
    states: &StateBox,
    center: &StateVec,
    u_max: f64,
    u_max_a: f64,
    state_factor: f64,
    control_factor: f64,
) -> Result<TightenedSets, GovernorError> {
    for f in [state_factor, control_factor] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(GovernorError::BadFactor(f));
        }
    }
    let mpc_share = u_max - u_max_a;
    if !(mpc_share > 0.0) {
        return Err(GovernorError::NoAuthority { u_max, u_max_a });
    }
    Ok(TightenedSets {
        states: states.scaled_about(center, state_factor),
        control_bound: control_factor * mpc_share,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub states: Vec<StateVec>,
    pub controls: Vec<ControlVec>,
    pub setpoint_state: StateVec,
    pub setpoint_control: ControlVec,
    pub terminal_error: f64,
    pub max_state_violation: f64,
    pub solver_converged: bool,
}

impl ReferenceTrajectory {
    /// A trajectory that sits at the set-point for `n` steps.
    pub fn constant(x_s: StateVec, u_s: ControlVec, n: usize) -> Self {
        Self {
            states: vec![x_s; n + 1],
            controls: vec![u_s; n],
            setpoint_state: x_s,
            setpoint_control: u_s,
            terminal_error: 0.0,
            max_state_violation: 0.0,
            solver_converged: true,
        }
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Reference state at time `t`; the set-point beyond the horizon.
    pub fn state_at(&self, t: usize) -> StateVec {
        self.states.get(t).copied().unwrap_or(self.setpoint_state)
    }

    /// Reference control at time `t`; the set-point control beyond the horizon.
    pub fn control_at(&self, t: usize) -> ControlVec {
        self.controls.get(t).copied().unwrap_or(self.setpoint_control)
    }

    pub fn flagged(&self) -> bool {
        self.max_state_violation > STATE_VIOLATION_FLAG
    }
}

#[derive(Clone, Debug)]
pub struct GovernorSpec {
    pub horizon: usize,
    pub q: Mat,
    pub r: Mat,
    pub options: SolverOptions,
}

/// Solves the reference problem and maps the result back to plant
/// coordinates.
pub fn generate_reference(
    x0: &StateVec,
    setpoint: (StateVec, ControlVec),
    sets: &TightenedSets,
    spec: &GovernorSpec,
    params: &PlantParams,
) -> Result<ReferenceTrajectory, GovernorError> {
    let (x_s, u_s) = setpoint;
    let residual = (step_nominal(&x_s, &u_s, params) - x_s).inf_norm();
    if residual > 1e-8 {
        return Err(GovernorError::NotEquilibrium(residual));
    }
    if !StateBox::operational().contains(x0) {
        return Err(GovernorError::InitialStateOutside);
    }

    let dynamics = Shifted {
        inner: NominalSkidSteer { params: *params },
        x_s: x_s.0.to_vec(),
        u_s: u_s.0.to_vec(),
    };
    let n = spec.horizon;
    let shifted_box = (
        (0..NX).map(|i| sets.states.lower[i] - x_s[i]).collect(),
        (0..NX).map(|i| sets.states.upper[i] - x_s[i]).collect(),
    );
    let problem = OcpProblem {
        horizon: n,
        x0: (*x0 - x_s).0.to_vec(),
        q: spec.q.clone(),
        r: spec.r.clone(),
        qf: Mat::zeros(NX, NX),
        x_ref: vec![vec![0.0; NX]; n + 1],
        u_ref: vec![vec![0.0; NU]; n],
        lower: vec![(0..NU).map(|i| -sets.control_bound - u_s[i]).collect(); n],
        upper: vec![(0..NU).map(|i| sets.control_bound - u_s[i]).collect(); n],
        terminal_target: Some(vec![0.0; NX]),
        state_penalty: Some(StatePenalty {
            lower: shifted_box.0,
            upper: shifted_box.1,
            weight: STATE_PENALTY_WEIGHT,
        }),
        dynamics: &dynamics,
    };

    let (solution, converged) = match ocp::solve(&problem, None, &spec.options) {
        Ok(sol) => (sol, true),
        Err(OcpError::MaxIterations { best }) => (*best, false),
        Err(e) => return Err(e.into()),
    };
    if solution.terminal_violation > TERMINAL_ACCEPT {
        return Err(GovernorError::Infeasible(solution.terminal_violation));
    }

    let states: Vec<StateVec> = solution
        .states
        .iter()
        .map(|x| StateVec::from_slice(x) + x_s)
        .collect();
    let controls: Vec<ControlVec> = solution
        .controls
        .iter()
        .map(|u| ControlVec::from_slice(u) + u_s)
        .collect();
    let max_state_violation = states[1..]
        .iter()
        .map(|s| sets.states.max_violation(s))
        .fold(0.0, f64::max);
    Ok(ReferenceTrajectory {
        states,
        controls,
        setpoint_state: x_s,
        setpoint_control: u_s,
        terminal_error: solution.terminal_violation,
        max_state_violation,
        solver_converged: converged,
    })
}
