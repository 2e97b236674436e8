//! Disturbance and learning-authority bounds from recorded trajectories.
//!
//! Each recorded transition `(x_j, u_j, x_{j+1})` is compared against the
//! nominal model. The residual `w = x_{j+1} − f̄(x_j, u_j)` is the additive
//! disturbance; `g_d† w` is its matched, input-space counterpart. `w_max` is
//! the largest Euclidean norm of `w` and `u_max_a` the largest ∞-norm of
//! `g_d† w`, the norms of the sets the two bounds feed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{pinv_left, Mat};
use crate::plant::{discrete_input_matrix, step_nominal, ControlVec, PlantParams, StateVec};

#[derive(Debug, Error, PartialEq)]
pub enum BoundsError {
    #[error("no transitions in the supplied trajectories")]
    EmptyInput,
    #[error("trajectory {index} has {states} states for {controls} controls")]
    LengthMismatch {
        index: usize,
        states: usize,
        controls: usize,
    },
}

/// One recorded trajectory: `states.len() == controls.len() + 1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub states: Vec<StateVec>,
    pub controls: Vec<ControlVec>,
}

impl TrajectoryLog {
    pub fn new(states: Vec<StateVec>, controls: Vec<ControlVec>) -> Result<Self, BoundsError> {
        let log = Self { states, controls };
        log.check(0)?;
        Ok(log)
    }

    fn check(&self, index: usize) -> Result<(), BoundsError> {
        if self.states.len() != self.controls.len() + 1 {
            return Err(BoundsError::LengthMismatch {
                index,
                states: self.states.len(),
                controls: self.controls.len(),
            });
        }
        Ok(())
    }

    pub fn transitions(&self) -> impl Iterator<Item = (&StateVec, &ControlVec, &StateVec)> {
        self.controls
            .iter()
            .enumerate()
            .map(move |(j, u)| (&self.states[j], u, &self.states[j + 1]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuthorityBounds {
    /// Bound on `‖x⁺ − f̄(x, u)‖₂`.
    pub w_max: f64,
    /// Bound on `‖g_d†(x⁺ − f̄(x, u))‖∞`.
    pub u_max_a: f64,
}

impl AuthorityBounds {
    /// `u_max_a` multiplied by a safety margin; `w_max` unchanged.
    pub fn with_margin(self, margin: f64) -> Self {
        Self {
            u_max_a: self.u_max_a * margin,
            ..self
        }
    }
}

/// Runs the bound computation over every transition of every log.
pub fn estimate_bounds(
    logs: &[TrajectoryLog],
    p: &PlantParams,
) -> Result<AuthorityBounds, BoundsError> {
    let g_pinv = pinv_left(&discrete_input_matrix(p)).expect("input matrix is left invertible");
    let mut bounds = AuthorityBounds {
        w_max: 0.0,
        u_max_a: 0.0,
    };
    let mut seen = 0usize;
    for (i, log) in logs.iter().enumerate() {
        log.check(i)?;
        for (x, u, x_next) in log.transitions() {
            let w = *x_next - step_nominal(x, u, p);
            let wa = matched_component(&g_pinv, &w);
            bounds.w_max = bounds.w_max.max(w.norm());
            bounds.u_max_a = bounds.u_max_a.max(wa.inf_norm());
            seen += 1;
        }
    }
    if seen == 0 {
        return Err(BoundsError::EmptyInput);
    }
    Ok(bounds)
}

pub(crate) fn matched_component(g_pinv: &Mat, w: &StateVec) -> ControlVec {
    ControlVec::from_slice(&g_pinv.mul_vec(w.as_slice()).expect("5-vector"))
}
