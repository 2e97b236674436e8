//! Run configuration.
//!
//! Stored as flat `key = value` lines (a TOML subset: numbers, booleans,
//! strings and short arrays). Every key is optional; missing keys take the
//! defaults of the skid-steer experiment. Unknown keys are rejected.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;
use crate::net::TrainConfig;
use crate::plant::{ControlVec, Integrator, PlantParams, StateBox, StateVec, NX};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    /// Train inline at the training instant.
    #[default]
    Sync,
    /// Train on a worker thread; join at the swap instant.
    Async,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyKind {
    #[default]
    Rolling,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // plant
    pub mass: f64,
    pub inertia: f64,
    pub half_track: f64,
    pub v_ref: f64,
    pub dt: f64,
    pub integrator: Integrator,
    pub uncertainty: UncertaintyKind,

    // scenario
    pub x0: [f64; NX],
    pub setpoint: [f64; NX],
    pub setpoint_control: [f64; 2],
    pub steps: usize,

    // authority split
    pub u_max: f64,
    pub u_max_a: f64,
    /// Replace `u_max_a` by the bound estimated from a baseline run.
    pub estimate_authority: bool,
    pub authority_margin: f64,

    // controllers
    pub horizon: usize,
    pub governor_horizon: usize,
    pub q: [f64; NX],
    pub r: [f64; 2],
    pub qf: [f64; NX],
    pub state_tightening: f64,
    pub control_tightening: f64,

    // learning
    pub theta: f64,
    pub hidden_sizes: Vec<usize>,
    pub init_scale: f64,
    pub train_every: usize,
    pub swap_delay: usize,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_batch: usize,
    pub full_batch_limit: usize,
    pub training_mode: TrainingMode,
    pub buffer_capacity: usize,
    pub exclude_clipped: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PlantParams::default();
        Self {
            mass: p.mass,
            inertia: p.inertia,
            half_track: p.half_track,
            v_ref: p.v_ref,
            dt: p.dt,
            integrator: p.integrator,
            uncertainty: UncertaintyKind::Rolling,
            x0: [-1.0, -0.25, PI / 4.0, 0.0, -PI / 8.0],
            setpoint: p.equilibrium().0,
            setpoint_control: [0.0, 0.0],
            steps: 100,
            u_max: 10.0,
            u_max_a: 0.6,
            estimate_authority: false,
            authority_margin: 1.1,
            horizon: 10,
            governor_horizon: 100,
            q: [0.5, 2.0, 1.0, 0.5, 5.0],
            r: [1.0, 1.0],
            qf: [1e5; NX],
            state_tightening: 0.9,
            control_tightening: 0.9,
            theta: 0.5,
            hidden_sizes: vec![8, 12, 4],
            init_scale: 0.5,
            train_every: 20,
            swap_delay: 1,
            train_epochs: 50,
            train_lr: 0.01,
            train_batch: 16,
            full_batch_limit: 64,
            training_mode: TrainingMode::Sync,
            buffer_capacity: 30,
            exclude_clipped: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Full `key = value` listing of this configuration.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    pub fn plant(&self) -> PlantParams {
        PlantParams {
            mass: self.mass,
            inertia: self.inertia,
            half_track: self.half_track,
            v_ref: self.v_ref,
            dt: self.dt,
            integrator: self.integrator,
        }
    }

    pub fn x0(&self) -> StateVec {
        StateVec(self.x0)
    }

    pub fn setpoint(&self) -> (StateVec, ControlVec) {
        (StateVec(self.setpoint), ControlVec(self.setpoint_control))
    }

    pub fn q_mat(&self) -> Mat {
        Mat::diag(&self.q)
    }

    pub fn r_mat(&self) -> Mat {
        Mat::diag(&self.r)
    }

    pub fn qf_mat(&self) -> Mat {
        Mat::diag(&self.qf)
    }

    pub fn train_config(&self, event: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            learning_rate: self.train_lr,
            full_batch_limit: self.full_batch_limit,
            batch_size: self.train_batch,
            seed: self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(event),
            output_clip: Some(self.u_max_a),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.plant().validate().map_err(ConfigError::Invalid)?;
        if !(self.u_max > 0.0 && self.u_max.is_finite()) {
            return bad(format!("u_max must be positive, got {}", self.u_max));
        }
        if !(self.u_max_a >= 0.0) {
            return bad(format!("u_max_a must be non-negative, got {}", self.u_max_a));
        }
        if self.u_max_a >= self.u_max {
            return bad(format!(
                "u_max_a = {} leaves no authority for the MPC (u_max = {})",
                self.u_max_a, self.u_max
            ));
        }
        if self.horizon == 0 || self.governor_horizon == 0 {
            return bad("horizons must be positive".into());
        }
        for (name, w) in [("q", &self.q[..]), ("qf", &self.qf[..])] {
            if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return bad(format!("{name} must be positive semidefinite (non-negative diagonal)"));
            }
        }
        if self.r.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("r must be positive definite (positive diagonal)".into());
        }
        for (name, f) in [
            ("state_tightening", self.state_tightening),
            ("control_tightening", self.control_tightening),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {f}"));
            }
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta must lie in (0, 1), got {}", self.theta));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes must be non-empty and positive".into());
        }
        if self.train_every == 0 || self.swap_delay == 0 {
            return bad("train_every and swap_delay must be positive".into());
        }
        if self.swap_delay >= self.train_every {
            return bad("swap_delay must be shorter than the training period".into());
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity must be positive".into());
        }
        if !(self.authority_margin >= 1.0) {
            return bad("authority_margin must be at least 1".into());
        }
        if !(self.init_scale >= 0.0) || !(self.train_lr > 0.0) {
            return bad("init_scale must be non-negative and train_lr positive".into());
        }
        if !StateBox::operational().contains(&self.x0()) {
            return bad("x0 lies outside the operational box".into());
        }
        Ok(())
    }
}
