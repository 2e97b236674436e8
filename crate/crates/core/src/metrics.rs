//! Summary statistics of closed-loop runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::controller::StepRecord;
use crate::plant::NX;

/// Window length used for the early/late residual means.
pub const WINDOW: usize = 20;
/// Steps excluded from the clip fraction while the adaptation warms up.
pub const CLIP_WARMUP: usize = 10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("runs are not comparable: {0}")]
    SchemaMismatch(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: usize,
    /// `Σ_t ‖x_t − x^r_t‖²_Q`.
    pub cumulative_cost: f64,
    /// Per-state RMS of `x_t − x^r_t`.
    pub rms_deviation: [f64; NX],
    /// Fraction of clip-active `u^a` components over all steps.
    pub clip_fraction: f64,
    /// Same, over steps `t ≥ 10`.
    pub clip_fraction_after_warmup: Option<f64>,
    /// Mean `‖ũ_t‖∞` over steps 0–19, 20–39 and the last 20 steps.
    pub mean_u_tilde_first: Option<f64>,
    pub mean_u_tilde_second: Option<f64>,
    pub mean_u_tilde_last: Option<f64>,
    pub max_control: f64,
    pub max_k_norm: f64,
    pub mean_iterations: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn clip_share(records: &[StepRecord]) -> Option<f64> {
    mean(records.iter().flat_map(|r| r.clipped.map(|c| if c { 1.0 } else { 0.0 })))
}

fn u_tilde_mean(records: &[StepRecord]) -> Option<f64> {
    mean(records.iter().map(|r| r.u_tilde.inf_norm()))
}

pub fn tracking_cost(records: &[StepRecord], q: &[f64; NX]) -> f64 {
    records
        .iter()
        .map(|r| (0..NX).map(|i| q[i] * (r.state[i] - r.reference[i]).powi(2)).sum::<f64>())
        .sum()
}

pub fn run_metrics(records: &[StepRecord], q: &[f64; NX]) -> RunMetrics {
    let n = records.len();
    let window = |a: usize, b: usize| records.get(a.min(n)..b.min(n)).unwrap_or(&[]);
    let mut rms = [0.0; NX];
    if n > 0 {
        for (i, v) in rms.iter_mut().enumerate() {
            *v = (records.iter().map(|r| (r.state[i] - r.reference[i]).powi(2)).sum::<f64>() / n as f64).sqrt();
        }
    }
    RunMetrics {
        steps: n,
        cumulative_cost: tracking_cost(records, q),
        rms_deviation: rms,
        clip_fraction: clip_share(records).unwrap_or(0.0),
        clip_fraction_after_warmup: clip_share(window(CLIP_WARMUP, n)),
        mean_u_tilde_first: u_tilde_mean(window(0, WINDOW)),
        mean_u_tilde_second: u_tilde_mean(window(WINDOW, 2 * WINDOW)),
        mean_u_tilde_last: u_tilde_mean(window(n.saturating_sub(WINDOW), n)),
        max_control: records.iter().map(|r| r.u.inf_norm()).fold(0.0, f64::max),
        max_k_norm: records.iter().flat_map(|r| r.k_norms).fold(0.0, f64::max),
        mean_iterations: mean(records.iter().map(|r| r.iterations as f64)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Per-state RMS of `x^A_t − x^B_t`.
    pub rms_gap: [f64; NX],
    /// `rms_gap` divided by run B's RMS deviation from the reference.
    pub relative_gap: [Option<f64>; NX],
    pub a: RunMetrics,
    pub b: RunMetrics,
}

/// Checks that two runs share plant, seed and length.
pub fn check_comparable(a: &RunConfig, b: &RunConfig) -> Result<(), MetricsError> {
    if a.plant() != b.plant() || a.uncertainty != b.uncertainty {
        return Err(MetricsError::SchemaMismatch("plant parameters differ".into()));
    }
    if a.seed != b.seed {
        return Err(MetricsError::SchemaMismatch(format!("seeds differ ({} vs {})", a.seed, b.seed)));
    }
    if a.steps != b.steps {
        return Err(MetricsError::SchemaMismatch(format!("lengths differ ({} vs {})", a.steps, b.steps)));
    }
    Ok(())
}

pub fn compare(a: &[StepRecord], b: &[StepRecord], q: &[f64; NX]) -> Result<Comparison, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::SchemaMismatch(format!(
            "record counts differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.first().map(|r| r.state) != b.first().map(|r| r.state) {
        return Err(MetricsError::SchemaMismatch("initial states differ".into()));
    }
    let (ma, mb) = (run_metrics(a, q), run_metrics(b, q));
    let mut rms_gap = [0.0; NX];
    let mut relative_gap = [None; NX];
    if !a.is_empty() {
        for i in 0..NX {
            let ss: f64 = a.iter().zip(b).map(|(x, y)| (x.state[i] - y.state[i]).powi(2)).sum();
            rms_gap[i] = (ss / a.len() as f64).sqrt();
            let dev = mb.rms_deviation[i];
            relative_gap[i] = if dev > 0.0 {
                Some(rms_gap[i] / dev)
            } else if rms_gap[i] == 0.0 {
                Some(0.0)
            } else {
                None
            };
        }
    }
    Ok(Comparison {
        rms_gap,
        relative_gap,
        a: ma,
        b: mb,
    })
}
