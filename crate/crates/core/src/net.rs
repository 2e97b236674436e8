//! The in-loop network: hidden layers as a frozen feature map, a linear output
//! layer adapted every step, and an offline trainer for the hidden layers.
//!
//! Features are `φ(x) = [1, tanh(·)…]`. The leading one acts as the output
//! bias and keeps `‖φ‖² ≥ 1`, so the normalised update law never divides by
//! zero. The output matrix `K` has one column per input channel; the learning
//! control is `u^a = clip(−Kᵀφ(x), ±u_max_a)`.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;
use crate::plant::{step_nominal, ControlVec, PlantParams, StateVec, Uncertainty, NU, NX};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("training buffer is empty")]
    EmptyBuffer,
    #[error("malformed parameter dump: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
            Activation::Tanh => a.tanh(),
        }
    }

    /// Derivative expressed through the activation output `z`.
    fn slope(self, pre: f64, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z * z,
        }
    }
}

/// Fully connected layer; `weights` is `out × in`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    fn forward(&self, x: &[f64], pre: &mut Vec<f64>, out: &mut Vec<f64>) {
        pre.clear();
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let a = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            pre.push(a);
            out.push(self.activation.apply(a));
        }
    }
}

/// Hidden layers: ReLU on all but the last layer, `tanh` on the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenParams {
    pub layers: Vec<Dense>,
}

impl HiddenParams {
    /// Seeded uniform initialisation in `[−scale, scale]` for weights and
    /// biases.
    pub fn init(input_dim: usize, sizes: &[usize], scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(input_dim, sizes, |_| {
            if scale > 0.0 {
                rng.gen_range(-scale..=scale)
            } else {
                0.0
            }
        })
    }

    pub fn zeros(input_dim: usize, sizes: &[usize]) -> Self {
        Self::build(input_dim, sizes, |_| 0.0)
    }

    fn build(input_dim: usize, sizes: &[usize], mut draw: impl FnMut(usize) -> f64) -> Self {
        assert!(!sizes.is_empty(), "at least one hidden layer");
        let mut layers = Vec::with_capacity(sizes.len());
        let mut in_dim = input_dim;
        for (l, &out_dim) in sizes.iter().enumerate() {
            let activation = if l + 1 == sizes.len() {
                Activation::Tanh
            } else {
                Activation::Relu
            };
            let weights = (0..in_dim * out_dim).map(&mut draw).collect();
            let bias = (0..out_dim).map(&mut draw).collect();
            layers.push(Dense {
                in_dim,
                out_dim,
                weights,
                bias,
                activation,
            });
            in_dim = out_dim;
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    /// Width of the last hidden layer, `n_2`.
    pub fn feature_width(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Features `[1, z_1 … z_{n_2}]`.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let cache = self.forward(x);
        let mut phi = Vec::with_capacity(self.feature_width() + 1);
        phi.push(1.0);
        phi.extend_from_slice(cache.outputs.last().expect("non-empty"));
        phi
    }

    fn forward(&self, x: &[f64]) -> ForwardCache {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { x } else { &outputs[l - 1] };
            let mut p = Vec::with_capacity(layer.out_dim);
            let mut o = Vec::with_capacity(layer.out_dim);
            layer.forward(input, &mut p, &mut o);
            pre.push(p);
            outputs.push(o);
        }
        ForwardCache { pre, outputs }
    }

    /// Parameters in dump order: per layer, weights row-major then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
    }

    fn axpy(&mut self, alpha: f64, grad: &[f64]) {
        let mut flat = self.to_flat();
        for (p, g) in flat.iter_mut().zip(grad) {
            *p += alpha * g;
        }
        self.set_flat(&flat);
    }
}

struct ForwardCache {
    pre: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

/// Immutable hidden-layer parameters of one generation.
#[derive(Clone, Debug)]
pub struct FeatureSnapshot {
    params: Arc<HiddenParams>,
    generation: u64,
}

impl FeatureSnapshot {
    pub fn new(params: HiddenParams) -> Self {
        Self {
            params: Arc::new(params),
            generation: 0,
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn params(&self) -> &HiddenParams {
        &self.params
    }

    pub fn shared_params(&self) -> Arc<HiddenParams> {
        Arc::clone(&self.params)
    }

    pub fn feature_dim(&self) -> usize {
        self.params.feature_width() + 1
    }

    pub fn features(&self, x: &StateVec) -> Vec<f64> {
        self.params.features(x.as_slice())
    }
}

/// Wraps freshly trained parameters as the next generation.
pub fn publish_snapshot(current: &FeatureSnapshot, trained: HiddenParams) -> FeatureSnapshot {
    FeatureSnapshot {
        params: Arc::new(trained),
        generation: current.generation + 1,
    }
}

/// Per-column norm bound `W̄ = u_max_a / sqrt(n_u (1 + n_2/4))`.
pub fn projection_bound(u_max_a: f64, n_u: usize, n_2: usize) -> f64 {
    u_max_a / (n_u as f64 * (1.0 + 0.25 * n_2 as f64)).sqrt()
}

pub fn column_norm(k: &Mat, col: usize) -> f64 {
    (0..k.rows()).map(|r| k[(r, col)] * k[(r, col)]).sum::<f64>().sqrt()
}

/// Rescales every column whose norm exceeds `bound` back onto the ball.
pub fn project_columns(k: &mut Mat, bound: f64) {
    for c in 0..k.cols() {
        let norm = column_norm(k, c);
        if norm <= bound {
            continue;
        }
        let mut scale = bound / norm;
        loop {
            for r in 0..k.rows() {
                k[(r, c)] *= scale;
            }
            if column_norm(k, c) <= bound {
                break;
            }
            // rounding left the column a few ulps outside the ball
            scale = 1.0 - 4.0 * f64::EPSILON;
        }
    }
}

/// Inputs of one output-layer adaptation.
pub struct Transition<'a> {
    pub x_prev: &'a StateVec,
    pub x_now: &'a StateVec,
    pub u_m_prev: &'a ControlVec,
}

/// Normalised update followed by column projection:
///
/// `K̄ = K + θ/‖φ(x⁻)‖² · φ(x⁻) · (g_d†(x − f̄(x⁻, u^m⁻)))ᵀ`.
///
/// `g_pinv` is the pseudo-inverse of the sampled input matrix.
pub fn adapt_step(
    k_prev: &Mat,
    snapshot: &FeatureSnapshot,
    tr: &Transition<'_>,
    theta: f64,
    bound: f64,
    g_pinv: &Mat,
    params: &PlantParams,
) -> Mat {
    let phi = snapshot.features(tr.x_prev);
    let residual = *tr.x_now - step_nominal(tr.x_prev, tr.u_m_prev, params);
    let innovation = g_pinv.mul_vec(residual.as_slice()).expect("5-vector");
    let mut k = unprojected_update(k_prev, &phi, &innovation, theta);
    project_columns(&mut k, bound);
    k
}

pub fn unprojected_update(k_prev: &Mat, phi: &[f64], innovation: &[f64], theta: f64) -> Mat {
    let norm2: f64 = phi.iter().map(|v| v * v).sum();
    let gain = theta / norm2;
    let mut k = k_prev.clone();
    for (r, p) in phi.iter().enumerate() {
        for (c, e) in innovation.iter().enumerate() {
            k[(r, c)] += gain * p * e;
        }
    }
    k
}

/// `−Kᵀφ(x)` before clipping.
pub fn raw_output(k: &Mat, phi: &[f64]) -> ControlVec {
    let mut u = [0.0; NU];
    for (c, out) in u.iter_mut().enumerate() {
        *out = -(0..k.rows()).map(|r| k[(r, c)] * phi[r]).sum::<f64>();
    }
    ControlVec(u)
}

/// Learning control `clip(−Kᵀφ(x), ±u_max_a)` and per-channel clip flags.
pub fn learning_control(
    k: &Mat,
    snapshot: &FeatureSnapshot,
    x: &StateVec,
    u_max_a: f64,
) -> (ControlVec, [bool; NU]) {
    let raw = raw_output(k, &snapshot.features(x));
    clip_control(&raw, u_max_a)
}

pub fn clip_control(raw: &ControlVec, bound: f64) -> (ControlVec, [bool; NU]) {
    let mut out = *raw;
    let mut flags = [false; NU];
    for i in 0..NU {
        if raw[i] > bound {
            out[i] = bound;
            flags[i] = true;
        } else if raw[i] < -bound {
            out[i] = -bound;
            flags[i] = true;
        }
        if out[i] == 0.0 {
            // canonical zero, so that a zero-authority run matches the
            // baseline bit for bit
            out[i] = 0.0;
        }
    }
    (out, flags)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Buffers up to this size are trained full-batch.
    pub full_batch_limit: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Clip level applied to the network output inside the loss, as in the
    /// control loop. Saturated channels pass no gradient.
    #[serde(default)]
    pub output_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.01,
            full_batch_limit: 64,
            batch_size: 16,
            seed: 0,
            output_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss on the whole snapshot before training and after every epoch.
    pub losses: Vec<f64>,
    pub mean_grad_norm: f64,
    /// Largest relative epoch-to-epoch loss increase.
    pub max_relative_increase: f64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("non-empty")
    }
}

/// Mean squared error `1/B Σ ‖c(−Kᵀφ(x_b)) − y_b‖²` and its gradient with
/// respect to the hidden parameters (dump order), by backpropagation. `c` is
/// the element-wise clip to `±clip`, or the identity when `clip` is `None`.
pub fn hidden_loss_and_gradient(
    samples: &[(StateVec, ControlVec)],
    k: &Mat,
    hidden: &HiddenParams,
    clip: Option<f64>,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; hidden.num_params()];
    let mut loss = 0.0;
    let inv_b = 1.0 / samples.len() as f64;
    let offsets: Vec<usize> = hidden
        .layers
        .iter()
        .scan(0, |acc, l| {
            let start = *acc;
            *acc += l.weights.len() + l.bias.len();
            Some(start)
        })
        .collect();

    for (x, y) in samples {
        let cache = hidden.forward(x.as_slice());
        let z_last = cache.outputs.last().expect("non-empty");
        let mut phi = Vec::with_capacity(z_last.len() + 1);
        phi.push(1.0);
        phi.extend_from_slice(z_last);
        let raw = raw_output(k, &phi);
        let (out, saturated) = match clip {
            Some(c) => clip_control(&raw, c),
            None => (raw, [false; NU]),
        };
        let err = out - *y;
        loss += inv_b * (err[0] * err[0] + err[1] * err[1]);

        // dL/dφ = −K · dL/du, skipping the constant leading feature
        let d_out: [f64; NU] =
            std::array::from_fn(|i| if saturated[i] { 0.0 } else { 2.0 * inv_b * err[i] });
        if d_out == [0.0; NU] {
            continue;
        }
        let mut delta: Vec<f64> = (1..phi.len())
            .map(|r| -(k[(r, 0)] * d_out[0] + k[(r, 1)] * d_out[1]))
            .collect();

        for l in (0..hidden.layers.len()).rev() {
            let layer = &hidden.layers[l];
            for (o, d) in delta.iter_mut().enumerate() {
                *d *= layer.activation.slope(cache.pre[l][o], cache.outputs[l][o]);
            }
            let input: &[f64] = if l == 0 {
                x.as_slice()
            } else {
                &cache.outputs[l - 1]
            };
            let base = offsets[l];
            let bias_base = base + layer.weights.len();
            for o in 0..layer.out_dim {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (i, v) in input.iter().enumerate() {
                    grad[base + o * layer.in_dim + i] += d * v;
                }
                grad[bias_base + o] += d;
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for o in 0..layer.out_dim {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                delta = prev;
            }
        }
    }
    (loss, grad)
}

/// Stochastic-gradient training of the hidden layers against stored labels
/// with the output layer frozen.
pub fn train_hidden(
    samples: &[(StateVec, ControlVec)],
    k: &Mat,
    hidden: &HiddenParams,
    cfg: &TrainConfig,
) -> Result<(HiddenParams, TrainReport), NetError> {
    if samples.is_empty() {
        return Err(NetError::EmptyBuffer);
    }
    let mut params = hidden.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let batch = if samples.len() <= cfg.full_batch_limit {
        samples.len()
    } else {
        cfg.batch_size.max(1)
    };

    let mut losses = vec![hidden_loss_and_gradient(samples, k, &params, cfg.output_clip).0];
    let mut grad_norm_sum = 0.0;
    let mut grad_steps = 0usize;
    let mut scratch = Vec::with_capacity(batch);
    for _ in 0..cfg.epochs {
        if batch < samples.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            scratch.clear();
            scratch.extend(chunk.iter().map(|&i| samples[i]));
            let (_, g) = hidden_loss_and_gradient(&scratch, k, &params, cfg.output_clip);
            grad_norm_sum += g.iter().map(|v| v * v).sum::<f64>().sqrt();
            grad_steps += 1;
            params.axpy(-cfg.learning_rate, &g);
        }
        losses.push(hidden_loss_and_gradient(samples, k, &params, cfg.output_clip).0);
    }
    let max_relative_increase = losses
        .windows(2)
        .map(|w| {
            if w[0] > 0.0 {
                (w[1] - w[0]) / w[0]
            } else if w[1] > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    Ok((
        params,
        TrainReport {
            losses,
            mean_grad_norm: if grad_steps > 0 {
                grad_norm_sum / grad_steps as f64
            } else {
                0.0
            },
            max_relative_increase,
        },
    ))
}

/// Structured uncertainty `h(x) = −K*ᵀφ(x)` for a fixed feature map, used to
/// check the update law against a target it can represent exactly.
#[derive(Debug)]
pub struct FeatureUncertainty {
    pub k_star: Mat,
    pub features: FeatureSnapshot,
}

impl Uncertainty for FeatureUncertainty {
    fn eval(&self, s: &StateVec) -> ControlVec {
        raw_output(&self.k_star, &self.features.features(s))
    }
}

/// Hidden parameters plus output layer, with a flat CSV dump.
///
/// The dump has header `index,value` and one row per scalar in this order:
/// for each hidden layer, its weights (row-major, `out × in`) then its
/// biases; then the output matrix `K` row-major (`(n_2 + 1) × n_u`).
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub hidden: HiddenParams,
    pub k: Mat,
}

impl NetParams {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), NetError> {
        writeln!(w, "index,value")?;
        let values = self.hidden.to_flat().into_iter().chain(self.k.as_slice().iter().copied());
        for (i, v) in values.enumerate() {
            writeln!(w, "{i},{v:.16e}")?;
        }
        Ok(())
    }

    /// Reads a dump written for the given architecture.
    pub fn read_csv<R: BufRead>(
        r: R,
        input_dim: usize,
        sizes: &[usize],
    ) -> Result<Self, NetError> {
        let mut values = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if n == 0 {
                if line.trim() != "index,value" {
                    return Err(NetError::Parse(format!("unexpected header {line:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (idx, val) = line
                .split_once(',')
                .ok_or_else(|| NetError::Parse(format!("line {n}: expected two fields")))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|e| NetError::Parse(format!("line {n}: {e}")))?;
            if idx != values.len() {
                return Err(NetError::Parse(format!("line {n}: index {idx} out of order")));
            }
            values.push(
                val.trim()
                    .parse::<f64>()
                    .map_err(|e| NetError::Parse(format!("line {n}: {e}")))?,
            );
        }
        let mut hidden = HiddenParams::zeros(input_dim, sizes);
        let nh = hidden.num_params();
        let k_rows = hidden.feature_width() + 1;
        if values.len() != nh + k_rows * NU {
            return Err(NetError::Parse(format!(
                "expected {} values, found {}",
                nh + k_rows * NU,
                values.len()
            )));
        }
        hidden.set_flat(&values[..nh]);
        let k = Mat::new(k_rows, NU, values[nh..].to_vec())
            .map_err(|e| NetError::Parse(e.to_string()))?;
        Ok(Self { hidden, k })
    }
}

/// Default architecture: state input, hidden widths 8, 12 and `n_2 = 4`.
pub const DEFAULT_HIDDEN: [usize; 3] = [8, 12, 4];
pub const INPUT_DIM: usize = NX;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::pinv_left;
    use crate::plant::discrete_input_matrix;

    fn snapshot(seed: u64) -> FeatureSnapshot {
        FeatureSnapshot::new(HiddenParams::init(INPUT_DIM, &DEFAULT_HIDDEN, 0.5, seed))
    }

    #[test]
    fn zero_network_features() {
        let snap = FeatureSnapshot::new(HiddenParams::zeros(INPUT_DIM, &DEFAULT_HIDDEN));
        let phi = snap.features(&StateVec::new(0.3, -0.1, 1.0, 0.2, -2.0));
        assert_eq!(phi, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn features_lead_with_one_and_are_bounded() {
        let snap = snapshot(3);
        for k in 0..50 {
            let t = k as f64 * 0.1;
            let x = StateVec::new(t.sin() * 2.0, t.cos(), t - 2.5, -t, 3.0 * (2.0 * t).sin());
            let phi = snap.features(&x);
            assert_eq!(phi[0], 1.0);
            let n2: f64 = phi.iter().map(|v| v * v).sum();
            assert!((1.0..=5.0).contains(&n2));
            assert!(phi[1..].iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn equal_inputs_give_equal_features() {
        let snap = snapshot(11);
        let x = StateVec::new(-1.0, -0.25, 0.78, 0.0, -0.39);
        assert_eq!(snap.features(&x), snap.features(&x.clone()));
    }

    #[test]
    fn projection_bound_examples() {
        assert!((projection_bound(0.6, 2, 4) - 0.3).abs() < 1e-15);
        assert!((projection_bound(5.0, 2, 4) - 2.5).abs() < 1e-15);
        assert!((projection_bound(1.2, 2, 4) - 2.0 * projection_bound(0.6, 2, 4)).abs() < 1e-15);
    }

    #[test]
    fn zero_innovation_leaves_k_unchanged() {
        let p = PlantParams::default();
        let g_pinv = pinv_left(&discrete_input_matrix(&p)).unwrap();
        let snap = snapshot(1);
        let mut k = Mat::zeros(5, 2);
        k[(0, 0)] = 0.1;
        k[(2, 1)] = -0.2;
        let x_prev = StateVec::new(-1.0, -0.25, 0.78, 0.0, -0.39);
        let u_m = ControlVec::new(1.0, 2.0);
        let x_now = step_nominal(&x_prev, &u_m, &p);
        let tr = Transition {
            x_prev: &x_prev,
            x_now: &x_now,
            u_m_prev: &u_m,
        };
        let next = adapt_step(&k, &snap, &tr, 0.5, 0.3, &g_pinv, &p);
        assert_eq!(next, k);
    }

    #[test]
    fn update_law_with_unit_features() {
        let phi = [1.0, 0.0, 0.0, 0.0, 0.0];
        let k = unprojected_update(&Mat::zeros(5, 2), &phi, &[0.2, -0.1], 0.5);
        assert!((k[(0, 0)] - 0.1).abs() < 1e-16);
        assert!((k[(0, 1)] + 0.05).abs() < 1e-16);
        for r in 1..5 {
            assert_eq!(k.row(r), &[0.0, 0.0]);
        }
    }

    #[test]
    fn projection_rescales_long_columns_only() {
        let mut k = Mat::zeros(5, 2);
        k[(0, 0)] = 0.6;
        k[(1, 1)] = 0.1;
        project_columns(&mut k, 0.3);
        assert!((k[(0, 0)] - 0.3).abs() < 1e-15);
        assert_eq!(k[(1, 1)], 0.1);
        assert!(column_norm(&k, 0) <= 0.3);
    }

    #[test]
    fn learning_control_examples() {
        let snap = snapshot(5);
        let x = StateVec::new(0.2, 0.1, -0.3, 0.4, 1.0);
        let (u, flags) = learning_control(&Mat::zeros(5, 2), &snap, &x, 0.6);
        assert_eq!(u, ControlVec::ZERO);
        assert_eq!(flags, [false, false]);

        let zero_snap = FeatureSnapshot::new(HiddenParams::zeros(INPUT_DIM, &DEFAULT_HIDDEN));
        let mut k = Mat::zeros(5, 2);
        k[(0, 0)] = 0.1;
        k[(0, 1)] = -0.05;
        let (u, _) = learning_control(&k, &zero_snap, &x, 0.6);
        assert_eq!(u, ControlVec::new(-0.1, 0.05));

        let (u, flags) = clip_control(&ControlVec::new(0.9, -0.2), 0.6);
        assert_eq!(u, ControlVec::new(0.6, -0.2));
        assert_eq!(flags, [true, false]);
    }

    #[test]
    fn training_on_own_outputs_changes_nothing() {
        let snap = snapshot(9);
        let mut k = Mat::zeros(5, 2);
        for r in 0..5 {
            k[(r, 0)] = 0.1 * r as f64;
            k[(r, 1)] = -0.05 * r as f64;
        }
        let samples: Vec<_> = (0..10)
            .map(|i| {
                let x = StateVec::new(-1.0 + 0.1 * i as f64, 0.0, 0.5, -0.1, 0.2);
                (x, raw_output(&k, &snap.features(&x)))
            })
            .collect();
        let (trained, report) =
            train_hidden(&samples, &k, snap.params(), &TrainConfig::default()).unwrap();
        assert_eq!(report.initial_loss(), 0.0);
        let diff = trained
            .to_flat()
            .iter()
            .zip(snap.params().to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10);
    }

    #[test]
    fn empty_buffer_is_rejected() {
        let snap = snapshot(0);
        let err = train_hidden(&[], &Mat::zeros(5, 2), snap.params(), &TrainConfig::default());
        assert!(matches!(err, Err(NetError::EmptyBuffer)));
    }

    #[test]
    fn publish_increments_generation() {
        let snap = snapshot(2);
        let next = publish_snapshot(&snap, snap.params().clone());
        assert_eq!(next.generation(), snap.generation() + 1);
        let x = StateVec::new(0.1, 0.2, 0.3, 0.4, 0.5);
        assert_eq!(next.features(&x), snap.features(&x));
    }
}
