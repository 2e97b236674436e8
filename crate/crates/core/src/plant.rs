//! Skid-steer robot model.
//!
//! Continuous-time dynamics `ṡ = f(s) + G·(u + h(s))` with state
//! `s = [x, y, θ, v, ω]` (where `v` is the speed offset from the cruise speed
//! `v_r`) and wheel forces `u = [F_L, F_R]`. The discrete model holds the
//! input (and the matched uncertainty `h`, evaluated at the start state)
//! constant over one sampling period, so
//!
//! ```text
//! step_true(s, u) == step_nominal(s, u + h(s))
//! ```
//!
//! holds bit-for-bit by construction.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::linalg::Mat;

pub const NX: usize = 5;
pub const NU: usize = 2;

/// Jacobian of a state map with respect to the state (row-major, `NX×NX`).
pub type StateJacobian = [[f64; NX]; NX];
/// Jacobian of a state map with respect to the control (`NX×NU`).
pub type ControlJacobian = [[f64; NU]; NX];

/// Plant state `[x, y, θ, v, ω]`.
#[derive(Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVec(pub [f64; NX]);

impl StateVec {
    pub const fn new(x: f64, y: f64, theta: f64, v: f64, omega: f64) -> Self {
        Self([x, y, theta, v, omega])
    }

    pub fn x(&self) -> f64 {
        self.0[0]
    }
    pub fn y(&self) -> f64 {
        self.0[1]
    }
    pub fn theta(&self) -> f64 {
        self.0[2]
    }
    pub fn v(&self) -> f64 {
        self.0[3]
    }
    pub fn omega(&self) -> f64 {
        self.0[4]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let mut s = [0.0; NX];
        s.copy_from_slice(v);
        Self(s)
    }

    pub fn inf_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for StateVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateVec{:?}", self.0)
    }
}

/// Wheel forces `[F_L, F_R]`.
#[derive(Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlVec(pub [f64; NU]);

impl ControlVec {
    pub const ZERO: ControlVec = ControlVec([0.0; NU]);

    pub const fn new(left: f64, right: f64) -> Self {
        Self([left, right])
    }

    pub fn left(&self) -> f64 {
        self.0[0]
    }
    pub fn right(&self) -> f64 {
        self.0[1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self([v[0], v[1]])
    }

    pub fn inf_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Membership in the box `‖u‖∞ ≤ bound`.
    pub fn is_admissible(&self, bound: f64) -> bool {
        self.inf_norm() <= bound
    }
}

impl fmt::Debug for ControlVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ControlVec{:?}", self.0)
    }
}

macro_rules! vec_ops {
    ($t:ident, $n:expr) => {
        impl Add for $t {
            type Output = $t;
            fn add(self, rhs: $t) -> $t {
                let mut out = self.0;
                for i in 0..$n {
                    out[i] += rhs.0[i];
                }
                $t(out)
            }
        }
        impl Sub for $t {
            type Output = $t;
            fn sub(self, rhs: $t) -> $t {
                let mut out = self.0;
                for i in 0..$n {
                    out[i] -= rhs.0[i];
                }
                $t(out)
            }
        }
        impl Neg for $t {
            type Output = $t;
            fn neg(self) -> $t {
                $t(self.0.map(|v| -v))
            }
        }
        impl Index<usize> for $t {
            type Output = f64;
            fn index(&self, i: usize) -> &f64 {
                &self.0[i]
            }
        }
        impl IndexMut<usize> for $t {
            fn index_mut(&mut self, i: usize) -> &mut f64 {
                &mut self.0[i]
            }
        }
    };
}

vec_ops!(StateVec, NX);
vec_ops!(ControlVec, NU);

/// Axis-aligned state box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lower: [f64; NX],
    pub upper: [f64; NX],
}

impl StateBox {
    /// The operational region of the skid-steer experiment.
    pub fn operational() -> Self {
        let half_pi = std::f64::consts::FRAC_PI_2;
        Self {
            lower: [-2.0, -0.5, -half_pi, -1.5, -3.0],
            upper: [1.0, 0.5, half_pi, 1.5, 3.0],
        }
    }

    pub fn contains(&self, s: &StateVec) -> bool {
        self.max_violation(s) == 0.0
    }

    /// Largest amount by which any component lies outside the box.
    pub fn max_violation(&self, s: &StateVec) -> f64 {
        (0..NX)
            .map(|i| (self.lower[i] - s[i]).max(s[i] - self.upper[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Box scaled by `factor` about `center`.
    pub fn scaled_about(&self, center: &StateVec, factor: f64) -> Self {
        let mut out = *self;
        if factor == 1.0 {
            return out;
        }
        for i in 0..NX {
            out.lower[i] = center[i] + factor * (self.lower[i] - center[i]);
            out.upper[i] = center[i] + factor * (self.upper[i] - center[i]);
        }
        out
    }

    pub fn is_subset_of(&self, other: &StateBox) -> bool {
        (0..NX).all(|i| self.lower[i] >= other.lower[i] && self.upper[i] <= other.upper[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// Mass `M` [kg].
    pub mass: f64,
    /// Moment of inertia `I` [kg·m²].
    pub inertia: f64,
    /// Wheel half-track `b` [m].
    pub half_track: f64,
    /// Cruise speed `v_r` [m/s].
    pub v_ref: f64,
    /// Sampling period `T_s` [s].
    pub dt: f64,
    pub integrator: Integrator,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            mass: 15.0,
            inertia: 0.1,
            half_track: 0.1,
            v_ref: 0.8,
            dt: 0.05,
            integrator: Integrator::Rk4,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("mass", self.mass),
            ("inertia", self.inertia),
            ("half_track", self.half_track),
            ("v_ref", self.v_ref),
            ("dt", self.dt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("plant parameter {name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    /// Equilibrium of the nominal model: zero pose, speed `-v_r`, no rotation.
    pub fn equilibrium(&self) -> StateVec {
        StateVec::new(0.0, 0.0, 0.0, -self.v_ref, 0.0)
    }

    fn g_rows(&self) -> ([f64; 2], [f64; 2]) {
        let a = 1.0 / self.mass;
        let c = self.half_track / self.inertia;
        ([a, a], [-c, c])
    }
}

/// Drift term `f(s)` of the continuous-time model.
pub fn drift_f_ct(s: &StateVec, p: &PlantParams) -> StateVec {
    let speed = s.v() + p.v_ref;
    StateVec::new(
        speed * s.theta().cos(),
        speed * s.theta().sin(),
        s.omega(),
        0.0,
        0.0,
    )
}

fn drift_jacobian(s: &StateVec, p: &PlantParams) -> StateJacobian {
    let speed = s.v() + p.v_ref;
    let (sin, cos) = s.theta().sin_cos();
    let mut j = [[0.0; NX]; NX];
    j[0][2] = -speed * sin;
    j[0][3] = cos;
    j[1][2] = speed * cos;
    j[1][3] = sin;
    j[2][4] = 1.0;
    j
}

/// Constant continuous-time input matrix `G` (5×2).
pub fn input_matrix_g(p: &PlantParams) -> Mat {
    let (v_row, w_row) = p.g_rows();
    Mat::from_rows(&[
        [0.0, 0.0],
        [0.0, 0.0],
        [0.0, 0.0],
        v_row,
        w_row,
    ])
    .expect("finite entries")
}

/// Input matrix of the sampled model, `T_s·G`.
///
/// With the input held over a step, the `v` and `ω` rows of
/// `x⁺ − f̄(x, 0)` equal `T_s·G·u` exactly, and the pseudo-inverse of
/// `T_s·G` only reads those rows. Consequently `g_d† (x⁺ − f̄(x, u))`
/// recovers the matched input-space disturbance without integrator error.
pub fn discrete_input_matrix(p: &PlantParams) -> Mat {
    let (v_row, w_row) = p.g_rows();
    let dt = p.dt;
    Mat::from_rows(&[
        [0.0, 0.0],
        [0.0, 0.0],
        [0.0, 0.0],
        [dt * v_row[0], dt * v_row[1]],
        [dt * w_row[0], dt * w_row[1]],
    ])
    .expect("finite entries")
}

fn vector_field(s: &StateVec, u: &ControlVec, p: &PlantParams) -> StateVec {
    let (v_row, w_row) = p.g_rows();
    let mut d = drift_f_ct(s, p);
    d[3] += v_row[0] * u[0] + v_row[1] * u[1];
    d[4] += w_row[0] * u[0] + w_row[1] * u[1];
    d
}

fn axpy(s: &StateVec, a: f64, k: &StateVec) -> StateVec {
    let mut out = *s;
    for i in 0..NX {
        out[i] += a * k[i];
    }
    out
}

/// One sampling period of the nominal (uncertainty-free) model `f̄(s, u)`.
pub fn step_nominal(s: &StateVec, u: &ControlVec, p: &PlantParams) -> StateVec {
    integrate(s, u, p, p.dt)
}

fn integrate(s: &StateVec, u: &ControlVec, p: &PlantParams, h: f64) -> StateVec {
    match p.integrator {
        Integrator::Euler => axpy(s, h, &vector_field(s, u, p)),
        Integrator::Rk4 => {
            let k1 = vector_field(s, u, p);
            let k2 = vector_field(&axpy(s, 0.5 * h, &k1), u, p);
            let k3 = vector_field(&axpy(s, 0.5 * h, &k2), u, p);
            let k4 = vector_field(&axpy(s, h, &k3), u, p);
            let mut out = *s;
            for i in 0..NX {
                out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            out
        }
    }
}

/// Integrates with an explicit step length, for convergence studies.
pub fn step_nominal_with_dt(s: &StateVec, u: &ControlVec, p: &PlantParams, dt: f64) -> StateVec {
    integrate(s, u, p, dt)
}

/// `f̄(s, u)` together with `∂f̄/∂s` and `∂f̄/∂u`.
pub fn step_nominal_jacobians(
    s: &StateVec,
    u: &ControlVec,
    p: &PlantParams,
) -> (StateVec, StateJacobian, ControlJacobian) {
    let h = p.dt;
    let (v_row, w_row) = p.g_rows();
    let mut g = [[0.0; NU]; NX];
    g[3] = v_row;
    g[4] = w_row;

    let mut id = [[0.0; NX]; NX];
    for (i, row) in id.iter_mut().enumerate() {
        row[i] = 1.0;
    }

    match p.integrator {
        Integrator::Euler => {
            let next = axpy(s, h, &vector_field(s, u, p));
            let jf = drift_jacobian(s, p);
            let a = add_scaled(&id, h, &jf);
            let mut b = [[0.0; NU]; NX];
            for i in 0..NX {
                for j in 0..NU {
                    b[i][j] = h * g[i][j];
                }
            }
            (next, a, b)
        }
        Integrator::Rk4 => {
            // Forward-mode chain rule through the four stages.
            let k1 = vector_field(s, u, p);
            let j1 = drift_jacobian(s, p);
            let dk1_ds = j1;
            let dk1_du = g;

            let s2 = axpy(s, 0.5 * h, &k1);
            let j2 = drift_jacobian(&s2, p);
            let ds2_ds = add_scaled(&id, 0.5 * h, &dk1_ds);
            let ds2_du = scale_b(0.5 * h, &dk1_du);
            let k2 = vector_field(&s2, u, p);
            let dk2_ds = mm(&j2, &ds2_ds);
            let dk2_du = add_b(&mb(&j2, &ds2_du), &g);

            let s3 = axpy(s, 0.5 * h, &k2);
            let j3 = drift_jacobian(&s3, p);
            let ds3_ds = add_scaled(&id, 0.5 * h, &dk2_ds);
            let ds3_du = scale_b(0.5 * h, &dk2_du);
            let k3 = vector_field(&s3, u, p);
            let dk3_ds = mm(&j3, &ds3_ds);
            let dk3_du = add_b(&mb(&j3, &ds3_du), &g);

            let s4 = axpy(s, h, &k3);
            let j4 = drift_jacobian(&s4, p);
            let ds4_ds = add_scaled(&id, h, &dk3_ds);
            let ds4_du = scale_b(h, &dk3_du);
            let k4 = vector_field(&s4, u, p);
            let dk4_ds = mm(&j4, &ds4_ds);
            let dk4_du = add_b(&mb(&j4, &ds4_du), &g);

            let mut next = *s;
            let mut a = id;
            let mut b = [[0.0; NU]; NX];
            let w = h / 6.0;
            for i in 0..NX {
                next[i] += w * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                for j in 0..NX {
                    a[i][j] += w
                        * (dk1_ds[i][j] + 2.0 * dk2_ds[i][j] + 2.0 * dk3_ds[i][j] + dk4_ds[i][j]);
                }
                for j in 0..NU {
                    b[i][j] =
                        w * (dk1_du[i][j] + 2.0 * dk2_du[i][j] + 2.0 * dk3_du[i][j] + dk4_du[i][j]);
                }
            }
            (next, a, b)
        }
    }
}

fn mm(a: &StateJacobian, b: &StateJacobian) -> StateJacobian {
    let mut out = [[0.0; NX]; NX];
    for i in 0..NX {
        for k in 0..NX {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..NX {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn mb(a: &StateJacobian, b: &ControlJacobian) -> ControlJacobian {
    let mut out = [[0.0; NU]; NX];
    for i in 0..NX {
        for k in 0..NX {
            for j in 0..NU {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn add_scaled(a: &StateJacobian, s: f64, b: &StateJacobian) -> StateJacobian {
    let mut out = *a;
    for i in 0..NX {
        for j in 0..NX {
            out[i][j] += s * b[i][j];
        }
    }
    out
}

fn scale_b(s: f64, b: &ControlJacobian) -> ControlJacobian {
    b.map(|row| row.map(|v| s * v))
}

fn add_b(a: &ControlJacobian, b: &ControlJacobian) -> ControlJacobian {
    let mut out = *a;
    for i in 0..NX {
        for j in 0..NU {
            out[i][j] += b[i][j];
        }
    }
    out
}

/// Matched input-space uncertainty `h(s)`.
///
/// Implementations are handed to [`TruePlant`] and never to a controller.
pub trait Uncertainty: Send + Sync + fmt::Debug {
    fn eval(&self, s: &StateVec) -> ControlVec;
}

/// Rolling-resistance forces of the skid-steer experiment, `h(s) = −R(s)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct RollingResistance;

impl Uncertainty for RollingResistance {
    fn eval(&self, s: &StateVec) -> ControlVec {
        uncertainty_h(s)
    }
}

/// `h ≡ 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoUncertainty;

impl Uncertainty for NoUncertainty {
    fn eval(&self, _s: &StateVec) -> ControlVec {
        ControlVec::ZERO
    }
}

/// Another uncertainty multiplied by a constant.
#[derive(Debug)]
pub struct ScaledUncertainty<U> {
    pub scale: f64,
    pub inner: U,
}

impl<U: Uncertainty> Uncertainty for ScaledUncertainty<U> {
    fn eval(&self, s: &StateVec) -> ControlVec {
        let h = self.inner.eval(s);
        ControlVec::new(self.scale * h[0], self.scale * h[1])
    }
}

/// Rolling resistance `R(s)`.
pub fn rolling_resistance(s: &StateVec) -> ControlVec {
    let (x, y, th, v, w) = (s.x(), s.y(), s.theta(), s.v(), s.omega());
    let r1 = -2.0 * th.cos() + w * y - v * th + w;
    let r2 = 2.0 * (1.0 - th.sin()) + x * v - y - 0.5 * y * y;
    ControlVec::new(r1, r2)
}

/// `h(s) = −R(s)`.
pub fn uncertainty_h(s: &StateVec) -> ControlVec {
    -rolling_resistance(s)
}

/// One sampling period of the true plant: nominal step driven by `u + h(s)`.
pub fn step_true(
    s: &StateVec,
    u: &ControlVec,
    p: &PlantParams,
    h: &dyn Uncertainty,
) -> StateVec {
    step_nominal(s, &(*u + h.eval(s)), p)
}

/// The simulated system. Owns the uncertainty; exposes it only through
/// [`TruePlant::oracle`], which is meant for logging and test assertions.
#[derive(Debug)]
pub struct TruePlant {
    params: PlantParams,
    uncertainty: Box<dyn Uncertainty>,
}

impl TruePlant {
    pub fn new(params: PlantParams, uncertainty: Box<dyn Uncertainty>) -> Self {
        Self {
            params,
            uncertainty,
        }
    }

    /// The skid-steer plant with rolling resistance.
    pub fn skid_steer(params: PlantParams) -> Self {
        Self::new(params, Box::new(RollingResistance))
    }

    pub fn params(&self) -> &PlantParams {
        &self.params
    }

    pub fn step(&self, s: &StateVec, u: &ControlVec) -> StateVec {
        step_true(s, u, &self.params, self.uncertainty.as_ref())
    }

    pub fn oracle(&self) -> UncertaintyOracle<'_> {
        UncertaintyOracle(self.uncertainty.as_ref())
    }
}

/// Read access to the plant's hidden uncertainty.
#[derive(Clone, Copy)]
pub struct UncertaintyOracle<'a>(&'a dyn Uncertainty);

impl UncertaintyOracle<'_> {
    pub fn h(&self, s: &StateVec) -> ControlVec {
        self.0.eval(s)
    }

    /// `g·h(s)` in continuous time, whose norm bounds the additive disturbance.
    pub fn additive_disturbance(&self, s: &StateVec, p: &PlantParams) -> Vec<f64> {
        input_matrix_g(p)
            .mul_vec(self.h(s).as_slice())
            .expect("2-vector")
    }
}
