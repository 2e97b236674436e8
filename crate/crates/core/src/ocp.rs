//! Finite-horizon optimal control by single shooting.
//!
//! The decision variables are the controls `u_0 … u_{N−1}`; states are
//! rollouts of the dynamics from the fixed initial state, so the only
//! constraints left are per-stage control boxes. The objective
//!
//! ```text
//! Σ_{k<N} ‖x_k − x^r_k‖²_Q + ‖u_k − u^r_k‖²_R  +  ‖x_N − x^r_N‖²_{Q_f}
//!   + w Σ_{k≥1} dist(x_k, X_box)²                       (optional hinge)
//!   + λᵀ(x_N − x_T) + ρ/2 ‖x_N − x_T‖²                  (terminal equality)
//! ```
//!
//! is minimised by projected Gauss-Newton steps with an Armijo backtracking
//! search along the projection arc. Gradients come from a reverse (adjoint)
//! sweep through the step Jacobians; the Gauss-Newton matrix from forward
//! sensitivities. A terminal equality is handled by an augmented Lagrangian
//! outer loop.

use thiserror::Error;

use crate::linalg::{cholesky, cholesky_solve, is_psd, Mat};
use crate::plant::{
    step_nominal, step_nominal_jacobians, ControlVec, PlantParams, StateVec, NU, NX,
};

/// Projected-gradient tolerance for convergence.
pub const KKT_TOL: f64 = 1e-6;
/// Allowed `‖x_N − target‖∞` when a terminal equality is present.
pub const TERMINAL_TOL: f64 = 1e-4;

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-14;
const ACTIVE_EPS: f64 = 1e-3;

/// Discrete-time dynamics `x⁺ = F(x, u)` with Jacobians.
pub trait Dynamics {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
    /// Returns `(F(x, u), ∂F/∂x, ∂F/∂u)`.
    fn step_jacobians(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Mat, Mat);
}

/// Nominal skid-steer model `f̄(x, u)`.
#[derive(Clone, Copy, Debug)]
pub struct NominalSkidSteer {
    pub params: PlantParams,
}

impl Dynamics for NominalSkidSteer {
    fn nx(&self) -> usize {
        NX
    }
    fn nu(&self) -> usize {
        NU
    }
    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        step_nominal(&StateVec::from_slice(x), &ControlVec::from_slice(u), &self.params)
            .0
            .to_vec()
    }
    fn step_jacobians(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Mat, Mat) {
        let (next, a, b) = step_nominal_jacobians(
            &StateVec::from_slice(x),
            &ControlVec::from_slice(u),
            &self.params,
        );
        let a = Mat::from_rows(&a).expect("finite");
        let b = Mat::from_rows(&b).expect("finite");
        (next.0.to_vec(), a, b)
    }
}

/// Dynamics expressed in coordinates relative to a set-point:
/// `x̃⁺ = F(x̃ + x_s, ũ + u_s) − x_s`.
#[derive(Clone, Debug)]
pub struct Shifted<D> {
    pub inner: D,
    pub x_s: Vec<f64>,
    pub u_s: Vec<f64>,
}

impl<D: Dynamics> Shifted<D> {
    fn lift(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            x.iter().zip(&self.x_s).map(|(a, b)| a + b).collect(),
            u.iter().zip(&self.u_s).map(|(a, b)| a + b).collect(),
        )
    }
}

impl<D: Dynamics> Dynamics for Shifted<D> {
    fn nx(&self) -> usize {
        self.inner.nx()
    }
    fn nu(&self) -> usize {
        self.inner.nu()
    }
    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let (x, u) = self.lift(x, u);
        let mut next = self.inner.step(&x, &u);
        next.iter_mut().zip(&self.x_s).for_each(|(a, b)| *a -= b);
        next
    }
    fn step_jacobians(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Mat, Mat) {
        let (x, u) = self.lift(x, u);
        let (mut next, a, b) = self.inner.step_jacobians(&x, &u);
        next.iter_mut().zip(&self.x_s).for_each(|(a, b)| *a -= b);
        (next, a, b)
    }
}

/// Linear time-invariant dynamics `x⁺ = A x + B u`.
#[derive(Clone, Debug)]
pub struct LinearDynamics {
    pub a: Mat,
    pub b: Mat,
}

impl Dynamics for LinearDynamics {
    fn nx(&self) -> usize {
        self.a.rows()
    }
    fn nu(&self) -> usize {
        self.b.cols()
    }
    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let ax = self.a.mul_vec(x).expect("shape");
        let bu = self.b.mul_vec(u).expect("shape");
        ax.iter().zip(&bu).map(|(p, q)| p + q).collect()
    }
    fn step_jacobians(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Mat, Mat) {
        (self.step(x, u), self.a.clone(), self.b.clone())
    }
}

/// Soft state-box constraint `w·dist(x_k, box)²` on predicted states `k ≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePenalty {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub weight: f64,
}

impl StatePenalty {
    fn excess(&self, i: usize, x: f64) -> f64 {
        if x > self.upper[i] {
            x - self.upper[i]
        } else if x < self.lower[i] {
            x - self.lower[i]
        } else {
            0.0
        }
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(i, v)| self.excess(i, *v).abs())
            .fold(0.0, f64::max)
    }
}

pub struct OcpProblem<'a> {
    pub horizon: usize,
    pub x0: Vec<f64>,
    pub q: Mat,
    pub r: Mat,
    pub qf: Mat,
    /// Stage references `x^r_0 … x^r_N` (length `N + 1`; the last one is the
    /// terminal reference).
    pub x_ref: Vec<Vec<f64>>,
    /// Control references `u^r_0 … u^r_{N−1}`.
    pub u_ref: Vec<Vec<f64>>,
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    pub terminal_target: Option<Vec<f64>>,
    pub state_penalty: Option<StatePenalty>,
    pub dynamics: &'a dyn Dynamics,
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub kkt_tol: f64,
    pub terminal_tol: f64,
    pub al_initial_penalty: f64,
    pub al_growth: f64,
    pub al_max_rounds: usize,
}

impl SolverOptions {
    /// Settings for the receding-horizon tracking problem.
    pub fn online() -> Self {
        Self {
            max_iter: 200,
            ..Self::default()
        }
    }

    /// Settings for the long-horizon reference problem.
    pub fn governor() -> Self {
        Self {
            max_iter: 2000,
            ..Self::default()
        }
    }
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            kkt_tol: KKT_TOL,
            terminal_tol: TERMINAL_TOL,
            al_initial_penalty: 100.0,
            al_growth: 10.0,
            al_max_rounds: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcpSolution {
    pub controls: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    /// Tracking objective (without penalty or multiplier terms).
    pub objective: f64,
    /// Objective plus state-penalty and augmented-Lagrangian terms.
    pub merit: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub terminal_violation: f64,
    pub max_state_violation: f64,
}

impl OcpSolution {
    pub fn control(&self, k: usize) -> ControlVec {
        ControlVec::from_slice(&self.controls[k])
    }

    pub fn state(&self, k: usize) -> StateVec {
        StateVec::from_slice(&self.states[k])
    }
}

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("objective became non-finite during rollout")]
    NonFiniteObjective,
    #[error("no convergence after {} iterations (KKT residual {:e})", best.iterations, best.kkt_residual)]
    MaxIterations { best: Box<OcpSolution> },
}

/// Drops the first control and repeats the last one.
pub fn shift_warm_start<T: Clone>(prev: &[T]) -> Vec<T> {
    match prev {
        [] => Vec::new(),
        [only] => vec![only.clone()],
        [_, rest @ ..] => {
            let mut out = rest.to_vec();
            out.push(rest[rest.len() - 1].clone());
            out
        }
    }
}

impl OcpProblem<'_> {
    pub fn validate(&self) -> Result<(), OcpError> {
        let bad = |m: String| Err(OcpError::InvalidProblem(m));
        let (nx, nu, n) = (self.dynamics.nx(), self.dynamics.nu(), self.horizon);
        if n == 0 {
            return bad("horizon must be positive".into());
        }
        if self.x0.len() != nx {
            return bad(format!("initial state has length {}, expected {nx}", self.x0.len()));
        }
        for (name, m, dim) in [("Q", &self.q, nx), ("Q_f", &self.qf, nx), ("R", &self.r, nu)] {
            if m.rows() != dim || m.cols() != dim {
                return bad(format!("{name} must be {dim}x{dim}"));
            }
            if !is_psd(m, 1e-12) {
                return bad(format!("{name} must be symmetric positive semidefinite"));
            }
        }
        if cholesky(&self.r).is_err() {
            return bad("R must be positive definite".into());
        }
        if self.x_ref.len() != n + 1 || self.x_ref.iter().any(|x| x.len() != nx) {
            return bad(format!("state reference must have {} entries of length {nx}", n + 1));
        }
        for (name, seq) in [("u_ref", &self.u_ref), ("lower", &self.lower), ("upper", &self.upper)]
        {
            if seq.len() != n || seq.iter().any(|u| u.len() != nu) {
                return bad(format!("{name} must have {n} entries of length {nu}"));
            }
        }
        for k in 0..n {
            for i in 0..nu {
                if !(self.lower[k][i] <= self.upper[k][i]) {
                    return bad(format!("box at stage {k} has lower > upper in input {i}"));
                }
            }
        }
        if let Some(t) = &self.terminal_target {
            if t.len() != nx {
                return bad("terminal target has wrong length".into());
            }
        }
        if let Some(p) = &self.state_penalty {
            if p.lower.len() != nx || p.upper.len() != nx || !(p.weight >= 0.0) {
                return bad("state penalty malformed".into());
            }
        }
        Ok(())
    }

    fn project(&self, u: &mut [f64]) {
        let nu = self.dynamics.nu();
        for (j, v) in u.iter_mut().enumerate() {
            let (k, i) = (j / nu, j % nu);
            *v = v.clamp(self.lower[k][i], self.upper[k][i]);
        }
    }

    fn box_center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .flat_map(|(l, u)| l.iter().zip(u).map(|(a, b)| 0.5 * (a + b)))
            .collect()
    }

    /// States obtained by rolling out `controls` from `x0`.
    pub fn rollout(&self, controls: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut xs = Vec::with_capacity(controls.len() + 1);
        xs.push(self.x0.clone());
        for u in controls {
            let next = self.dynamics.step(xs.last().expect("non-empty"), u);
            xs.push(next);
        }
        xs
    }

    /// Tracking objective of a control sequence (no penalties).
    pub fn objective(&self, controls: &[Vec<f64>]) -> f64 {
        let xs = self.rollout(controls);
        self.tracking_cost(&xs, controls)
    }

    fn tracking_cost(&self, xs: &[Vec<f64>], us: &[Vec<f64>]) -> f64 {
        let n = self.horizon;
        let mut cost = 0.0;
        for k in 0..n {
            cost += quad(&self.q, &xs[k], &self.x_ref[k]);
            cost += quad(&self.r, &us[k], &self.u_ref[k]);
        }
        cost + quad(&self.qf, &xs[n], &self.x_ref[n])
    }
}

fn quad(w: &Mat, x: &[f64], r: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        let di = x[i] - r[i];
        if di == 0.0 {
            continue;
        }
        for j in 0..n {
            s += di * w[(i, j)] * (x[j] - r[j]);
        }
    }
    s
}

/// `2 W (x − r)`.
fn quad_grad(w: &Mat, x: &[f64], r: &[f64]) -> Vec<f64> {
    let d: Vec<f64> = x.iter().zip(r).map(|(a, b)| a - b).collect();
    w.mul_vec(&d)
        .expect("shape")
        .into_iter()
        .map(|v| 2.0 * v)
        .collect()
}

/// Terminal augmented-Lagrangian state.
#[derive(Clone, Debug)]
struct Multiplier {
    target: Vec<f64>,
    lambda: Vec<f64>,
    rho: f64,
}

struct Evaluation {
    xs: Vec<Vec<f64>>,
    a: Vec<Mat>,
    b: Vec<Mat>,
    merit: f64,
    objective: f64,
}

/// Exposed for the gradient tests: merit value and its adjoint gradient for
/// a problem without a terminal multiplier.
pub fn merit_and_gradient(problem: &OcpProblem<'_>, controls: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let flat: Vec<f64> = controls.iter().flatten().copied().collect();
    let solver = Solver {
        p: problem,
        opts: SolverOptions::default(),
    };
    let ev = solver.evaluate(&flat, None);
    let g = solver.gradient(&ev, &flat, None);
    (ev.merit, g)
}

struct Solver<'p, 'a> {
    p: &'p OcpProblem<'a>,
    opts: SolverOptions,
}

impl Solver<'_, '_> {
    fn nu(&self) -> usize {
        self.p.dynamics.nu()
    }

    fn evaluate(&self, u: &[f64], mult: Option<&Multiplier>) -> Evaluation {
        let p = self.p;
        let nu = self.nu();
        let n = p.horizon;
        let mut xs = Vec::with_capacity(n + 1);
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        xs.push(p.x0.clone());
        for k in 0..n {
            let (next, ak, bk) = p.dynamics.step_jacobians(&xs[k], &u[k * nu..(k + 1) * nu]);
            xs.push(next);
            a.push(ak);
            b.push(bk);
        }
        let us: Vec<Vec<f64>> = u.chunks(nu).map(<[f64]>::to_vec).collect();
        let objective = p.tracking_cost(&xs, &us);
        let mut merit = objective;
        if let Some(pen) = &p.state_penalty {
            for x in &xs[1..] {
                for (i, v) in x.iter().enumerate() {
                    let e = pen.excess(i, *v);
                    merit += pen.weight * e * e;
                }
            }
        }
        if let Some(m) = mult {
            for (i, v) in xs[n].iter().enumerate() {
                let c = v - m.target[i];
                merit += m.lambda[i] * c + 0.5 * m.rho * c * c;
            }
        }
        if !merit.is_finite() || xs.iter().flatten().any(|v| !v.is_finite()) {
            merit = f64::INFINITY;
        }
        Evaluation {
            xs,
            a,
            b,
            merit,
            objective,
        }
    }

    /// `∂ merit / ∂x_k` for `k ≥ 1`.
    fn state_cost_grad(&self, ev: &Evaluation, k: usize, mult: Option<&Multiplier>) -> Vec<f64> {
        let p = self.p;
        let n = p.horizon;
        let x = &ev.xs[k];
        let mut g = if k == n {
            quad_grad(&p.qf, x, &p.x_ref[n])
        } else {
            quad_grad(&p.q, x, &p.x_ref[k])
        };
        if let Some(pen) = &p.state_penalty {
            for (i, v) in x.iter().enumerate() {
                g[i] += 2.0 * pen.weight * pen.excess(i, *v);
            }
        }
        if k == n {
            if let Some(m) = mult {
                for i in 0..g.len() {
                    g[i] += m.lambda[i] + m.rho * (x[i] - m.target[i]);
                }
            }
        }
        g
    }

    /// Reverse sweep: `λ_N = ∂ℓ_N/∂x_N`, `λ_k = ∂ℓ_k/∂x_k + A_kᵀ λ_{k+1}`,
    /// `∂/∂u_k = 2R(u_k − u^r_k) + B_kᵀ λ_{k+1}`.
    fn gradient(&self, ev: &Evaluation, u: &[f64], mult: Option<&Multiplier>) -> Vec<f64> {
        let p = self.p;
        let (n, nu, nx) = (p.horizon, self.nu(), p.dynamics.nx());
        let mut grad = vec![0.0; n * nu];
        let mut lambda = self.state_cost_grad(ev, n, mult);
        for k in (0..n).rev() {
            let uk = &u[k * nu..(k + 1) * nu];
            let gr = quad_grad(&p.r, uk, &p.u_ref[k]);
            for i in 0..nu {
                let mut s = gr[i];
                for r in 0..nx {
                    s += ev.b[k][(r, i)] * lambda[r];
                }
                grad[k * nu + i] = s;
            }
            if k > 0 {
                let mut next = self.state_cost_grad(ev, k, mult);
                for (c, nv) in next.iter_mut().enumerate() {
                    for r in 0..nx {
                        *nv += ev.a[k][(r, c)] * lambda[r];
                    }
                }
                lambda = next;
            }
        }
        grad
    }

    /// Gauss-Newton matrix `2 Σ_k S_kᵀ W_k S_k + 2 blockdiag(R)`, where
    /// `S_k = ∂x_k/∂u` and `W_k` is the stage curvature.
    fn gauss_newton(&self, ev: &Evaluation, mult: Option<&Multiplier>) -> Mat {
        let p = self.p;
        let (n, nu, nx) = (p.horizon, self.nu(), p.dynamics.nx());
        let dim = n * nu;
        let mut h = Mat::zeros(dim, dim);
        // sens[j] = ∂x_k/∂u_j for the current k, j < k.
        let mut sens: Vec<Mat> = Vec::with_capacity(n);
        for k in 1..=n {
            for s in sens.iter_mut() {
                *s = ev.a[k - 1].matmul(s).expect("shape");
            }
            sens.push(ev.b[k - 1].clone());

            let mut w = if k == n { p.qf.clone() } else { p.q.clone() };
            if let Some(pen) = &p.state_penalty {
                for (i, v) in ev.xs[k].iter().enumerate() {
                    if pen.excess(i, *v) != 0.0 {
                        w[(i, i)] += pen.weight;
                    }
                }
            }
            if k == n {
                if let Some(m) = mult {
                    for i in 0..nx {
                        w[(i, i)] += 0.5 * m.rho;
                    }
                }
            }
            let ws: Vec<Mat> = sens.iter().map(|s| w.matmul(s).expect("shape")).collect();
            for i in 0..k {
                for j in i..k {
                    // block (i, j) += S_iᵀ W S_j
                    for a in 0..nu {
                        for b in 0..nu {
                            let mut s = 0.0;
                            for r in 0..nx {
                                s += sens[i][(r, a)] * ws[j][(r, b)];
                            }
                            h[(i * nu + a, j * nu + b)] += 2.0 * s;
                        }
                    }
                }
            }
        }
        for k in 0..n {
            for a in 0..nu {
                for b in 0..nu {
                    h[(k * nu + a, k * nu + b)] += 2.0 * p.r[(a, b)];
                }
            }
        }
        // mirror upper blocks into the lower triangle
        for i in 0..dim {
            for j in 0..i {
                let (bi, bj) = (i / nu, j / nu);
                if bi != bj {
                    h[(i, j)] = h[(j, i)];
                }
            }
        }
        // diagonal blocks were filled completely; symmetrise them
        for k in 0..n {
            for a in 0..nu {
                for b in 0..a {
                    let (ia, ib) = (k * nu + a, k * nu + b);
                    let avg = 0.5 * (h[(ia, ib)] + h[(ib, ia)]);
                    h[(ia, ib)] = avg;
                    h[(ib, ia)] = avg;
                }
            }
        }
        h
    }

    fn projected_residual(&self, u: &[f64], g: &[f64]) -> f64 {
        let mut trial: Vec<f64> = u.iter().zip(g).map(|(a, b)| a - b).collect();
        self.p.project(&mut trial);
        u.iter()
            .zip(&trial)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Projected Gauss-Newton on the merit function with fixed multipliers.
    fn inner(
        &self,
        mut u: Vec<f64>,
        mult: Option<&Multiplier>,
        iter_budget: usize,
    ) -> Result<(Vec<f64>, Evaluation, f64, usize, bool), OcpError> {
        let p = self.p;
        let nu = self.nu();
        let dim = u.len();
        let mut ev = self.evaluate(&u, mult);
        if !ev.merit.is_finite() {
            return Err(OcpError::NonFiniteObjective);
        }
        let mut iters = 0;
        loop {
            let g = self.gradient(&ev, &u, mult);
            let res = self.projected_residual(&u, &g);
            if res <= self.opts.kkt_tol {
                return Ok((u, ev, res, iters, true));
            }
            if iters >= iter_budget {
                return Ok((u, ev, res, iters, false));
            }
            iters += 1;

            let eps = ACTIVE_EPS.min(res);
            let active: Vec<bool> = (0..dim)
                .map(|j| {
                    let (k, i) = (j / nu, j % nu);
                    (u[j] <= p.lower[k][i] + eps && g[j] > 0.0)
                        || (u[j] >= p.upper[k][i] - eps && g[j] < 0.0)
                })
                .collect();
            let free: Vec<usize> = (0..dim).filter(|&j| !active[j]).collect();

            let h = self.gauss_newton(&ev, mult);
            let mut d = vec![0.0; dim];
            for j in 0..dim {
                if active[j] {
                    d[j] = -g[j] / h[(j, j)].max(f64::MIN_POSITIVE);
                }
            }
            if !free.is_empty() {
                let mut hf = Mat::zeros(free.len(), free.len());
                for (a, &ja) in free.iter().enumerate() {
                    for (b, &jb) in free.iter().enumerate() {
                        hf[(a, b)] = h[(ja, jb)];
                    }
                }
                let gf: Vec<f64> = free.iter().map(|&j| -g[j]).collect();
                let l = match cholesky(&hf) {
                    Ok(l) => l,
                    Err(_) => {
                        let scale = (0..free.len()).map(|i| hf[(i, i)]).fold(1.0, f64::max);
                        for i in 0..free.len() {
                            hf[(i, i)] += 1e-10 * scale;
                        }
                        cholesky(&hf).map_err(|_| OcpError::NonFiniteObjective)?
                    }
                };
                let df = cholesky_solve(&l, &gf);
                for (a, &j) in free.iter().enumerate() {
                    d[j] = df[a];
                }
            }

            // Backtracking along the projection arc.
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha >= MIN_STEP {
                let mut trial: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
                p.project(&mut trial);
                let decrease: f64 = g
                    .iter()
                    .zip(trial.iter().zip(&u))
                    .map(|(gj, (t, uj))| gj * (t - uj))
                    .sum();
                if decrease < 0.0 {
                    let tev = self.evaluate(&trial, mult);
                    if tev.merit <= ev.merit + ARMIJO_C * decrease {
                        accepted = Some((trial, tev));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            match accepted {
                Some((trial, tev)) => {
                    u = trial;
                    ev = tev;
                }
                None => {
                    // No decrease representable in floating point. Accept
                    // the iterate when the residual is small relative to
                    // the merit's magnitude.
                    let ok = res <= self.opts.kkt_tol * ev.merit.abs().max(1.0);
                    return Ok((u, ev, res, iters, ok));
                }
            }
        }
    }

    fn finish(
        &self,
        u: Vec<f64>,
        ev: Evaluation,
        res: f64,
        iterations: usize,
        converged: bool,
    ) -> OcpSolution {
        let p = self.p;
        let nu = self.nu();
        let n = p.horizon;
        let terminal_violation = p.terminal_target.as_ref().map_or(0.0, |t| {
            ev.xs[n]
                .iter()
                .zip(t)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        });
        let max_state_violation = p.state_penalty.as_ref().map_or(0.0, |pen| {
            ev.xs[1..]
                .iter()
                .map(|x| pen.max_violation(x))
                .fold(0.0, f64::max)
        });
        OcpSolution {
            controls: u.chunks(nu).map(<[f64]>::to_vec).collect(),
            states: ev.xs,
            objective: ev.objective,
            merit: ev.merit,
            kkt_residual: res,
            iterations,
            converged,
            terminal_violation,
            max_state_violation,
        }
    }
}

/// Solves the problem, starting from `warm_start` (projected onto the boxes)
/// or from the box centres.
pub fn solve(
    problem: &OcpProblem<'_>,
    warm_start: Option<&[Vec<f64>]>,
    opts: &SolverOptions,
) -> Result<OcpSolution, OcpError> {
    problem.validate()?;
    let nu = problem.dynamics.nu();
    let mut u: Vec<f64> = match warm_start {
        Some(ws) => {
            if ws.len() != problem.horizon || ws.iter().any(|v| v.len() != nu) {
                return Err(OcpError::InvalidProblem(format!(
                    "warm start must have {} controls of length {nu}",
                    problem.horizon
                )));
            }
            ws.iter().flatten().copied().collect()
        }
        None => problem.box_center(),
    };
    problem.project(&mut u);
    let solver = Solver {
        p: problem,
        opts: opts.clone(),
    };

    let solution = match &problem.terminal_target {
        None => {
            let (u, ev, res, iters, ok) = solver.inner(u, None, opts.max_iter)?;
            solver.finish(u, ev, res, iters, ok)
        }
        Some(target) => {
            let mut mult = Multiplier {
                target: target.clone(),
                lambda: vec![0.0; target.len()],
                rho: opts.al_initial_penalty,
            };
            let mut total = 0;
            let mut last = None;
            for _ in 0..opts.al_max_rounds.max(1) {
                let (un, ev, res, iters, ok) = solver.inner(u, Some(&mult), opts.max_iter)?;
                total += iters;
                let n = problem.horizon;
                let c: Vec<f64> = ev.xs[n].iter().zip(target).map(|(a, b)| a - b).collect();
                let viol = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                u = un.clone();
                let done = ok && viol <= opts.terminal_tol;
                last = Some((un, ev, res, ok && viol <= opts.terminal_tol));
                if done {
                    break;
                }
                for (l, ci) in mult.lambda.iter_mut().zip(&c) {
                    *l += mult.rho * ci;
                }
                mult.rho *= opts.al_growth;
            }
            let (u, ev, res, ok) = last.expect("at least one round");
            solver.finish(u, ev, res, total, ok)
        }
    };

    if !solution.merit.is_finite() {
        return Err(OcpError::NonFiniteObjective);
    }
    if solution.converged {
        Ok(solution)
    } else {
        Err(OcpError::MaxIterations {
            best: Box::new(solution),
        })
    }
}
