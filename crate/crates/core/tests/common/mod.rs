//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use deep_mpc::buffer::{Admission, NOVELTY_FLOOR};
use deep_mpc::linalg::{pinv_left, Mat};
use deep_mpc::net::{
    adapt_step, column_norm, learning_control, projection_bound, FeatureSnapshot, FeatureUncertainty, HiddenParams,
    Transition, DEFAULT_HIDDEN, INPUT_DIM,
};
use deep_mpc::ocp::{merit_and_gradient, Dynamics, LinearDynamics, OcpProblem, StatePenalty};
use deep_mpc::plant::{discrete_input_matrix, step_nominal, ControlVec, PlantParams, StateVec, TruePlant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; p]; n];
    for i in 0..n {
        for k in 0..m {
            for j in 0..p {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

pub fn mv(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

pub fn tr(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|i, j| a[*i][c].abs().total_cmp(&a[*j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

pub fn to_mat(a: &[Vec<f64>]) -> Mat {
    Mat::from_rows(a).unwrap()
}

/// The tracking objective written as `uᵀHu + 2gᵀu + c` over the stacked
/// controls of a linear system.
pub struct DenseQp {
    pub h: Vec<Vec<f64>>,
    pub g: Vec<f64>,
}

pub struct Lq {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub qf: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    pub x_ref: Vec<Vec<f64>>,
    pub u_ref: Vec<Vec<f64>>,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Lq {
    pub fn nx(&self) -> usize {
        self.a.len()
    }
    pub fn nu(&self) -> usize {
        self.b[0].len()
    }

    pub fn dense(&self) -> DenseQp {
        let (nx, nu, n) = (self.nx(), self.nu(), self.n);
        let m = n * nu;
        let mut h = vec![vec![0.0; m]; m];
        let mut g = vec![0.0; m];
        // x_k = c_k + S_k u
        let mut c = self.x0.clone();
        let mut s = vec![vec![0.0; m]; nx];
        for k in 0..=n {
            let w = if k == n { &self.qf } else { &self.q };
            if k > 0 {
                let d: Vec<f64> = c.iter().zip(&self.x_ref[k]).map(|(p, q)| p - q).collect();
                let st = tr(&s);
                let stw = mm(&st, w);
                let add = mm(&stw, &s);
                for i in 0..m {
                    for j in 0..m {
                        h[i][j] += add[i][j];
                    }
                }
                let gv = mv(&stw, &d);
                for i in 0..m {
                    g[i] += gv[i];
                }
            }
            if k < n {
                for i in 0..nu {
                    for j in 0..nu {
                        h[k * nu + i][k * nu + j] += self.r[i][j];
                    }
                    g[k * nu + i] -= mv(&self.r, &self.u_ref[k])[i];
                }
                c = mv(&self.a, &c);
                let mut s_next = mm(&self.a, &s);
                for i in 0..nx {
                    for j in 0..nu {
                        s_next[i][k * nu + j] += self.b[i][j];
                    }
                }
                s = s_next;
            }
        }
        DenseQp { h, g }
    }

    pub fn problem<'d>(&self, d: &'d LinearDynamics) -> OcpProblem<'d> {
        let nu = self.nu();
        OcpProblem {
            horizon: self.n,
            x0: self.x0.clone(),
            q: to_mat(&self.q),
            r: to_mat(&self.r),
            qf: to_mat(&self.qf),
            x_ref: self.x_ref.clone(),
            u_ref: self.u_ref.clone(),
            lower: vec![vec![self.lo; nu]; self.n],
            upper: vec![vec![self.hi; nu]; self.n],
            terminal_target: None,
            state_penalty: None,
            dynamics: d,
        }
    }

    pub fn dynamics(&self) -> LinearDynamics {
        LinearDynamics {
            a: to_mat(&self.a),
            b: to_mat(&self.b),
        }
    }
}

/// Exact box-QP minimiser by enumerating every free/lower/upper pattern.
pub fn brute_force_box_qp(qp: &DenseQp, lo: f64, hi: f64) -> Vec<f64> {
    let m = qp.g.len();
    let value = |u: &[f64]| -> f64 {
        let hu = mv(&qp.h, u);
        u.iter().zip(&hu).map(|(a, b)| a * b).sum::<f64>() + 2.0 * u.iter().zip(&qp.g).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(m as u32) {
        let pattern: Vec<usize> = (0..m).map(|i| code / 3usize.pow(i as u32) % 3).collect();
        let mut u = vec![0.0; m];
        for i in 0..m {
            u[i] = match pattern[i] {
                1 => lo,
                2 => hi,
                _ => 0.0,
            };
        }
        let free: Vec<usize> = (0..m).filter(|i| pattern[*i] == 0).collect();
        if !free.is_empty() {
            let hff: Vec<Vec<f64>> = free.iter().map(|i| free.iter().map(|j| qp.h[*i][*j]).collect()).collect();
            let rhs: Vec<f64> = free
                .iter()
                .map(|i| -qp.g[*i] - (0..m).filter(|j| pattern[*j] != 0).map(|j| qp.h[*i][j] * u[j]).sum::<f64>())
                .collect();
            let uf = gauss_solve(hff, rhs);
            for (k, i) in free.iter().enumerate() {
                u[*i] = uf[k];
            }
        }
        if u.iter().any(|v| *v < lo - 1e-12 || *v > hi + 1e-12) {
            continue;
        }
        let v = value(&u);
        if best.as_ref().map_or(true, |(b, _)| v < *b) {
            best = Some((v, u));
        }
    }
    best.unwrap().1
}

pub fn random_lq(rng: &mut ChaCha8Rng, nx: usize, nu: usize, n: usize, lo: f64, hi: f64) -> Lq {
    let mut rm = |r: usize, c: usize, s: f64| -> Vec<Vec<f64>> {
        (0..r).map(|_| (0..c).map(|_| rng.gen_range(-s..s)).collect()).collect()
    };
    let mut a = rm(nx, nx, 0.5);
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let b = rm(nx, nu, 1.0);
    let lq = rm(nx, nx, 1.0);
    let lr = rm(nu, nu, 0.5);
    let spd = |l: &[Vec<f64>], shift: f64| {
        let mut p = mm(l, &tr(l));
        for (i, row) in p.iter_mut().enumerate() {
            row[i] += shift;
        }
        p
    };
    let q = spd(&lq, 0.1);
    let r = spd(&lr, 0.5);
    let qf = spd(&lq, 1.0);
    let x0 = rm(1, nx, 2.0).remove(0);
    let x_ref = rm(n + 1, nx, 1.0);
    let u_ref = rm(n, nu, 1.0);
    Lq { a, b, q, r, qf, x0, x_ref, u_ref, lo, hi, n }
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

/// Smallest singular value through the eigenvalues of the smaller Gram
/// matrix, by cyclic Jacobi rotations.
pub fn sigma_min(rows: &[Vec<f64>]) -> f64 {
    let (m, n) = (rows.len(), rows[0].len());
    let k = m.min(n);
    let mut g = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            g[i][j] = if m <= n {
                (0..n).map(|c| rows[i][c] * rows[j][c]).sum()
            } else {
                (0..m).map(|r| rows[r][i] * rows[r][j]).sum()
            };
        }
    }
    for _ in 0..100 {
        let off: f64 = (0..k).flat_map(|i| (0..k).filter(move |j| *j != i).map(move |j| (i, j))).map(|(i, j)| g[i][j] * g[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                if g[p][q].abs() < 1e-300 {
                    continue;
                }
                let tau = (g[q][q] - g[p][p]) / (2.0 * g[p][q]);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for r in 0..k {
                    let (a, b) = (g[r][p], g[r][q]);
                    g[r][p] = c * a - s * b;
                    g[r][q] = s * a + c * b;
                }
                for r in 0..k {
                    let (a, b) = (g[p][r], g[q][r]);
                    g[p][r] = c * a - s * b;
                    g[q][r] = s * a + c * b;
                }
            }
        }
    }
    (0..k).map(|i| g[i][i].max(0.0)).fold(f64::INFINITY, f64::min).sqrt()
}

/// Exhaustive decision: append if there is room and the enlarged stack stays
/// above the floor; otherwise try every single replacement. Returns every
/// decision consistent with the exact rule once comparisons closer than
/// `TIE` (relative) are treated as ties, because two SVD routines cannot
/// be expected to order floating-point near-ties identically. With no near
/// tie the result has exactly one element.
pub fn brute_force(features: &[Vec<f64>], cand: &[f64], capacity: usize) -> Vec<Admission> {
    const TIE: f64 = 1e-10;
    let close = |a: f64, b: f64| (a - b).abs() <= TIE * a.abs().max(b.abs()).max(NOVELTY_FLOOR);
    if features.is_empty() {
        return vec![Admission::Appended];
    }
    if features.len() < capacity {
        let mut rows = features.to_vec();
        rows.push(cand.to_vec());
        let s = sigma_min(&rows);
        if close(s, NOVELTY_FLOOR) {
            return vec![Admission::Appended, Admission::Rejected];
        }
        return vec![if s > NOVELTY_FLOOR { Admission::Appended } else { Admission::Rejected }];
    }
    let current = sigma_min(features);
    let scores: Vec<f64> = (0..features.len())
        .map(|i| {
            let mut rows = features.to_vec();
            rows[i] = cand.to_vec();
            sigma_min(&rows)
        })
        .collect();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::new();
    if best > current || close(best, current) {
        out.extend((0..scores.len()).filter(|i| close(scores[*i], best)).map(|index| Admission::Replaced { index }));
    }
    if best <= current || close(best, current) {
        out.push(Admission::Rejected);
    }
    out
}

pub fn skid_problem<'d>(d: &'d dyn Dynamics, penalty: bool) -> OcpProblem<'d> {
    let p = PlantParams::default();
    let n = 10;
    OcpProblem {
        horizon: n,
        x0: vec![-1.0, -0.25, 0.78, 0.1, -0.39],
        q: Mat::diag(&[0.5, 2.0, 1.0, 0.5, 5.0]),
        r: Mat::identity(2),
        qf: Mat::diag(&[1e3; 5]),
        x_ref: (0..=n).map(|k| vec![0.05 * k as f64, 0.0, 0.1, p.v_ref, 0.0]).collect(),
        u_ref: vec![vec![1.0, 1.5]; n],
        lower: vec![vec![-9.4; 2]; n],
        upper: vec![vec![9.4; 2]; n],
        terminal_target: None,
        state_penalty: penalty.then(|| StatePenalty {
            lower: vec![-0.5, -0.3, -1.0, -0.5, -0.5],
            upper: vec![0.5, 0.3, 1.0, 1.0, 0.5],
            weight: 50.0,
        }),
        dynamics: d,
    }
}

pub fn fd_relative_error(prob: &OcpProblem<'_>, controls: &[Vec<f64>]) -> f64 {
    let (_, g) = merit_and_gradient(prob, controls);
    let nu = controls[0].len();
    let mut fd = Vec::with_capacity(g.len());
    for j in 0..g.len() {
        let (k, i) = (j / nu, j % nu);
        let h = 1e-6 * controls[k][i].abs().max(1.0);
        let mut up = controls.to_vec();
        up[k][i] += h;
        let mut dn = controls.to_vec();
        dn[k][i] -= h;
        fd.push((merit_and_gradient(prob, &up).0 - merit_and_gradient(prob, &dn).0) / (2.0 * h));
    }
    let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    num / den
}

/// Drives the plant with `h = −K*ᵀφ` and random excitation, adapting `K`
/// every step. Returns the per-step residual `‖u^a_t + h(x_t)‖`, obtained
/// from the observed transition as `‖g_d†(x_{t+1} − f̄(x_t, u^m_t))‖`.
pub fn structured_oracle_residuals(seed: u64, steps: usize) -> Vec<f64> {
    let p = PlantParams::default();
    let snap = FeatureSnapshot::new(HiddenParams::init(INPUT_DIM, &DEFAULT_HIDDEN, 0.5, seed));
    let bound = projection_bound(0.6, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k_star = Mat::new(5, 2, (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    for c in 0..2 {
        let n = column_norm(&k_star, c);
        for r in 0..5 {
            k_star[(r, c)] *= 0.8 * bound / n;
        }
    }
    let plant = TruePlant::new(
        p,
        Box::new(FeatureUncertainty {
            k_star,
            features: snap.clone(),
        }),
    );
    let g_pinv = pinv_left(&discrete_input_matrix(&p)).unwrap();
    let mut k = Mat::zeros(5, 2);
    let mut x = StateVec::new(-1.0, -0.25, std::f64::consts::FRAC_PI_4, 0.0, -std::f64::consts::FRAC_PI_8);
    let mut residuals = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (u_a, clipped) = learning_control(&k, &snap, &x, 0.6);
        assert_eq!(clipped, [false; 2]);
        // excitation plus damping that keeps the speeds bounded
        let u_m = ControlVec::new(
            rng.gen_range(-4.0..4.0) - 3.0 * x.v() + 1.0 * x.omega(),
            rng.gen_range(-4.0..4.0) - 3.0 * x.v() - 1.0 * x.omega(),
        );
        let next = plant.step(&x, &(u_a + u_m));
        let innovation = g_pinv.mul_vec((next - step_nominal(&x, &u_m, &p)).as_slice()).unwrap();
        residuals.push(innovation.iter().map(|v| v * v).sum::<f64>().sqrt());
        k = adapt_step(
            &k,
            &snap,
            &Transition {
                x_prev: &x,
                x_now: &next,
                u_m_prev: &u_m,
            },
            0.5,
            bound,
            &g_pinv,
            &p,
        );
        for c in 0..2 {
            assert!(column_norm(&k, c) <= bound);
        }
        x = next;
    }
    residuals
}

