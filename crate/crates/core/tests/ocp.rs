mod common;

use common::*;
use deep_mpc::linalg::Mat;
use deep_mpc::ocp::{
    merit_and_gradient, shift_warm_start, solve, LinearDynamics, NominalSkidSteer, OcpError, OcpProblem, Shifted,
    SolverOptions,
};
use deep_mpc::plant::PlantParams;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- box-QP test set ----

#[test]
fn separable_box_qp_is_clipped_reference() {
    // B = 0: the states do not depend on u and the optimum is clip(u_ref).
    let d = LinearDynamics {
        a: Mat::identity(2),
        b: Mat::zeros(2, 2),
    };
    let u_ref = vec![vec![3.0, -0.25], vec![-7.0, 0.5], vec![0.9, 1.5]];
    let prob = OcpProblem {
        horizon: 3,
        x0: vec![1.0, -1.0],
        q: Mat::identity(2),
        r: Mat::diag(&[2.0, 0.1]),
        qf: Mat::identity(2),
        x_ref: vec![vec![0.0; 2]; 4],
        u_ref: u_ref.clone(),
        lower: vec![vec![-1.0; 2]; 3],
        upper: vec![vec![1.0; 2]; 3],
        terminal_target: None,
        state_penalty: None,
        dynamics: &d,
    };
    let sol = solve(&prob, None, &SolverOptions::online()).unwrap();
    for (u, r) in sol.controls.iter().zip(&u_ref) {
        for i in 0..2 {
            assert!((u[i] - r[i].clamp(-1.0, 1.0)).abs() < 1e-5);
        }
    }
}

#[test]
fn coupled_box_qp_with_one_active_bound() {
    // min (u − c)ᵀ R (u − c) with u_1 ≤ 0.5 and c = (1, 2): u_1 = 0.5 and
    // u_0 = c_0 − R_01 / R_00 (0.5 − c_1).
    let d = LinearDynamics {
        a: Mat::identity(1),
        b: Mat::zeros(1, 2),
    };
    let r = [[2.0, 0.8], [0.8, 1.0]];
    let prob = OcpProblem {
        horizon: 1,
        x0: vec![0.0],
        q: Mat::zeros(1, 1),
        r: Mat::from_rows(&r).unwrap(),
        qf: Mat::zeros(1, 1),
        x_ref: vec![vec![0.0]; 2],
        u_ref: vec![vec![1.0, 2.0]],
        lower: vec![vec![-5.0, -5.0]],
        upper: vec![vec![5.0, 0.5]],
        terminal_target: None,
        state_penalty: None,
        dynamics: &d,
    };
    let sol = solve(&prob, None, &SolverOptions::online()).unwrap();
    let u0 = 1.0 - 0.8 / 2.0 * (0.5 - 2.0);
    assert!((sol.controls[0][0] - u0).abs() < 1e-5, "{:?}", sol.controls);
    assert!((sol.controls[0][1] - 0.5).abs() < 1e-5);
}

#[test]
fn scalar_terminal_cost_inactive_and_active() {
    // x⁺ = x + u, cost q_f (x_2 − T)² + r (u_0² + u_1²): the unconstrained
    // optimum splits the distance evenly, u_i = q_f (T − x_0) / (r + 2 q_f).
    let d = LinearDynamics {
        a: Mat::identity(1),
        b: Mat::identity(1),
    };
    let build = |target: f64| OcpProblem {
        horizon: 2,
        x0: vec![0.5],
        q: Mat::zeros(1, 1),
        r: Mat::identity(1),
        qf: Mat::diag(&[4.0]),
        x_ref: vec![vec![0.0], vec![0.0], vec![target]],
        u_ref: vec![vec![0.0]; 2],
        lower: vec![vec![-1.0]; 2],
        upper: vec![vec![1.0]; 2],
        terminal_target: None,
        state_penalty: None,
        dynamics: &d,
    };
    let sol = solve(&build(1.5), None, &SolverOptions::online()).unwrap();
    let expect = 4.0 * (1.5 - 0.5) / (1.0 + 8.0);
    for u in &sol.controls {
        assert!((u[0] - expect).abs() < 1e-5);
    }
    let sol = solve(&build(10.0), None, &SolverOptions::online()).unwrap();
    for u in &sol.controls {
        assert!((u[0] - 1.0).abs() < 1e-5);
    }
}

#[test]
fn double_integrator_matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..40 {
        let mut lq = random_lq(&mut rng, 2, 1, 2, -0.5, 0.5);
        lq.a = vec![vec![1.0, 0.5], vec![0.0, 1.0]];
        lq.b = vec![vec![0.125], vec![0.5]];
        let d = lq.dynamics();
        let sol = solve(&lq.problem(&d), None, &SolverOptions::online()).unwrap();
        let oracle = brute_force_box_qp(&lq.dense(), lq.lo, lq.hi);
        let got: Vec<f64> = sol.controls.concat();
        assert!(max_diff(&got, &oracle) < 1e-5, "case {case}: {got:?} vs {oracle:?}");
    }
}

#[test]
fn random_box_qps_match_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut active = 0;
    for case in 0..60 {
        let lq = random_lq(&mut rng, 3, 2, 2, -0.4, 0.6);
        let d = lq.dynamics();
        let sol = solve(&lq.problem(&d), None, &SolverOptions::online()).unwrap();
        let oracle = brute_force_box_qp(&lq.dense(), lq.lo, lq.hi);
        active += oracle.iter().filter(|v| **v == lq.lo || **v == lq.hi).count();
        let got: Vec<f64> = sol.controls.concat();
        assert!(max_diff(&got, &oracle) < 1e-5, "case {case}: {got:?} vs {oracle:?}");
    }
    // The set exercises the bounds, not only interior optima.
    assert!(active > 30, "only {active} active bounds");
}

#[test]
fn unconstrained_lq_matches_riccati_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let mut lq = random_lq(&mut rng, 3, 2, 6, -1e3, 1e3);
        lq.x_ref = vec![vec![0.0; 3]; 7];
        lq.u_ref = vec![vec![0.0; 2]; 6];
        // Backward Riccati recursion.
        let mut p = lq.qf.clone();
        let mut gains = Vec::new();
        for _ in 0..lq.n {
            let btp = mm(&tr(&lq.b), &p);
            let mut s = mm(&btp, &lq.b);
            for i in 0..2 {
                for j in 0..2 {
                    s[i][j] += lq.r[i][j];
                }
            }
            let btpa = mm(&btp, &lq.a);
            // K = S⁻¹ BᵀPA, column by column.
            let cols: Vec<Vec<f64>> = (0..3).map(|j| gauss_solve(s.clone(), tr(&btpa)[j].clone())).collect();
            let k = tr(&cols);
            let a_bk = {
                let bk = mm(&lq.b, &k);
                let mut m = lq.a.clone();
                for i in 0..3 {
                    for j in 0..3 {
                        m[i][j] -= bk[i][j];
                    }
                }
                m
            };
            let mut p_new = mm(&mm(&tr(&lq.a), &p), &a_bk);
            for i in 0..3 {
                for j in 0..3 {
                    p_new[i][j] += lq.q[i][j];
                }
            }
            p = p_new;
            gains.push(k);
        }
        gains.reverse();
        let mut x = lq.x0.clone();
        let mut oracle = Vec::new();
        for k in &gains {
            let u: Vec<f64> = mv(k, &x).iter().map(|v| -v).collect();
            let next: Vec<f64> = mv(&lq.a, &x).iter().zip(mv(&lq.b, &u)).map(|(p, q)| p + q).collect();
            oracle.extend(u);
            x = next;
        }
        let d = lq.dynamics();
        let sol = solve(&lq.problem(&d), None, &SolverOptions::online()).unwrap();
        let got: Vec<f64> = sol.controls.concat();
        assert!(max_diff(&got, &oracle) < 1e-6, "{got:?} vs {oracle:?}");
    }
}

// ---- gradients ----

#[test]
fn rollout_gradient_matches_central_differences() {
    let p = PlantParams::default();
    let nominal = NominalSkidSteer { params: p };
    let shifted = Shifted {
        inner: nominal,
        x_s: vec![0.3, -0.1, 0.2, p.v_ref, 0.0],
        u_s: vec![0.5, -0.5],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..12 {
        let penalty = trial % 2 == 1;
        let d: &dyn deep_mpc::ocp::Dynamics = if trial % 3 == 0 { &shifted } else { &nominal };
        let prob = skid_problem(d, penalty);
        let controls: Vec<Vec<f64>> = (0..prob.horizon)
            .map(|_| (0..2).map(|_| rng.gen_range(-6.0..6.0)).collect())
            .collect();
        let err = fd_relative_error(&prob, &controls);
        assert!(err <= 1e-5, "trial {trial}: relative error {err:e}");
    }
}

#[test]
fn linear_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let lq = random_lq(&mut rng, 3, 2, 5, -2.0, 2.0);
        let d = lq.dynamics();
        let prob = lq.problem(&d);
        let controls: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        assert!(fd_relative_error(&prob, &controls) <= 1e-5);
    }
}

// ---- invariants ----

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(48) })]

    #[test]
    fn solution_respects_the_box_and_improves_on_the_warm_start(
        seed in 0u64..10_000,
        half in 0.5f64..9.4,
        warm in proptest::collection::vec(-15.0f64..15.0, 20),
    ) {
        let nominal = NominalSkidSteer { params: PlantParams::default() };
        let mut prob = skid_problem(&nominal, seed % 2 == 0);
        prob.lower = vec![vec![-half; 2]; prob.horizon];
        prob.upper = vec![vec![half; 2]; prob.horizon];
        let warm: Vec<Vec<f64>> = warm.chunks(2).map(|c| c.to_vec()).collect();
        let projected: Vec<Vec<f64>> =
            warm.iter().map(|u| u.iter().map(|v| v.clamp(-half, half)).collect()).collect();
        let start = merit_and_gradient(&prob, &projected).0;
        let sol = match solve(&prob, Some(&warm), &SolverOptions::online()) {
            Ok(s) => s,
            Err(OcpError::MaxIterations { best }) => *best,
            Err(e) => panic!("{e}"),
        };
        prop_assert!(sol.controls.iter().flatten().all(|v| v.abs() <= half));
        prop_assert!(sol.merit <= start * (1.0 + 1e-12));
        let rolled = prob.rollout(&sol.controls);
        prop_assert_eq!(&rolled, &sol.states);
    }

    #[test]
    fn shifted_warm_start_keeps_length(n in 0usize..30) {
        let seq: Vec<usize> = (0..n).collect();
        let s = shift_warm_start(&seq);
        prop_assert_eq!(s.len(), n);
        if n >= 2 {
            prop_assert_eq!(&s[..n - 1], &seq[1..]);
            prop_assert_eq!(s[n - 1], n - 1);
        }
    }
}
