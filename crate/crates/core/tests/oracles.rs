//! Cross-checks against independent computations: truncated power series,
//! closed-form flows and hand-solved optimal control problems.

use nalgebra::{DMatrix, DVector};

use izmpc::dynamics::{flow, flow_jacobian, flow_lipschitz_bounds, IntegratorConfig, VectorField};
use izmpc::equilibria::{find_target_equilibria, EquilibriumPair, EquilibriumSetApprox, FeasibleSetResult, TargetSearch, XdMethod};
use izmpc::geometry::{BoxSet, Region};
use izmpc::impulsive::simulate_closed_loop;
use izmpc::linalg::{expm, spectral_norm};
use izmpc::models::{self, HivParams};
use izmpc::mpc::{MpcConfig, MpcProblem, SolveStatus};

/// Taylor series with enough terms for ‖M‖ ≲ 10.
fn expm_series(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..80 {
        term = &term * m / k as f64;
        sum += &term;
    }
    sum
}

/// Largest singular value by power iteration on `MᵀM`.
fn norm_power(m: &DMatrix<f64>) -> f64 {
    let g = m.transpose() * m;
    let mut v = DVector::from_element(m.ncols(), 1.0);
    for _ in 0..2000 {
        v = &g * &v;
        v /= v.norm();
    }
    (v.dot(&(&g * &v))).sqrt()
}

#[test]
fn expm_matches_power_series() {
    let a = models::lithium_a();
    for t in [0.1, 1.0, 3.0, 6.0] {
        let m = &a * t;
        let want = expm_series(&m);
        assert!((expm(&m) - &want).amax() < 1e-12 * want.amax().max(1.0), "t = {t}");
    }
}

#[test]
fn lithium_norms_pinned() {
    let a = models::lithium_a();
    // frozen from the power-iteration oracle
    assert!((norm_power(&a) - 1.633_53).abs() < 1e-5);
    assert!((spectral_norm(&a) - norm_power(&a)).abs() < 1e-10);
    let e3 = expm_series(&(&a * 3.0));
    assert!((norm_power(&e3) - 1.137_09).abs() < 1e-5);
    let est = flow_lipschitz_bounds(&models::lithium_field(), 3.0, &models::lithium_state_bounds()).unwrap();
    assert!((est.c_phi_exp - (3.0 * 1.633_53f64).exp()).abs() < 1e-3);
    assert!((est.norm_exp_ta.unwrap() - 1.137_09).abs() < 1e-5);
    // dense scan of the series oracle over [0, 3]
    let sup = (0..=3000)
        .map(|j| norm_power(&expm_series(&(&a * (j as f64 * 1e-3)))))
        .fold(0.0f64, f64::max);
    assert!((est.c_phi_linear.unwrap() - sup).abs() < 1e-5);
    assert!((sup - 1.139_54).abs() < 1e-5);
}

#[test]
fn nonlinear_flow_matches_closed_form() {
    // ẋ = −x², x(t) = x0 / (1 + x0 t)
    let f = VectorField::new(1, |x| DVector::from_element(1, -x[0] * x[0])).with_jacobian(|x| DMatrix::from_element(1, 1, -2.0 * x[0]));
    let cfg = IntegratorConfig::default();
    for (x0, t) in [(1.0, 2.0), (3.0, 0.7), (0.25, 10.0)] {
        let got = flow(&f, &DVector::from_element(1, x0), t, &cfg).unwrap()[0];
        let want = x0 / (1.0 + x0 * t);
        assert!((got - want).abs() < 1e-8 * want.abs().max(1.0), "{x0} {t}");
        let jac = flow_jacobian(&f, &DVector::from_element(1, x0), t, &cfg).unwrap()[(0, 0)];
        let want_jac = 1.0 / (1.0 + x0 * t).powi(2);
        assert!((jac - want_jac).abs() < 1e-7, "{x0} {t}: {jac} vs {want_jac}");
    }
}

#[test]
fn rk4_agrees_with_adaptive() {
    let f = models::hiv_field(HivParams::default());
    let x = models::hiv_initial_state() + DVector::from_column_slice(&[0.0, 0.0, 0.0, 300.0]);
    let a = flow(&f, &x, 0.5, &IntegratorConfig::default()).unwrap();
    let b = flow(&f, &x, 0.5, &IntegratorConfig::rk4(1e-3)).unwrap();
    assert!((&a - &b).amax() < 1e-6 * a.amax());
}

#[test]
fn lithium_equilibria_are_fixed_points_of_the_series_map() {
    let sys = models::lithium_system(IntegratorConfig::default()).unwrap();
    let search = TargetSearch {
        grid_per_dim: 7,
        ..Default::default()
    };
    let set = find_target_equilibria(&sys, &models::lithium_target(), &search).unwrap();
    assert!(!set.is_empty());
    let phi = expm_series(&(models::lithium_a() * 3.0));
    let b = DVector::from_column_slice(&models::LITHIUM_B);
    for p in &set.pairs {
        let next = &phi * &p.x_s + &b * p.u_s[0];
        assert!((next - &p.x_s).amax() < 1e-7);
        assert!(p.u_s[0] >= 0.0 && p.u_s[0] <= 5.95);
    }
}

fn toy_problem(x_s: f64, horizon: usize) -> MpcProblem {
    let sys = models::toy1d_system(IntegratorConfig::default()).unwrap();
    let pair = EquilibriumPair {
        x_s: DVector::from_element(1, x_s),
        u_s: DVector::from_element(1, x_s / 2.0),
        residual: 0.0,
    };
    let target = EquilibriumSetApprox::from_pairs(&sys, vec![pair], 20).unwrap();
    let xd = FeasibleSetResult {
        region: Region::Box(BoxSet::cube(1, -10.0, 10.0).unwrap()),
        method: XdMethod::MeshHull,
        certificate: vec![],
        orbit_resolution: 20,
        shrink_rounds: 0,
    };
    let mut cfg = MpcConfig::new(horizon, DMatrix::identity(1, 1), DMatrix::identity(1, 1), 0.0);
    cfg.pin_reference = true;
    MpcProblem::new(sys, cfg, target, xd).unwrap()
}

#[test]
fn toy_two_step_closed_form() {
    // x1 = 1/2 + u0, u1 = −x1/2; J = 1 + u0² + (5/4)x1², minimized at u0 = −5/18
    let prob = toy_problem(0.0, 2);
    let sol = prob.solve(&DVector::from_element(1, 1.0), None).unwrap();
    assert_eq!(sol.status, SolveStatus::Converged);
    assert!((sol.cost - 41.0 / 36.0).abs() < 1e-6);
    assert!((sol.u_seq[0][0] + 5.0 / 18.0).abs() < 1e-5);
    assert!((sol.u_seq[1][0] + 1.0 / 9.0).abs() < 1e-5);
}

#[test]
fn toy_two_step_shifted_reference() {
    // with (x_s, u_s) = (2, 1) the same algebra holds in e = x − 2, v = u − 1
    let prob = toy_problem(2.0, 2);
    let sol = prob.solve(&DVector::from_element(1, 3.0), None).unwrap();
    assert_eq!(sol.status, SolveStatus::Converged);
    assert!((sol.cost - 41.0 / 36.0).abs() < 1e-6);
    assert!((sol.u_seq[0][0] - (1.0 - 5.0 / 18.0)).abs() < 1e-5);
}

#[test]
fn toy_one_step_is_deadbeat() {
    // N = 1: the only feasible input is u0 = −x0/2, cost x0² + x0²/4
    let prob = toy_problem(0.0, 1);
    let x0 = -3.0;
    let sol = prob.solve(&DVector::from_element(1, x0), None).unwrap();
    assert!((sol.u_seq[0][0] + x0 / 2.0).abs() < 1e-5);
    assert!((sol.cost - 1.25 * x0 * x0).abs() < 1e-5);
}

#[test]
fn free_toy_trajectory_halves() {
    let sys = models::toy1d_system(IntegratorConfig::default()).unwrap();
    let mut zero = |_: &DVector<f64>| DVector::zeros(1);
    let (h, d) = simulate_closed_loop(&sys, &mut zero, &DVector::from_element(1, 8.0), 3, 4).unwrap();
    assert_eq!(h.sample_count(), 3 * 4 + 1);
    for (k, x) in d.states.iter().enumerate() {
        assert!((x[0] - 8.0 / 2f64.powi(k as i32)).abs() < 1e-9);
    }
}

#[test]
fn hiv_endemic_point_is_rest_point() {
    let p = HivParams::default();
    let tc = p.endemic_tc();
    let y = (p.s - p.delta * tc) / p.mu;
    let z = p.k * y / p.c;
    let f = models::hiv_field(p).eval(&DVector::from_column_slice(&[tc, y, z, 0.0])).unwrap();
    assert!(f.amax() < 1e-9);
}
