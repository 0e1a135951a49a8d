//! Integration tests of the forward-backward integral-equation solver against
//! independent oracles: closed forms, high-resolution quadrature, Monte Carlo
//! moments, and the truncation-transparency guarantee.

use nalgebra::{dmatrix, DMatrix, DVector};
use rps_core::cocycle::LinearModel;
use rps_core::ihrie::{
    closed_form_additive, closed_form_multiplicative, required_path_grid, solve_fixed_point,
    weighted_sup_norm, ClosedFormMultiplicative, GridFunction, IhrieSolver, PullbackResult,
    SolverConfig,
};
use rps_core::models::{builtin_field_with, AdditiveNoise, PeriodicField};
use rps_core::paths::{sample_path, BrownianPath};
use rps_core::{Error, TimeGrid};
use std::f64::consts::{PI, TAU};
use std::sync::Arc;

fn scalar_model(a: f64, b: Vec<f64>) -> LinearModel {
    LinearModel::new(
        DMatrix::from_element(1, 1, a),
        b.into_iter().map(|x| DMatrix::from_element(1, 1, x)).collect(),
    )
    .unwrap()
}

fn path_for(cfg: &SolverConfig, tau: f64, channels: usize, seed: u64) -> BrownianPath {
    let grid = required_path_grid(cfg, tau, 0, 1).unwrap();
    sample_path(grid, channels, seed)
}

fn zero_path_for(cfg: &SolverConfig, tau: f64, channels: usize) -> BrownianPath {
    let grid = required_path_grid(cfg, tau, 0, 1).unwrap();
    BrownianPath::zero(grid, channels)
}

/// Nearest grid time (dt is snapped to tau, so round literals onto the grid).
fn snap_time(g: &TimeGrid, t: f64) -> f64 {
    g.time(((t - g.t_start) / g.dt).round() as usize)
}

fn snap_span(g: &TimeGrid, h: f64) -> f64 {
    (h / g.dt).round() * g.dt
}

#[test]
fn weighted_norm_examples() {
    let grid = TimeGrid::new(-4.0, 0.5, 16).unwrap();
    let zero = GridFunction::zeros(grid, 2);
    assert_eq!(weighted_sup_norm(&zero, 0.2), 0.0);
    // Constant function: the weight is maximal at t = 0.
    let mut c = GridFunction::zeros(grid, 1);
    for v in c.data.iter_mut() {
        *v = -3.0;
    }
    assert!((weighted_sup_norm(&c, 0.2) - 3.0).abs() < 1e-14);
    // Y(t) = e^{Lambda |t|}: the weighted value e^{-Lambda |t|} peaks at 0.
    let lambda = 0.25;
    let mut e = GridFunction::zeros(grid, 1);
    for i in 0..grid.n_points() {
        e.data[i] = (lambda * grid.time(i).abs()).exp();
    }
    assert!((weighted_sup_norm(&e, lambda) - 1.0).abs() < 1e-14);
}

#[test]
fn zero_field_solves_in_one_iteration() {
    let model = scalar_model(-1.0, vec![]);
    let field = builtin_field_with("zero", &[]).unwrap();
    let cfg = SolverConfig::new(1.0, 5.0, 0.01);
    let path = zero_path_for(&cfg, TAU, 1);
    let (y, report) = solve_fixed_point(&model, &field, None, &path, &cfg).unwrap();
    assert_eq!(report.iterations, 1);
    assert!(y.data.iter().all(|&v| v == 0.0));
    assert!(report.converged);
}

/// High-resolution quadrature oracle for `int_t^inf e^{2(t-s)} cos s ds`,
/// evaluated before the build: the analytic value is (2 cos t - sin t) / 5.
fn backward_cos_oracle(t: f64) -> f64 {
    // Romberg-style refinement of the truncated integral.
    let h0 = 1e-4f64;
    let horizon = 25.0f64;
    let n = (horizon / h0) as usize;
    let mut sum = 0.5 * (0.0f64.exp() * t.cos() + (-2.0 * horizon).exp() * (t + horizon).cos());
    for j in 1..n {
        let u = j as f64 * h0;
        sum += (-2.0 * u).exp() * (t + u).cos();
    }
    sum * h0
}

#[test]
fn backward_quadrature_oracle_matches_analytic() {
    for &t in &[0.0, 0.7, -1.3, 2.0] {
        let oracle = backward_cos_oracle(t);
        let analytic = (2.0 * t.cos() - t.sin()) / 5.0;
        assert!(
            (oracle - analytic).abs() < 1e-8,
            "t={t}: oracle {oracle} vs analytic {analytic}"
        );
    }
}

#[test]
fn hyperbolic_deterministic_solve_matches_analytic() {
    // A = diag(-1, 2), F = (cos t, cos t), no noise: the solution is
    // ((cos t + sin t)/2, -(2 cos t - sin t)/5) up to quadrature error.
    let model = LinearModel::new(dmatrix![-1.0, 0.0; 0.0, 2.0], vec![]).unwrap();
    let field = builtin_field_with("cosine_forcing", &[("c", 1.0), ("dim", 2.0)]).unwrap();
    let mut cfg = SolverConfig::new(PI, 16.0, 0.005);
    cfg.tol = 1e-12;
    let path = zero_path_for(&cfg, TAU, 1);
    let (y, report) = solve_fixed_point(&model, &field, None, &path, &cfg).unwrap();
    assert!(report.iterations <= 2, "state-independent F converges immediately");
    let mut sup = 0.0f64;
    for i in 0..y.grid.n_points() {
        let t = y.grid.time(i);
        let want0 = 0.5 * (t.cos() + t.sin());
        let want1 = -(2.0 * t.cos() - t.sin()) / 5.0;
        sup = sup.max((y.component(i, 0) - want0).abs().max((y.component(i, 1) - want1).abs()));
    }
    // Trapezoid at dt = 5e-3 plus the e^{-H} tails.
    assert!(sup < 2e-5, "sup error {sup}");
}

#[test]
fn additive_benchmark_solution_equals_closed_form_per_path() {
    // dX = -X dt + c cos t dt + 10 sin t dW on a modest grid.
    let model = scalar_model(-1.0, vec![]);
    let field = builtin_field_with("cosine_forcing", &[("c", 1.0)]).unwrap();
    let beta = AdditiveNoise::sine(10.0);
    let mut cfg = SolverConfig::new(PI, 10.0, 0.01);
    cfg.tol = 1e-12;
    for seed in [1u64, 7, 42] {
        let path = path_for(&cfg, TAU, 1, seed);
        let (y, report) = solve_fixed_point(&model, &field, Some(&beta), &path, &cfg).unwrap();
        assert!(report.iterations <= 2);
        let mut sup_diff = 0.0f64;
        let mut sup_ref = 0.0f64;
        for i in 0..y.grid.n_points() {
            let t = y.grid.time(i);
            let cf = closed_form_additive(&path, 1.0, t, report.h).unwrap();
            sup_diff = sup_diff.max((y.component(i, 0) - cf).abs());
            sup_ref = sup_ref.max(cf.abs());
        }
        assert!(
            sup_diff <= 1e-10 * sup_ref.max(1.0),
            "seed {seed}: sup diff {sup_diff} vs scale {sup_ref}"
        );
    }
}

#[test]
fn additive_closed_form_examples() {
    let mut cfg = SolverConfig::new(PI, 10.0, 0.01);
    cfg.tol = 1e-12;
    let zero = zero_path_for(&cfg, TAU, 1);
    let h = snap_span(&zero.grid, 10.0);
    // Deterministic part at t = 0 approaches 1/2 at quadrature accuracy.
    let v = closed_form_additive(&zero, 1.0, 0.0, h).unwrap();
    assert!((v - 0.5).abs() < 1e-3, "value {v}");
    // Linearity in c: output(2) - output(0) is twice output(1) - output(0), exactly.
    let p = path_for(&cfg, TAU, 1, 5);
    let t = snap_time(&p.grid, 1.0);
    let y0 = closed_form_additive(&p, 0.0, t, h).unwrap();
    let y1 = closed_form_additive(&p, 1.0, t, h).unwrap();
    let y2 = closed_form_additive(&p, 2.0, t, h).unwrap();
    // Affine in c, up to the last rounding of the scaled quadrature terms.
    let affine_gap = ((y2 - y0) - 2.0 * (y1 - y0)).abs();
    assert!(affine_gap <= 1e-14 * (1.0 + y1.abs()), "gap {affine_gap}");
    // And the c-difference approaches cos t + sin t at quadrature accuracy.
    assert!(((y2 - y0) - (t.cos() + t.sin())).abs() < 1e-3);
}

#[test]
fn additive_stochastic_variance_matches_ito_isometry() {
    // Var Y(t) = 100 int_0^H e^{-2u} sin^2(t - u) du (discrete isometry on the
    // same grid), checked over an ensemble.
    let mut cfg = SolverConfig::new(1.0, 8.0, 0.01);
    cfg.tol = 1e-10;
    let n = 4000;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let grid = required_path_grid(&cfg, TAU, 0, 0).unwrap();
    let t = snap_time(&grid, 0.5);
    let h = snap_span(&grid, 8.0);
    // Discrete oracle over the same grid and increments.
    let mut var_oracle = 0.0;
    {
        let path = BrownianPath::zero(grid, 1);
        let it = path.grid.index_of(t).unwrap();
        let m = path.grid.steps_in(h).unwrap() as usize;
        for j in (it - m)..it {
            let lag = (it - j) as f64 * path.grid.dt;
            let s = path.grid.time(j);
            let w = (-lag).exp() * 10.0 * s.sin();
            var_oracle += w * w * path.grid.dt;
        }
    }
    for seed in 0..n {
        let path = sample_path(grid, 1, seed);
        let v = closed_form_additive(&path, 0.0, t, h).unwrap();
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / n as f64;
    let var = sumsq / n as f64 - mean * mean;
    let se_var = var * (2.0 / (n as f64 - 1.0)).sqrt();
    assert!(mean.abs() < 3.0 * (var / n as f64).sqrt(), "mean {mean}");
    assert!((var - var_oracle).abs() < 3.0 * se_var, "var {var} vs oracle {var_oracle}");
}

#[test]
fn multiplicative_benchmark_equals_closed_form_to_1e12() {
    // dX = -X dt + cos t dt + 10 X o dW: the converged solve reproduces the
    // closed form with identical quadrature.
    let model = scalar_model(-1.0, vec![10.0]);
    let field = builtin_field_with("cosine_forcing", &[("c", 1.0)]).unwrap();
    let mut cfg = SolverConfig::new(1.0, 8.0, 0.01);
    cfg.tol = 1e-10;
    for seed in [3u64, 11] {
        let path = path_for(&cfg, TAU, 1, seed);
        let (y, report) = solve_fixed_point(&model, &field, None, &path, &cfg).unwrap();
        assert!(report.iterations <= 2, "iterations {}", report.iterations);
        let cf = ClosedFormMultiplicative::new(&path);
        let mut sup_diff = 0.0f64;
        let mut sup_ref = 0.0f64;
        for i in 0..y.grid.n_points() {
            let t = y.grid.time(i);
            let v = cf.eval(t, report.h).unwrap();
            sup_diff = sup_diff.max((y.component(i, 0) - v).abs());
            sup_ref = sup_ref.max(v.abs());
        }
        assert!(
            sup_diff <= 1e-12 * sup_ref.max(1e-300),
            "seed {seed}: sup diff {sup_diff} vs scale {sup_ref}"
        );
    }
}

#[test]
fn multiplicative_closed_form_deterministic_reduction() {
    // Zero-noise path at t=0: reduces to int_0^H e^{-u} cos(t - u) du -> 1/2.
    let cfg = SolverConfig::new(1.0, 12.0, 0.005);
    let zero = zero_path_for(&cfg, TAU, 1);
    let h = snap_span(&zero.grid, 12.0);
    let v = closed_form_multiplicative(&zero, 0.0, h).unwrap();
    assert!((v - 0.5).abs() < 1e-4, "value {v}");
}

#[test]
fn multiplicative_closed_form_one_step_recursion() {
    // Y(t + dt) = e^{-dt + 10 dW} Y(t) + O(dt) quadrature correction.
    let cfg = SolverConfig::new(1.0, 8.0, 0.01);
    let path = path_for(&cfg, TAU, 1, 9);
    let cf = ClosedFormMultiplicative::new(&path);
    let t = snap_time(&path.grid, 0.25);
    let h = snap_span(&path.grid, 8.0);
    let dt = path.grid.dt;
    let y_t = cf.eval(t, h).unwrap();
    let y_next = cf.eval(t + dt, h).unwrap();
    let dw = path.increment(t, t + dt).unwrap()[0];
    let propagated = (-dt + 10.0 * dw).exp() * y_t;
    // The local correction is the new trapezoid slice ~ dt * cos(t).
    let resid = (y_next - propagated).abs();
    let scale = y_t.abs().max(1.0);
    assert!(resid <= 5.0 * dt * scale, "residual {resid} vs dt-scale {}", dt * scale);
}

#[test]
fn stochastic_term_has_zero_ensemble_mean() {
    let model = scalar_model(-1.0, vec![]);
    let field = builtin_field_with("zero", &[]).unwrap();
    let beta = AdditiveNoise::sine(10.0);
    let mut cfg = SolverConfig::new(0.5, 6.0, 0.02);
    cfg.tol = 1e-10;
    let n = 2000;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for seed in 0..n {
        let path = path_for(&cfg, TAU, 1, seed);
        let (y, _) = solve_fixed_point(&model, &field, Some(&beta), &path, &cfg).unwrap();
        let v = y.at_time(0.0).unwrap()[0];
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / n as f64;
    let sd = (sumsq / n as f64 - mean * mean).sqrt();
    assert!(mean.abs() <= 3.0 * sd / (n as f64).sqrt(), "mean {mean}, sd {sd}");
}

#[test]
fn truncation_transparency_and_forced_truncation() {
    // With the auto-selected N, forcing a huge N changes nothing; forcing a
    // too-small N engages the truncation and changes the output.
    let model = scalar_model(-1.0, vec![0.8]);
    let field = builtin_field_with("cosine_forcing", &[("c", 1.0)]).unwrap();
    let mut cfg = SolverConfig::new(1.0, 6.0, 0.02);
    cfg.tol = 1e-11;
    let path = path_for(&cfg, TAU, 1, 21);
    let (y_auto, report) = solve_fixed_point(&model, &field, None, &path, &cfg).unwrap();
    let mut cfg_big = cfg.clone();
    cfg_big.truncation = Some(report.n_level as usize * 50);
    let (y_big, _) = solve_fixed_point(&model, &field, None, &path, &cfg_big).unwrap();
    assert_eq!(y_auto.data, y_big.data, "truncation must be inactive at the auto level");
    let mut cfg_small = cfg.clone();
    cfg_small.truncation = Some(1);
    let solver = IhrieSolver::new(&model, &field, None, &path, &cfg_small).unwrap();
    let y0 = GridFunction::zeros(solver.grid, 1);
    let m_small = solver.apply_m(&y0);
    let solver_auto = IhrieSolver::new(&model, &field, None, &path, &cfg).unwrap();
    let m_auto = solver_auto.apply_m(&y0);
    // The N = 1 envelope binds somewhere on this noisy path.
    let diff: f64 = m_small
        .data
        .iter()
        .zip(m_auto.data.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff > 0.0, "expected the N=1 truncation to bind somewhere");
}

#[test]
fn truncated_slow_path_matches_fast_path_when_inactive() {
    // Forcing N exactly at the auto level routes through the per-pair
    // truncated quadrature; with min{...} = 1 everywhere both paths agree.
    let model = scalar_model(-1.0, vec![0.5]);
    let field = builtin_field_with("cosine_forcing", &[("c", 1.0)]).unwrap();
    let mut cfg = SolverConfig::new(0.5, 4.0, 0.05);
    cfg.tol = 1e-10;
    let path = path_for(&cfg, TAU, 1, 2);
    let auto = IhrieSolver::new(&model, &field, None, &path, &cfg).unwrap();
    let y0 = GridFunction::zeros(auto.grid, 1);
    let fast = auto.apply_m(&y0);
    let mut cfg_forced = cfg.clone();
    cfg_forced.truncation = Some(auto.n_level.ceil() as usize + 1);
    let forced = IhrieSolver::new(&model, &field, None, &path, &cfg_forced).unwrap();
    let slow = forced.apply_m_truncated_for_tests(&y0);
    let mut worst = 0.0f64;
    for (a, b) in fast.data.iter().zip(slow.data.iter()) {
        worst = worst.max((a - b).abs());
    }
    let scale = fast.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst <= 1e-12 * scale.max(1.0), "fast vs slow gap {worst}");
}

#[test]
fn apply_m_ignores_state_for_state_independent_drift() {
    // With F independent of x the map is constant: M(Y) is the same for the
    // zero iterate and for an arbitrary one (through the public entry point).
    let model = scalar_model(-1.0, vec![]);
    let field = builtin_field_with("cosine_forcing", &[("c", 1.0)]).unwrap();
    let mut cfg = SolverConfig::new(0.5, 4.0, 0.05);
    cfg.tol = 1e-10;
    let path = zero_path_for(&cfg, TAU, 1);
    let solver = IhrieSolver::new(&model, &field, None, &path, &cfg).unwrap();
    let zero = GridFunction::zeros(solver.grid, 1);
    let mut wild = GridFunction::zeros(solver.grid, 1);
    for (i, v) in wild.data.iter_mut().enumerate() {
        *v = (i as f64 * 0.7).sin() * 5.0;
    }
    let a = rps_core::ihrie::apply_m(&zero, &model, &field, &path, &cfg, None).unwrap();
    let b = rps_core::ihrie::apply_m(&wild, &model, &field, &path, &cfg, None).unwrap();
    assert_eq!(a.data, b.data);
    // Mismatched grids are rejected.
    let small = GridFunction::zeros(TimeGrid::new(0.0, 0.05, 4).unwrap(), 1);
    assert!(matches!(
        rps_core::ihrie::apply_m(&small, &model, &field, &path, &cfg, None),
        Err(Error::DimensionMismatch(_))
    ));
}

#[test]
fn horizon_convergence_is_exponential() {
    let model = scalar_model(-1.0, vec![]);
    let field = builtin_field_with("cosine_forcing", &[("c", 1.0)]).unwrap();
    let beta = AdditiveNoise::sine(10.0);
    let mut sups = Vec::new();
    let mut reference: Option<GridFunction> = None;
    let mut cfg_wide = SolverConfig::new(1.0, 16.0, 0.01);
    cfg_wide.tol = 1e-12;
    let path = path_for(&cfg_wide, TAU, 1, 33);
    for &h in &[4.0f64, 8.0, 16.0] {
        let mut cfg = SolverConfig::new(1.0, h, 0.01);
        cfg.tol = 1e-12;
        let (y, _) = solve_fixed_point(&model, &field, Some(&beta), &path, &cfg).unwrap();
        if let Some(r) = &reference {
            let mut sup = 0.0f64;
            for i in 0..y.grid.n_points() {
                sup = sup.max((y.component(i, 0) - r.component(i, 0)).abs());
            }
            sups.push(sup);
        }
        reference = Some(y);
    }
    // Doubling H shrinks the change by roughly e^{-mu H_old} (mu = 1 here);
    // demand at least a factor 10 per doubling.
    assert!(sups[0] > 0.0 && sups[1] < sups[0] / 10.0, "sups {sups:?}");
}

#[test]
fn grid_convergence_deterministic_second_order() {
    let model = LinearModel::new(dmatrix![-1.0, 0.0; 0.0, 2.0], vec![]).unwrap();
    let field = builtin_field_with("cosine_forcing", &[("c", 1.0), ("dim", 2.0)]).unwrap();
    let mut errs = Vec::new();
    for &dt in &[0.04f64, 0.02, 0.01] {
        let mut cfg = SolverConfig::new(1.0, 14.0, dt);
        cfg.tol = 1e-13;
        let path = zero_path_for(&cfg, TAU, 1);
        let (y, _) = solve_fixed_point(&model, &field, None, &path, &cfg).unwrap();
        let mut sup = 0.0f64;
        for i in 0..y.grid.n_points() {
            let t = y.grid.time(i);
            let want0 = 0.5 * (t.cos() + t.sin());
            let want1 = -(2.0 * t.cos() - t.sin()) / 5.0;
            sup = sup.max((y.component(i, 0) - want0).abs().max((y.component(i, 1) - want1).abs()));
        }
        errs.push(sup);
    }
    assert!(errs[0] / errs[1] > 3.0, "trapezoid halving should quarter: {errs:?}");
    assert!(errs[1] / errs[2] > 3.0, "{errs:?}");
}

#[test]
fn fixed_point_residual_bound_on_core() {
    // Genuinely nonlinear contraction: F = 0.3 sin(x) + cos(t).
    let model = scalar_model(-1.0, vec![0.3]);
    let field = builtin_field_with("sine_in_state", &[("kappa", 0.3)]).unwrap();
    let mut cfg = SolverConfig::new(1.0, 8.0, 0.02);
    cfg.tol = 1e-10;
    let path = path_for(&cfg, TAU, 1, 17);
    let solver = IhrieSolver::new(&model, &field, None, &path, &cfg).unwrap();
    let (y_core, report) = solver.solve().unwrap();
    assert!(report.iterations > 2, "nonlinear problem should iterate");
    // Residual on the core window: ||M(Y) - Y||_Lambda <= tol (1 + alpha)/alpha.
    let (y_full, _) = solver.solve_full().unwrap();
    let m_y = solver.apply_m_additive(&y_full);
    let (lo, hi) = solver.core_window();
    let mut delta = m_y.restrict(lo, hi);
    for (dv, yv) in delta.data.iter_mut().zip(y_core.data.iter()) {
        *dv -= yv;
    }
    let res = weighted_sup_norm(&delta, solver.lambda);
    let bound = cfg.tol * (1.0 + solver.alpha) / solver.alpha;
    assert!(res <= bound, "residual {res} vs bound {bound}");
    // Residual history is non-increasing after burn-in for the default rule.
    for w in report.residuals.windows(2).skip(1) {
        assert!(w[1] <= w[0] * 1.001, "history {:?}", report.residuals);
    }
}

#[test]
fn nonconvergence_is_reported_honestly() {
    // lip_bound >> gap: the damped iteration cannot reach tol in few steps.
    let model = scalar_model(-1.0, vec![]);
    let field = builtin_field_with("sine_in_state", &[("kappa", 40.0), ("omega", 1.0)]).unwrap();
    let mut cfg = SolverConfig::new(0.5, 6.0, 0.02);
    cfg.tol = 1e-12;
    cfg.max_iter = 12;
    let path = zero_path_for(&cfg, TAU, 1);
    match solve_fixed_point(&model, &field, None, &path, &cfg) {
        Err(Error::MaxIterExceeded { iterations, last_residual, report, .. }) => {
            assert_eq!(iterations, 12);
            assert_eq!(report.residuals.len(), 12);
            assert!(last_residual > cfg.tol);
            assert!(report.residuals.iter().all(|r| r.is_finite()));
            assert!(!report.converged);
        }
        other => panic!("expected MaxIterExceeded, got {other:?}"),
    }
}

#[test]
fn pullback_agrees_with_solve_on_additive_benchmark() {
    let model = scalar_model(-1.0, vec![]);
    let field = builtin_field_with("cosine_forcing", &[("c", 1.0)]).unwrap();
    let beta = AdditiveNoise::sine(10.0);
    let mut cfg = SolverConfig::new(1.0, 10.0, 0.005);
    cfg.tol = 1e-12;
    // Pull-back needs path data for [t - K tau, t]; extend left by K periods.
    let k = 4usize;
    let grid = required_path_grid(&cfg, TAU, k, 1).unwrap();
    let path = sample_path(grid, 1, 77);
    let (y, _) = solve_fixed_point(&model, &field, Some(&beta), &path, &cfg).unwrap();
    let t = snap_time(&path.grid, 0.5);
    let pb: PullbackResult =
        rps_core::ihrie::pullback_solve(&model, &field, Some(&beta), &path, t, k, &cfg).unwrap();
    let y_t = y.at_time(t).unwrap()[0];
    let dt = path.grid.dt;
    let tol = 5.0 * (dt + (-(k as f64) * TAU).exp()) * y_t.abs().max(1.0) + 5.0 * dt;
    assert!(
        (pb.state[0] - y_t).abs() <= tol,
        "pullback {} vs solve {y_t} (tol {tol}, diag {})",
        pb.state[0],
        pb.diagnostic
    );
    assert!(pb.diagnostic < 1e-2, "successive pull-backs converged: {}", pb.diagnostic);
}

#[test]
fn pullback_trivial_zero_attractor() {
    // Linear stable scalar with F = beta = 0: pull-back lands at zero.
    let model = scalar_model(-1.0, vec![]);
    let field = builtin_field_with("zero", &[]).unwrap();
    let cfg = SolverConfig::new(1.0, 4.0, 0.01);
    let grid = required_path_grid(&cfg, TAU, 3, 1).unwrap();
    let path = sample_path(grid, 1, 5);
    let t = snap_time(&path.grid, 0.25);
    let pb = rps_core::ihrie::pullback_solve(&model, &field, None, &path, t, 3, &cfg).unwrap();
    assert_eq!(pb.state[0], 0.0);
    assert_eq!(pb.diagnostic, 0.0);
}

#[test]
fn solver_rejects_mixed_spectrum_noncommutative() {
    let model = LinearModel::new(
        dmatrix![1.0, 2.0; 0.0, -1.0],
        vec![dmatrix![1.0, 0.0; 0.0, 0.0]],
    )
    .unwrap();
    let field = builtin_field_with("cosine_forcing", &[("c", 1.0), ("dim", 2.0)]).unwrap();
    let cfg = SolverConfig::new(1.0, 4.0, 0.01);
    let path = zero_path_for(&cfg, TAU, 1);
    assert!(matches!(
        solve_fixed_point(&model, &field, None, &path, &cfg),
        Err(Error::NonCommutativeMixedSpectrum)
    ));
}

#[test]
fn short_horizon_is_reported_as_warning() {
    let model = scalar_model(-1.0, vec![]);
    let field = builtin_field_with("cosine_forcing", &[("c", 1.0)]).unwrap();
    let mut cfg = SolverConfig::new(1.0, 2.0, 0.01);
    cfg.tol = 1e-10;
    let path = zero_path_for(&cfg, TAU, 1);
    let (_, report) = solve_fixed_point(&model, &field, None, &path, &cfg).unwrap();
    assert!(
        report.warnings.iter().any(|w| w.contains("below the heuristic floor")),
        "warnings: {:?}",
        report.warnings
    );
}

#[test]
fn pullback_rejects_mixed_spectrum() {
    let model = LinearModel::new(dmatrix![-1.0, 0.0; 0.0, 2.0], vec![]).unwrap();
    let field = builtin_field_with("cosine_forcing", &[("c", 1.0), ("dim", 2.0)]).unwrap();
    let cfg = SolverConfig::new(1.0, 5.0, 0.01);
    let path = zero_path_for(&cfg, TAU, 1);
    assert!(matches!(
        rps_core::ihrie::pullback_solve(&model, &field, None, &path, 0.0, 2, &cfg),
        Err(Error::NotDissipative)
    ));
}

#[test]
fn anderson_acceleration_converges_to_same_fixed_point() {
    let model = scalar_model(-1.0, vec![]);
    let field = builtin_field_with("sine_in_state", &[("kappa", 0.45)]).unwrap();
    let mut cfg = SolverConfig::new(1.0, 8.0, 0.02);
    cfg.tol = 1e-11;
    let path = path_for(&cfg, TAU, 1, 8);
    let (y_plain, rep_plain) = solve_fixed_point(&model, &field, None, &path, &cfg).unwrap();
    let mut cfg_aa = cfg.clone();
    cfg_aa.anderson_depth = 3;
    let (y_aa, rep_aa) = solve_fixed_point(&model, &field, None, &path, &cfg_aa).unwrap();
    let mut worst = 0.0f64;
    for (a, b) in y_plain.data.iter().zip(y_aa.data.iter()) {
        worst = worst.max((a - b).abs());
    }
    assert!(worst < 50.0 * cfg.tol, "fixed points differ by {worst}");
    assert!(
        rep_aa.iterations <= rep_plain.iterations,
        "anderson {} vs plain {}",
        rep_aa.iterations,
        rep_plain.iterations
    );
}

#[test]
fn one_sided_negative_spectrum_solves_forward_only() {
    // Rotation with negative symmetric part: P^- = I, backward integral absent.
    let model = LinearModel::new(dmatrix![-1.0, -1.0; 1.0, -1.0], vec![]).unwrap();
    let dim = 2;
    let field = PeriodicField::new(
        TAU,
        dim,
        "cos-forcing-2d",
        Arc::new(move |t: f64, _x: &DVector<f64>| DVector::from_element(2, t.cos())),
        None,
        Some(0.0),
        Some(2.0f64.sqrt()),
    );
    let mut cfg = SolverConfig::new(1.0, 10.0, 0.01);
    cfg.tol = 1e-12;
    let path = zero_path_for(&cfg, TAU, 1);
    let (y, _) = solve_fixed_point(&model, &field, None, &path, &cfg).unwrap();
    // Oracle: steady periodic response of the linear rotation system, computed
    // from the real 2x2 resonance solve (A - i I) Y = -(1, 1)/... via the
    // particular solution of dx = Ax + (cos t, cos t).
    // x(t) = Re[(i I - A)^{-1} (1, 1) e^{it}].
    let a = dmatrix![-1.0, -1.0; 1.0, -1.0];
    let ident = DMatrix::<f64>::identity(2, 2);
    // Solve the 4x4 real system for u, v with x = u cos t + v sin t:
    // -u sin + v cos = A(u cos + v sin) + (1,1) cos  =>
    //   v - A u = (1,1),  -u - A v = 0  => u = -A v, v + A^2 v = ...
    let rhs = DVector::from_vec(vec![1.0, 1.0]);
    let m2 = &ident + &a * &a;
    let v = m2.clone().lu().solve(&rhs).unwrap();
    let u = -&a * &v;
    let mut sup = 0.0f64;
    for i in 0..y.grid.n_points() {
        let t = y.grid.time(i);
        let want = &u * t.cos() + &v * t.sin();
        sup = sup.max((y.value(i) - want).norm());
    }
    assert!(sup < 1e-4, "sup error {sup}");
}
