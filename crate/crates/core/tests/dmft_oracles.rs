use dmft_lab::dmft::{fixed_point_solve, predict_errors, SolverParams};
use dmft_lab::grid_gp::make_grid;
use dmft_lab::linreg_theory::{mp_rule, noiseless_errors, DEFAULT_NODES};
use dmft_lab::models::{logistic_model, ridge_model, Metric};
use dmft_lab::rng::{domain, StreamFactory};

#[test]
fn ridge_noiseless_fixed_point_matches_closed_form() {
    let grid = make_grid(5.0, 0.05).unwrap();
    let model = ridge_model(0.0, 1.0, 0.01).unwrap();
    let params = SolverParams::new(8000, 0.8, 1e-3, 40, 5);
    let (state, report) = fixed_point_solve(grid, &model, 2.0, 0.0, &params).unwrap();
    assert!(report.converged);
    let curve = predict_errors(
        &state,
        &model,
        Metric::Squared,
        &params,
        &StreamFactory::new(5).child(domain::PREDICT),
    )
    .unwrap();
    let rule = mp_rule(2.0, DEFAULT_NODES).unwrap();
    for i in 0..grid.count {
        let t = grid.time(i);
        let (_, r0) = noiseless_errors(&rule, t, 0.0, 1.0, 0.01).unwrap();
        let excess = curve.test_mean[i] - 0.01;
        let band = f64::max(0.01, 3.0 * curve.test_std[i]);
        assert!(
            (excess - (r0 - 0.01)).abs() <= band,
            "t = {t}: {excess} vs {}",
            r0 - 0.01
        );
    }
}

#[test]
fn signal_overlap_grows_without_noise() {
    let grid = make_grid(4.0, 0.1).unwrap();
    let model = ridge_model(0.0, 1.0, 0.01).unwrap();
    let params = SolverParams::new(3000, 0.8, 1e-3, 40, 6);
    let (state, _) = fixed_point_solve(grid, &model, 2.0, 0.0, &params).unwrap();
    let se = state
        .moment_cov
        .iter()
        .map(|c| c[2].sqrt())
        .fold(0.0, f64::max);
    for i in 1..grid.count {
        assert!(
            state.overlap(i) >= state.overlap(i - 1) - 3.0 * se,
            "t = {}",
            grid.time(i)
        );
    }
    assert!(state.overlap(grid.count - 1) > 0.5);
}

#[test]
fn noiseless_solve_ignores_the_noise_seed() {
    let grid = make_grid(2.0, 0.1).unwrap();
    let model = logistic_model(0.01, 1.0, 0.01).unwrap();
    let mut a = SolverParams::new(500, 0.8, 1e-3, 6, 7);
    let mut b = a;
    a.noise_seed = Some(1);
    b.noise_seed = Some(2);
    let (sa, ra) = fixed_point_solve(grid, &model, 2.0, 0.0, &a).unwrap();
    let (sb, rb) = fixed_point_solve(grid, &model, 2.0, 0.0, &b).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(ra, rb);

    // With diffusion the same two seeds must differ.
    let (sc, _) = fixed_point_solve(grid, &model, 2.0, 0.3, &a).unwrap();
    let (sd, _) = fixed_point_solve(grid, &model, 2.0, 0.3, &b).unwrap();
    assert_ne!(sc.c_theta, sd.c_theta);
}

#[test]
fn invariants_hold_on_every_iteration() {
    let cases = [
        (ridge_model(0.0, 1.0, 0.01).unwrap(), 0.5, Metric::Squared),
        (
            logistic_model(0.01, 1.0, 0.01).unwrap(),
            0.2,
            Metric::ZeroOne,
        ),
    ];
    for (model, tau, metric) in cases {
        let grid = make_grid(3.0, 0.05).unwrap();
        let params = SolverParams::new(1500, 0.8, 1e-3, 12, 8);
        let (state, report) = fixed_point_solve(grid, &model, 2.0, tau, &params).unwrap();
        assert!(!report.records.is_empty());
        for r in &report.records {
            assert!(
                r.kernels_ok && r.causal_ok,
                "{} iteration {}",
                model.name,
                r.iteration
            );
        }
        assert!(report.invariants_held());
        assert_eq!(state.c_theta.get(grid.count, grid.count), model.rho2);
        assert!(state.r_theta.is_causal() && state.r_ell.is_causal());
        state.check().unwrap();
        let curve = predict_errors(
            &state,
            &model,
            metric,
            &params,
            &StreamFactory::new(8).child(domain::PREDICT),
        )
        .unwrap();
        assert!(curve.is_well_formed());
    }
}

#[test]
fn logistic_converges_in_about_ten_iterations() {
    let grid = make_grid(5.0, 0.05).unwrap();
    let model = logistic_model(0.01, 1.0, 0.01).unwrap();
    let params = SolverParams::new(8000, 0.8, 1e-3, 40, 9);
    let (_, report) = fixed_point_solve(grid, &model, 2.0, 0.1, &params).unwrap();
    assert!(report.converged);
    assert!(
        (5..=15).contains(&report.iterations),
        "{} iterations",
        report.iterations
    );
}
