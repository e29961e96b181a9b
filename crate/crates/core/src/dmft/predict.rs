//! Train and test error curves from a solved state.

use std::f64::consts::PI;

use super::r_pass::{add, check_path, draw_field, effective_field_path, factor_field, mean_se};
use super::state::{DMFTState, SolverParams};
use crate::error::{Error, Result};
use crate::models::{evaluate_metric, Metric, ModelSpec};
use crate::parallel::{chunk_ranges, map_indexed, tree_reduce};
use crate::rng::StreamFactory;
use crate::simulator::{ErrorCurve, Producer};

/// Population error at knot `i`, from the joint Gaussian law of
/// `(g, g*) = (xᵀθ, xᵀθ*)` with covariance `[[C(t,t), C(t,*)], [C(t,*), ρ²]]`.
pub fn test_error(state: &DMFTState, model: &ModelSpec, metric: Metric, i: usize) -> Result<f64> {
    let ctt = state.c_theta.get(i, i);
    let cts = state.overlap(i);
    if ctt < 0.0 || !ctt.is_finite() {
        return Err(Error::DegenerateState(format!(
            "C_theta({t}, {t}) = {ctt}",
            t = state.grid.time(i)
        )));
    }
    match metric {
        Metric::Squared => Ok(ctt - 2.0 * cts + state.rho2 + model.sigma2),
        Metric::ZeroOne => {
            if ctt == 0.0 {
                // g = 0 almost surely: the tie scores one half.
                return Ok(0.5);
            }
            let kappa = (cts / (ctt * (state.rho2 + model.sigma2)).sqrt()).clamp(-1.0, 1.0);
            Ok(kappa.acos() / PI)
        }
    }
}

/// Delta-method standard error of [`test_error`] from the Monte-Carlo
/// covariance of `(C(t,t), C(t,*))`; zero when none is recorded.
pub fn test_error_se(state: &DMFTState, model: &ModelSpec, metric: Metric, i: usize) -> f64 {
    let Some(&[vaa, vac, vcc]) = state.moment_cov.get(i) else {
        return 0.0;
    };
    let (ga, gc) = match metric {
        Metric::Squared => (1.0, -2.0),
        Metric::ZeroOne => {
            let a = state.c_theta.get(i, i);
            if !(a > 0.0) {
                return 0.0;
            }
            let sa = (a * (state.rho2 + model.sigma2)).sqrt();
            let kappa = (state.overlap(i) / sa).clamp(-1.0, 1.0);
            let dk = -1.0 / (PI * (1.0 - kappa * kappa).sqrt().max(1e-12));
            (dk * -kappa / (2.0 * a), dk / sa)
        }
    };
    (ga * ga * vaa + 2.0 * ga * gc * vac + gc * gc * vcc)
        .max(0.0)
        .sqrt()
}

/// Train error is the Monte-Carlo mean of the metric along fresh effective
/// fields; test error is evaluated from the kernels. Both `*_std` columns
/// hold Monte-Carlo standard errors.
pub fn predict_errors(
    state: &DMFTState,
    model: &ModelSpec,
    metric: Metric,
    params: &SolverParams,
    streams: &StreamFactory,
) -> Result<ErrorCurve> {
    params.validate()?;
    let grid = state.grid;
    let k = grid.count;
    let factor = factor_field(state)?;
    let chunks = chunk_ranges(params.samples);
    let parts = map_indexed(chunks.len(), |c| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut s1 = vec![0.0; k];
        let mut s2 = vec![0.0; k];
        for index in chunks[c].clone() {
            let (w, wstar, z, db) =
                draw_field(&factor, &grid, model.sigma2, state.tau, streams, index);
            let path = effective_field_path(
                model,
                &state.r_theta,
                state.delta,
                state.tau,
                &w,
                wstar,
                z,
                &db,
            );
            check_path(&path, &grid, index)?;
            for i in 0..k {
                let v = evaluate_metric(metric, path.r[i], wstar, z);
                s1[i] += v;
                s2[i] += v * v;
            }
        }
        Ok((s1, s2))
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let (s1, s2) = tree_reduce(parts, |mut a, b| {
        add(&mut a.0, &b.0);
        add(&mut a.1, &b.1);
        a
    })
    .expect("at least one sample");
    let (train_mean, train_std): (Vec<f64>, Vec<f64>) = (0..k)
        .map(|i| mean_se(s1[i], s2[i], params.samples))
        .unzip();
    let test_mean = (0..k)
        .map(|i| test_error(state, model, metric, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorCurve {
        producer: Producer::DmftMc,
        times: grid.times(),
        train_mean,
        train_std,
        test_mean,
        test_std: (0..k)
            .map(|i| test_error_se(state, model, metric, i))
            .collect(),
    })
}
