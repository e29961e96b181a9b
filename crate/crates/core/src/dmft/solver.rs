//! Damped fixed-point iteration between the two passes.

use serde::{Deserialize, Serialize};

use super::r_pass::r_pass;
use super::state::{init_state, DMFTState, SolverParams};
use super::theta_pass::theta_pass;
use crate::error::Result;
use crate::grid_gp::TimeGrid;
use crate::models::ModelSpec;
use crate::rng::{domain, StreamFactory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Relative sup-norm change of `C_θ` and `R_θ` in this iteration.
    pub c_change: f64,
    pub r_change: f64,
    pub noise_floor: f64,
    /// Convergence threshold in force.
    pub threshold: f64,
    /// Symmetry and PSD of `C_θ` and `Σ_ℓ`.
    pub kernels_ok: bool,
    /// Strict lower-triangularity of `R_θ` and `R_ℓ`.
    pub causal_ok: bool,
    pub field_jitter: f64,
    pub noise_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub iterations: usize,
    pub records: Vec<IterationRecord>,
}

impl ConvergenceReport {
    pub fn invariants_held(&self) -> bool {
        self.records.iter().all(|r| r.kernels_ok && r.causal_ok)
    }
}

pub fn fixed_point_solve(
    grid: TimeGrid,
    model: &ModelSpec,
    delta: f64,
    tau: f64,
    params: &SolverParams,
) -> Result<(DMFTState, ConvergenceReport)> {
    let state = init_state(grid, model, delta, tau)?;
    fixed_point_solve_from(state, model, params)
}

/// Iterates from `state`:
/// `(Σ_ℓ, R_ℓ, Γ) ← r_pass(C_θ, R_θ)`, `(C̃_θ, R̃_θ) ← theta_pass(...)`,
/// `(C_θ, R_θ) ← (1 − α)(C_θ, R_θ) + α(C̃_θ, R̃_θ)`.
///
/// With common random numbers every iteration reuses the same streams, so
/// the map is deterministic and the plain tolerance applies. With
/// resampling the residual cannot fall below the Monte-Carlo noise, and the
/// threshold becomes `max(tol, 3 · noise floor)`.
pub fn fixed_point_solve_from(
    mut state: DMFTState,
    model: &ModelSpec,
    params: &SolverParams,
) -> Result<(DMFTState, ConvergenceReport)> {
    params.validate()?;
    let mut base = StreamFactory::new(params.seed);
    if let Some(seed) = params.noise_seed {
        base = base.with_noise_seed(seed);
    }
    let k = state.grid.count;
    let alpha = params.damping;
    let mut records = Vec::new();
    let mut converged = false;
    for iteration in 0..params.max_iters {
        let streams = if params.resample_each_iter {
            base.child(iteration as u64 + 1)
        } else {
            base
        };
        let rp = r_pass(&state, model, params, &streams.child(domain::R_PASS))?;
        state.sigma_ell = rp.sigma_ell;
        state.r_ell = rp.r_ell;
        state.gamma_ell = rp.gamma_ell;
        let tp = theta_pass(&state, model, params, &streams.child(domain::THETA_PASS))?;

        let mut c = state.c_theta.clone();
        c.values.blend(&tp.c_theta.values, alpha);
        c.values[(k, k)] = state.rho2;
        c.values[(0, 0)] = model.theta0.second_moment();
        let mut r = state.r_theta.clone();
        r.values.blend(&tp.r_theta.values, alpha);

        let c_change = c.values.relative_change(&state.c_theta.values, 1e-300);
        let r_change = r.values.relative_change(&state.r_theta.values, 1e-300);
        state.c_theta = c;
        state.r_theta = r;
        state.moment_cov = tp.moment_cov;

        let kernels_ok = state.c_theta.is_symmetric()
            && state.c_theta.is_psd()
            && state.sigma_ell.is_symmetric()
            && state.sigma_ell.is_psd();
        let causal_ok = state.r_theta.is_causal() && state.r_ell.is_causal();
        let threshold = if params.resample_each_iter {
            params.tol.max(3.0 * tp.noise_floor)
        } else {
            params.tol
        };
        records.push(IterationRecord {
            iteration,
            c_change,
            r_change,
            noise_floor: tp.noise_floor,
            threshold,
            kernels_ok,
            causal_ok,
            field_jitter: rp.jitter,
            noise_jitter: tp.jitter,
        });
        if c_change <= threshold && r_change <= threshold {
            converged = true;
            break;
        }
    }
    let iterations = records.len();
    Ok((
        state,
        ConvergenceReport {
            converged,
            iterations,
            records,
        },
    ))
}
