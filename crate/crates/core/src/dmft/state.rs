use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid_gp::{KernelMatrix, ResponseMatrix, TimeGrid};
use crate::models::ModelSpec;
use crate::rng::stream;

/// Order parameters of the effective processes on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DMFTState {
    pub grid: TimeGrid,
    /// `C_θ(t,t')` with the planted index last; `C_θ(*,*) = ρ²`.
    pub c_theta: KernelMatrix,
    pub r_theta: ResponseMatrix,
    /// Integrated loss kernel `E[L^t L^{t'}]`.
    pub sigma_ell: KernelMatrix,
    /// `R_ℓ(t,t')` with the planted column `R_ℓ(t,*)`.
    pub r_ell: ResponseMatrix,
    /// `Γ(t) = E[∂_r ℓ]`.
    pub gamma_ell: Vec<f64>,
    pub delta: f64,
    pub tau: f64,
    pub rho2: f64,
    /// Monte-Carlo covariance of `(C_θ(t,t), C_θ(t,*))` per knot from the
    /// latest θ-pass; empty before the first one.
    #[serde(default)]
    pub moment_cov: Vec<[f64; 3]>,
}

impl DMFTState {
    pub fn star(&self) -> usize {
        self.grid.count
    }

    /// `C_θ(i, *)`.
    pub fn overlap(&self, i: usize) -> f64 {
        self.c_theta.get(i, self.star())
    }

    /// Symmetry, PSD and causality of every kernel.
    pub fn check(&self) -> Result<()> {
        self.c_theta.check("C_theta")?;
        self.sigma_ell.check("Sigma_ell")?;
        self.r_theta.check("R_theta")?;
        self.r_ell.check("R_ell")
    }
}

/// Which estimator produces `R_ℓ(·,*)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StarEstimator {
    /// Direct derivative when the loss is smooth in `r*`, Stein otherwise.
    #[default]
    Auto,
    Direct,
    Stein,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub samples: usize,
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    #[serde(default)]
    pub resample_each_iter: bool,
    #[serde(default)]
    pub star_estimator: StarEstimator,
    /// Separate seed for the Brownian increments; `None` derives them from
    /// `seed`.
    #[serde(default)]
    pub noise_seed: Option<u64>,
}

impl SolverParams {
    pub fn new(samples: usize, damping: f64, tol: f64, max_iters: usize, seed: u64) -> Self {
        Self {
            samples,
            damping,
            tol,
            max_iters,
            seed,
            resample_each_iter: false,
            star_estimator: StarEstimator::Auto,
            noise_seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return invalid("samples must be >= 1");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return invalid(format!("damping must lie in (0, 1], got {}", self.damping));
        }
        if !(self.tol > 0.0) {
            return invalid(format!("tol must be > 0, got {}", self.tol));
        }
        if self.max_iters == 0 {
            return invalid("max_iters must be >= 1");
        }
        Ok(())
    }
}

/// Default starting point.
///
/// With `a(t) = t/(1+t)`, `C_θ` is the covariance of
/// `θ⁰ + a(t) θ* + ρ b(a(t))` for a standard Brownian bridge `b`, so
/// `C(t,t') = E[(θ⁰)²] + ρ² min(a, a')` and `C(t,*) = ρ² a(t)`; it is PSD by
/// construction. `R_θ(t,t') = e^{−(t−t')}` below the diagonal.
pub fn init_state(grid: TimeGrid, model: &ModelSpec, delta: f64, tau: f64) -> Result<DMFTState> {
    if !(delta > 0.0) || !(tau >= 0.0) {
        return invalid("init_state needs delta > 0 and tau >= 0");
    }
    let k = grid.count;
    let rho2 = model.rho2;
    let m0 = model.theta0.second_moment();
    let a: Vec<f64> = grid.times().iter().map(|t| t / (1.0 + t)).collect();
    let c_theta = KernelMatrix::from_fn(grid, true, |i, j| match (i == k, j == k) {
        (true, true) => rho2,
        (false, true) => rho2 * a[i],
        (true, false) => rho2 * a[j],
        (false, false) => m0 + rho2 * a[i].min(a[j]),
    });
    let r_theta = ResponseMatrix::from_fn(grid, |i, j| (-(grid.time(i) - grid.time(j))).exp());
    Ok(DMFTState {
        grid,
        c_theta,
        r_theta,
        sigma_ell: KernelMatrix::zeros(grid, false),
        r_ell: ResponseMatrix::zeros(grid, true),
        gamma_ell: vec![0.0; k],
        delta,
        tau,
        rho2,
        moment_cov: Vec::new(),
    })
}

/// Adds a seeded random PSD term `scale · ρ² V Vᵀ / m` to the time block of
/// `C_θ` at indices `≥ 1` (the pinned `t = 0` and `*` entries stay put) and
/// multiplies each `R_θ` entry by `1 + scale · u`, `u ~ U(−1, 1)`.
pub fn perturb_state(state: &mut DMFTState, seed: u64, scale: f64) {
    let k = state.grid.count;
    if k < 2 || scale == 0.0 {
        return;
    }
    let mut rng = stream(seed, 0);
    let m = 4;
    let v: Vec<f64> = (0..(k - 1) * m)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let amp = scale * state.rho2 / m as f64;
    for i in 1..k {
        for j in i..k {
            let s: f64 = (0..m)
                .map(|c| v[(i - 1) * m + c] * v[(j - 1) * m + c])
                .sum();
            state.c_theta.values[(i, j)] += amp * s;
            if i != j {
                state.c_theta.values[(j, i)] += amp * s;
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            let u: f64 = rng.random_range(-1.0..1.0);
            state.r_theta.values[(i, j)] *= 1.0 + scale * u;
        }
    }
}
