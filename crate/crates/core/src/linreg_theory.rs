//! Closed-form and semi-analytic error curves for linear regression.
//!
//! Spectral integrals run against the Marchenko–Pastur law of `(1/δ) XᵀX`,
//! whose continuous part `δ √((λ₊ − x)(x − λ₋)) / (2πx)` lives on
//! `[(1 − 1/√δ)², (1 + 1/√δ)²]`, with an atom of mass `1 − δ` at zero when
//! `δ < 1`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid_gp::TimeGrid;

pub const DEFAULT_NODES: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MPQuadrature {
    pub delta: f64,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub atom_weight: f64,
}

/// Quadrature for the Marchenko–Pastur law.
///
/// Under `x = c + h u` the edge factor becomes `h √(1 − u²)`, the weight of
/// Gauss–Chebyshev rules of the second kind. The remaining `1/x` is smooth
/// unless `δ = 1`, where the lower edge touches zero; there
/// `√(1 − u²) / (1 + u) = √((1 − u)/(1 + u))` and the fourth-kind rule
/// absorbs it exactly.
pub fn mp_rule(delta: f64, n_nodes: usize) -> Result<MPQuadrature> {
    if !(delta > 0.0) || !delta.is_finite() {
        return invalid(format!("delta must be positive, got {delta}"));
    }
    if n_nodes < 2 {
        return invalid("need at least two quadrature nodes");
    }
    let s = 1.0 / delta.sqrt();
    let lambda_minus = (1.0 - s).powi(2);
    let lambda_plus = (1.0 + s).powi(2);
    let c = 0.5 * (lambda_plus + lambda_minus);
    let h = 0.5 * (lambda_plus - lambda_minus);
    let n = n_nodes as f64;
    let mut nodes = Vec::with_capacity(n_nodes);
    let mut weights = Vec::with_capacity(n_nodes);
    if delta == 1.0 {
        // x = 2 (1 + u); density (1/π) √((1 − u)/(1 + u)) du.
        for k in 1..=n_nodes {
            let a = k as f64 * PI / (2.0 * n + 1.0);
            nodes.push(c + h * (2.0 * a).cos());
            weights.push(4.0 / (2.0 * n + 1.0) * a.sin().powi(2));
        }
    } else {
        let pref = delta * h * h / (2.0 * PI);
        for k in 1..=n_nodes {
            let a = k as f64 * PI / (n + 1.0);
            let x = c + h * a.cos();
            nodes.push(x);
            weights.push(pref * PI / (n + 1.0) * a.sin().powi(2) / x);
        }
    }
    Ok(MPQuadrature {
        delta,
        lambda_minus,
        lambda_plus,
        nodes,
        weights,
        atom_weight: if delta < 1.0 { 1.0 - delta } else { 0.0 },
    })
}

/// `Σ wₖ f(xₖ) + atom · f(0)`.
pub fn mp_integral(rule: &MPQuadrature, f: impl Fn(f64) -> f64) -> Result<f64> {
    let mut acc = 0.0;
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        let v = f(x);
        if !v.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "integrand is not finite at x = {x}"
            )));
        }
        acc += w * v;
    }
    if rule.atom_weight > 0.0 {
        let v = f(0.0);
        if !v.is_finite() {
            return Err(Error::NumericalFailure(
                "integrand is not finite at the atom".into(),
            ));
        }
        acc += rule.atom_weight * v;
    }
    Ok(acc)
}

/// `H_i(t) = ∫ x^i e^{−2(x + λ)t} dμ`.
pub fn kernel_h(rule: &MPQuadrature, i: u32, t: f64, lambda: f64) -> Result<f64> {
    if i > 2 {
        return invalid(format!("kernel index must be 0, 1 or 2, got {i}"));
    }
    if !(t >= 0.0) || !(lambda >= 0.0) {
        return invalid("kernel needs t >= 0 and lambda >= 0");
    }
    mp_integral(rule, |x| x.powi(i as i32) * (-2.0 * (x + lambda) * t).exp())
}

// Integrands of the noiseless curves, with their x -> 0 limits:
//   a(x) = (λ + x e^{−(x+λ)t})² / (x+λ)²   -> 1   (λ > 0: λ²/λ²; λ = 0: e^{−2xt})
//   x a(x)                                  -> 0
//   c(x) = x (1 − e^{−(x+λ)t})² / (x+λ)²    -> 0   (λ = 0: x t² e^{..} -> 0)
fn integrand_a(x: f64, t: f64, lambda: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    let s = x + lambda;
    ((lambda + x * (-s * t).exp()) / s).powi(2)
}

fn integrand_c(x: f64, t: f64, lambda: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let s = x + lambda;
    x * (-(-s * t).exp_m1() / s).powi(2)
}

/// Train and test error of gradient flow from zero initialization.
pub fn noiseless_errors(
    rule: &MPQuadrature,
    t: f64,
    lambda: f64,
    rho2: f64,
    sigma2: f64,
) -> Result<(f64, f64)> {
    if !(t >= 0.0) || !(lambda >= 0.0) {
        return invalid("noiseless curves need t >= 0 and lambda >= 0");
    }
    let delta = rule.delta;
    let ia = mp_integral(rule, |x| integrand_a(x, t, lambda))?;
    let ixa = mp_integral(rule, |x| x * integrand_a(x, t, lambda))?;
    let ic = mp_integral(rule, |x| integrand_c(x, t, lambda))?;
    let l0 = rho2 * ixa + sigma2 / delta * ia + (delta - 1.0) / delta * sigma2;
    let r0 = rho2 * ia + sigma2 / delta * ic + sigma2;
    Ok((l0.max(0.0), r0.max(0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolterraParams {
    pub tau: f64,
    pub delta: f64,
    pub lambda: f64,
    pub rho2: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolterraSolution {
    pub grid: TimeGrid,
    pub train: Vec<f64>,
    pub test: Vec<f64>,
    pub params: VolterraParams,
}

/// Solves `L = L₀ + τ (H₂ * L)`, `R = R₀ + τ (H₁ * L)` on the grid by
/// trapezoidal product integration.
pub fn solve_volterra(
    rule: &MPQuadrature,
    grid: &TimeGrid,
    tau: f64,
    lambda: f64,
    rho2: f64,
    sigma2: f64,
) -> Result<VolterraSolution> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return invalid(format!("tau must be >= 0, got {tau}"));
    }
    let k = grid.count;
    let g = grid.step;
    let mut l0 = Vec::with_capacity(k);
    let mut r0 = Vec::with_capacity(k);
    for i in 0..k {
        let (l, r) = noiseless_errors(rule, grid.time(i), lambda, rho2, sigma2)?;
        l0.push(l);
        r0.push(r);
    }
    let params = VolterraParams {
        tau,
        delta: rule.delta,
        lambda,
        rho2,
        sigma2,
    };
    if tau == 0.0 {
        return Ok(VolterraSolution {
            grid: *grid,
            train: l0,
            test: r0,
            params,
        });
    }

    let mut h1 = Vec::with_capacity(k);
    let mut h2 = Vec::with_capacity(k);
    for m in 0..k {
        h1.push(kernel_h(rule, 1, grid.time(m), lambda)?);
        h2.push(kernel_h(rule, 2, grid.time(m), lambda)?);
    }
    let denom = 1.0 - tau * g * 0.5 * h2[0];
    if !(denom > 0.0) {
        return Err(Error::InvalidStep {
            step: g,
            tau,
            suggested: 1.0 / (tau * h2[0]),
        });
    }

    let mut l = vec![0.0; k];
    l[0] = l0[0];
    for i in 1..k {
        let mut acc = 0.5 * h2[i] * l[0];
        for j in 1..i {
            acc += h2[i - j] * l[j];
        }
        l[i] = (l0[i] + tau * g * acc) / denom;
    }
    let mut r = vec![0.0; k];
    r[0] = r0[0];
    for i in 1..k {
        let mut acc = 0.5 * (h1[i] * l[0] + h1[0] * l[i]);
        for j in 1..i {
            acc += h1[i - j] * l[j];
        }
        r[i] = r0[i] + tau * g * acc;
    }
    Ok(VolterraSolution {
        grid: *grid,
        train: l,
        test: r,
        params,
    })
}

/// `(1 − e^{−a t}) / a`, continuous at `a = 0`.
fn relax(a: f64, t: f64) -> f64 {
    if a.abs() < 1e-300 {
        t
    } else {
        -(-a * t).exp_m1() / a
    }
}

/// Infinite-data limit: `(C(t,*), C(t,t), risk)`.
pub fn online_closed_form(t: f64, tau: f64, rho2: f64, sigma2: f64) -> (f64, f64, f64) {
    let a = 2.0 - tau;
    let c_star = -rho2 * (-t).exp_m1();
    let c_tt = rho2 * (1.0 - 2.0 * (-t).exp() + (-a * t).exp()) + tau * sigma2 * relax(a, t);
    let risk = c_tt - 2.0 * c_star + rho2 + sigma2;
    (c_star, c_tt, risk)
}
