//! Effective-parameter pass: sample `θ`, estimate `(C_θ, R_θ)`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::r_pass::{add, mean_se};
use super::state::{DMFTState, SolverParams};
use crate::error::{Error, Result};
use crate::grid_gp::{cholesky_matrix, KernelMatrix, ResponseMatrix, SquareMatrix};
use crate::models::ModelSpec;
use crate::parallel::{chunk_ranges, map_indexed, tree_reduce};
use crate::rng::StreamFactory;

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaPassOutput {
    pub c_theta: KernelMatrix,
    pub r_theta: ResponseMatrix,
    /// Largest Monte-Carlo standard error of a diagonal `C_θ` entry,
    /// relative to `max |C_θ|`.
    pub noise_floor: f64,
    /// Jitter used to factor `Σ_ℓ / δ`.
    pub jitter: f64,
    /// Per knot, the Monte-Carlo covariance `[Var a, Cov(a, c), Var c]` of the
    /// sample means `a = E_M[θ_t²]` and `c = E_M[θ_t θ*]`.
    pub moment_cov: Vec<[f64; 3]>,
}

/// `θ_i = θ⁰ + U_i − γ Σ_{j<i} D_j` with
/// `D_j = h(θ_j) + Γ_j θ_j + γ Σ_{k<j} R_ℓ(j,k) θ_k + R_ℓ(j,*) θ*`.
pub fn parameter_path(
    model: &ModelSpec,
    r_ell: &ResponseMatrix,
    gamma_ell: &[f64],
    u: &[f64],
    theta0: f64,
    theta_star: f64,
) -> Vec<f64> {
    let grid = r_ell.grid;
    let k = grid.count;
    let g = grid.step;
    let star = r_ell.star.as_deref();
    let mut theta = vec![0.0; k];
    let mut drift = 0.0;
    for i in 0..k {
        theta[i] = theta0 + u[i] - g * drift;
        let row = r_ell.values.row(i);
        let memory: f64 = (0..i).map(|m| row[m] * theta[m]).sum();
        let s = star.map_or(0.0, |s| s[i]);
        drift +=
            model.h(grid.time(i), theta[i]) + gamma_ell[i] * theta[i] + g * memory + s * theta_star;
    }
    theta
}

/// `R_θ(i,j) = (1/γ) ∂θ_i/∂u_j` along `path`, where `u_j` is a drift kick on
/// `[t_j, t_{j+1})`. Differentiating the recursion gives `P_{j+1} = γ` and
/// `P_i = γ − γ Σ_{m=j+1}^{i−1} [(h'_m + Γ_m) P_m + γ Σ_{k<m} R_ℓ(m,k) P_k]`.
pub fn parameter_response(
    model: &ModelSpec,
    r_ell: &ResponseMatrix,
    gamma_ell: &[f64],
    path: &[f64],
) -> ResponseMatrix {
    let grid = r_ell.grid;
    let k = grid.count;
    let g = grid.step;
    let slope: Vec<f64> = (0..k)
        .map(|m| model.dh(grid.time(m), path[m]) + gamma_ell[m])
        .collect();
    let mut out = ResponseMatrix::zeros(grid, false);
    let mut p = vec![0.0; k];
    for j in 0..k.saturating_sub(1) {
        p.iter_mut().for_each(|x| *x = 0.0);
        let mut acc = 0.0;
        for i in j + 1..k {
            p[i] = g - g * acc;
            let row = r_ell.values.row(i);
            let memory: f64 = (j + 1..i).map(|m| row[m] * p[m]).sum();
            acc += slope[i] * p[i] + g * memory;
            out.values[(i, j)] = p[i] / g;
        }
    }
    out
}

struct Acc {
    count: usize,
    c: Vec<f64>,
    fourth: Vec<f64>,
    /// `Σ (θ_t θ*)²` and `Σ θ_t³ θ*`.
    cross: Vec<[f64; 2]>,
    /// Controls `g = ((θ*)², (θ⁰)²)`: `Σ g`, `Σ g gᵀ` (packed), and per knot
    /// `Σ θ_t² g` and `Σ θ_t θ* g`.
    g: [f64; 2],
    gg: [f64; 3],
    fg: Vec<[f64; 4]>,
    response: Option<(Vec<f64>, Vec<f64>)>,
}

impl Acc {
    fn merge(mut self, other: Acc) -> Acc {
        self.count += other.count;
        add(&mut self.c, &other.c);
        add(&mut self.fourth, &other.fourth);
        for (a, b) in self.cross.iter_mut().zip(&other.cross) {
            a[0] += b[0];
            a[1] += b[1];
        }
        for c in 0..2 {
            self.g[c] += other.g[c];
        }
        for c in 0..3 {
            self.gg[c] += other.gg[c];
        }
        for (a, b) in self.fg.iter_mut().zip(&other.fg) {
            for c in 0..4 {
                a[c] += b[c];
            }
        }
        if let (Some(a), Some(b)) = (self.response.as_mut(), other.response) {
            add(&mut a.0, &b.0);
            add(&mut a.1, &b.1);
        }
        self
    }
}

/// Samples the effective parameter under the loss kernels held in `state`.
pub fn theta_pass(
    state: &DMFTState,
    model: &ModelSpec,
    params: &SolverParams,
    streams: &StreamFactory,
) -> Result<ThetaPassOutput> {
    params.validate()?;
    let grid = state.grid;
    let k = grid.count;
    let n = k + 1;
    let mut scaled = state.sigma_ell.values.clone();
    scaled.values.iter_mut().for_each(|v| *v /= state.delta);
    let jitter_scale = 1e-10 * scaled.trace().max(0.0) / k as f64;
    let factor = cholesky_matrix(&scaled, jitter_scale)?;
    // θ* and θ⁰ are drawn first in each stream and rescaled so that their
    // empirical second moments equal ρ² and E[(θ⁰)²] exactly.
    let moments = map_indexed(params.samples, |index| {
        let mut rng = streams.field(index);
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        (a * a, b * b)
    });
    let m = params.samples as f64;
    let (qs, q0) = moments
        .iter()
        .fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    let star_scale = (state.rho2 * m / qs).sqrt();
    let init_scale = if model.theta0.second_moment() > 0.0 {
        (model.theta0.second_moment() * m / q0).sqrt()
    } else {
        0.0
    };
    let per_sample = !model.h_is_linear();

    let chunks = chunk_ranges(params.samples);
    let parts = map_indexed(chunks.len(), |c| -> Result<Acc> {
        let mut acc = Acc {
            count: 0,
            c: vec![0.0; n * n],
            fourth: vec![0.0; n],
            cross: vec![[0.0; 2]; k],
            g: [0.0; 2],
            gg: [0.0; 3],
            fg: vec![[0.0; 4]; k],
            response: per_sample.then(|| (vec![0.0; k * k], vec![0.0; k * k])),
        };
        let mut xi = vec![0.0; k];
        let mut u = vec![0.0; k];
        let mut v = vec![0.0; n];
        for index in chunks[c].clone() {
            let mut rng = streams.field(index);
            let theta_star = star_scale * rng.sample::<f64, _>(StandardNormal);
            let theta0 = init_scale * rng.sample::<f64, _>(StandardNormal);
            xi.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
            factor.apply(&xi, &mut u);
            let path = parameter_path(
                model,
                &state.r_ell,
                &state.gamma_ell,
                &u,
                theta0,
                theta_star,
            );
            if let Some(bad) = path.iter().position(|x| !x.is_finite()) {
                return Err(Error::NumericalFailure(format!(
                    "effective parameter of sample {index} is not finite at t = {}",
                    grid.time(bad)
                )));
            }
            v[..k].copy_from_slice(&path);
            v[k] = theta_star;
            acc.count += 1;
            let g = [theta_star * theta_star, theta0 * theta0];
            acc.g[0] += g[0];
            acc.g[1] += g[1];
            acc.gg[0] += g[0] * g[0];
            acc.gg[1] += g[0] * g[1];
            acc.gg[2] += g[1] * g[1];
            for i in 0..k {
                let sq = v[i] * v[i];
                let p = v[i] * theta_star;
                acc.cross[i][0] += p * p;
                acc.cross[i][1] += sq * p;
                acc.fg[i][0] += sq * g[0];
                acc.fg[i][1] += sq * g[1];
                acc.fg[i][2] += p * g[0];
                acc.fg[i][3] += p * g[1];
            }
            for i in 0..n {
                let vi = v[i];
                acc.fourth[i] += vi.powi(4);
                if vi != 0.0 {
                    for j in i..n {
                        acc.c[i * n + j] += vi * v[j];
                    }
                }
            }
            if let Some((s1, s2)) = acc.response.as_mut() {
                let r = parameter_response(model, &state.r_ell, &state.gamma_ell, &path);
                for (idx, x) in r.values.values.iter().enumerate() {
                    s1[idx] += x;
                    s2[idx] += x * x;
                }
            }
        }
        Ok(acc)
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let acc = tree_reduce(parts, Acc::merge).expect("at least one sample");

    let mut c_theta = KernelMatrix::from_fn(grid, true, |i, j| acc.c[i * n + j] / m);
    c_theta.values[(k, k)] = state.rho2;
    c_theta.values[(0, 0)] = model.theta0.second_moment();

    let max_c = c_theta.values.max_abs().max(f64::MIN_POSITIVE);
    let noise_floor = (0..n)
        .map(|i| mean_se(acc.c[i * n + i], acc.fourth[i], acc.count).1)
        .fold(0.0, f64::max)
        / max_c;

    // The rescaled θ* and θ⁰ act as control variates: report the covariance
    // of the residual after projecting out `g`.
    let gm = [acc.g[0] / m, acc.g[1] / m];
    let vgg = [
        acc.gg[0] / m - gm[0] * gm[0],
        acc.gg[1] / m - gm[0] * gm[1],
        acc.gg[2] / m - gm[1] * gm[1],
    ];
    let det = vgg[0] * vgg[2] - vgg[1] * vgg[1];
    let project = |x: [f64; 2], y: [f64; 2]| -> f64 {
        // xᵀ V_gg⁻¹ y, restricted to the controls that actually vary.
        if det > 1e-12 * (vgg[0] * vgg[2]).max(f64::MIN_POSITIVE) {
            (x[0] * (vgg[2] * y[0] - vgg[1] * y[1]) + x[1] * (vgg[0] * y[1] - vgg[1] * y[0])) / det
        } else if vgg[0] > 0.0 {
            x[0] * y[0] / vgg[0]
        } else {
            0.0
        }
    };
    let moment_cov = (0..k)
        .map(|i| {
            let a = acc.c[i * n + i] / m;
            let c = acc.c[i * n + k] / m;
            let va = [acc.fg[i][0] / m - a * gm[0], acc.fg[i][1] / m - a * gm[1]];
            let vc = [acc.fg[i][2] / m - c * gm[0], acc.fg[i][3] / m - c * gm[1]];
            [
                ((acc.fourth[i] / m - a * a - project(va, va)) / m).max(0.0),
                (acc.cross[i][1] / m - a * c - project(va, vc)) / m,
                ((acc.cross[i][0] / m - c * c - project(vc, vc)) / m).max(0.0),
            ]
        })
        .collect();

    let r_theta = match acc.response {
        Some((s1, _)) => ResponseMatrix {
            grid,
            values: SquareMatrix {
                dim: k,
                values: s1.iter().map(|x| x / m).collect(),
            },
            star: None,
        },
        None => parameter_response(model, &state.r_ell, &state.gamma_ell, &vec![0.0; k]),
    };

    Ok(ThetaPassOutput {
        c_theta,
        r_theta,
        noise_floor,
        jitter: factor.jitter,
        moment_cov,
    })
}
