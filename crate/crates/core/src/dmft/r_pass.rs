//! Effective-field pass: sample `r`, differentiate it, estimate `(Σ_ℓ, R_ℓ, Γ)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::state::{DMFTState, SolverParams, StarEstimator};
use crate::error::{Error, Result};
use crate::grid_gp::{
    cholesky_psd, default_jitter_scale, CholeskyFactor, KernelMatrix, ResponseMatrix, TimeGrid,
};
use crate::models::ModelSpec;
use crate::parallel::{chunk_ranges, map_indexed, tree_reduce};
use crate::rng::StreamFactory;

/// One sampled effective field, with the loss along it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldPath {
    pub w: Vec<f64>,
    pub wstar: f64,
    pub z: f64,
    /// Brownian increments; empty when `τ = 0`.
    pub db: Vec<f64>,
    pub r: Vec<f64>,
    pub ell: Vec<f64>,
    pub dell: Vec<f64>,
    /// `∂ℓ/∂r*`, when the loss has one.
    pub dstar: Option<Vec<f64>>,
    /// Step weights `a_j = γ + √(τδ) ΔB_j`.
    pub a: Vec<f64>,
    /// `L_i = Σ_{k<i} ℓ_k a_k`.
    pub big_l: Vec<f64>,
}

/// Solves `r_i = w_i − (1/δ) Σ_{j<i} R_θ(i,j) ℓ_j a_j` forward in time.
#[allow(clippy::too_many_arguments)]
pub fn effective_field_path(
    model: &ModelSpec,
    r_theta: &ResponseMatrix,
    delta: f64,
    tau: f64,
    w: &[f64],
    wstar: f64,
    z: f64,
    db: &[f64],
) -> FieldPath {
    let grid = r_theta.grid;
    let k = grid.count;
    let gamma = grid.step;
    let noise = (tau * delta).sqrt();
    let a: Vec<f64> = (0..k.saturating_sub(1))
        .map(|j| {
            if db.is_empty() {
                gamma
            } else {
                gamma + noise * db[j]
            }
        })
        .collect();
    let mut r = vec![0.0; k];
    let mut ell = vec![0.0; k];
    let mut dell = vec![0.0; k];
    let mut dstar = model.smooth_in_rstar().then(|| vec![0.0; k]);
    let mut big_l = vec![0.0; k];
    let mut weighted = vec![0.0; k];
    for i in 0..k {
        let row = r_theta.values.row(i);
        let memory: f64 = (0..i).map(|j| row[j] * weighted[j]).sum();
        r[i] = w[i] - memory / delta;
        let t = grid.time(i);
        ell[i] = model.loss_grad(t, r[i], wstar, z);
        dell[i] = model.dloss_dr(t, r[i], wstar, z);
        if let Some(ds) = dstar.as_mut() {
            ds[i] = model.dloss_drstar(t, r[i], wstar, z).unwrap_or(0.0);
        }
        if i + 1 < k {
            weighted[i] = ell[i] * a[i];
            big_l[i + 1] = big_l[i] + weighted[i];
        }
    }
    FieldPath {
        w: w.to_vec(),
        wstar,
        z,
        db: db.to_vec(),
        r,
        ell,
        dell,
        dstar,
        a,
        big_l,
    }
}

/// Offset of row `i` in a packed strictly-lower-triangular array.
pub(crate) fn packed(i: usize) -> usize {
    i * i.saturating_sub(1) / 2
}

/// `J[i][j] = ∂r_i/∂w_j` for `j < i`, packed row by row.
///
/// Differentiating the forward recursion gives
/// `J[i][j] = −(1/δ) [R_θ(i,j) b_j + Σ_{j<k<i} R_θ(i,k) b_k J[k][j]]`
/// with `b_k = ∂_r ℓ_k a_k`; each row is an accumulation of earlier rows.
pub fn field_jacobian(path: &FieldPath, r_theta: &ResponseMatrix, delta: f64) -> Vec<f64> {
    let k = path.r.len();
    let mut jac = vec![0.0; packed(k)];
    for i in 1..k {
        let rrow = r_theta.values.row(i);
        let (done, rest) = jac.split_at_mut(packed(i));
        let row = &mut rest[..i];
        for m in 0..i {
            let c = rrow[m] * path.dell[m] * path.a[m];
            if c == 0.0 {
                continue;
            }
            row[m] += c;
            let prev = &done[packed(m)..packed(m) + m];
            for (x, p) in row[..m].iter_mut().zip(prev) {
                *x += c * p;
            }
        }
        for x in row.iter_mut() {
            *x *= -1.0 / delta;
        }
    }
    jac
}

/// `q_i = ∂r_i/∂w*` at fixed `w`.
fn star_derivative(
    path: &FieldPath,
    r_theta: &ResponseMatrix,
    delta: f64,
    dstar: &[f64],
) -> Vec<f64> {
    let k = path.r.len();
    let mut q = vec![0.0; k];
    let mut src = vec![0.0; k];
    for i in 0..k {
        let row = r_theta.values.row(i);
        let s: f64 = (0..i).map(|m| row[m] * src[m]).sum();
        q[i] = -s / delta;
        if i + 1 < k {
            src[i] = path.a[i] * (path.dell[i] * q[i] + dstar[i]);
        }
    }
    q
}

/// How much per-sample data to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PathDetail {
    #[default]
    None,
    Paths,
    PathsAndJacobians,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathBatch {
    pub paths: Vec<FieldPath>,
    /// Packed Jacobians, see [`field_jacobian`].
    pub jacobians: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RPassOutput {
    pub sigma_ell: KernelMatrix,
    /// `R_ℓ`, with the planted column from the selected estimator.
    pub r_ell: ResponseMatrix,
    pub gamma_ell: Vec<f64>,
    pub star_stein: Vec<f64>,
    pub star_stein_se: Vec<f64>,
    pub star_direct: Option<Vec<f64>>,
    pub star_direct_se: Option<Vec<f64>>,
    /// Standard error of the per-sample difference of the two estimators.
    pub star_diff_se: Option<Vec<f64>>,
    /// Jitter used to factor `C_θ`.
    pub jitter: f64,
    pub batch: PathBatch,
}

struct Acc {
    count: usize,
    sigma: Vec<f64>,
    rl: Vec<f64>,
    gam: Vec<f64>,
    stein: [Vec<f64>; 2],
    direct: [Vec<f64>; 2],
    diff2: Vec<f64>,
    batch: PathBatch,
}

impl Acc {
    fn new(k: usize) -> Self {
        Self {
            count: 0,
            sigma: vec![0.0; k * k],
            rl: vec![0.0; k * k],
            gam: vec![0.0; k],
            stein: [vec![0.0; k], vec![0.0; k]],
            direct: [vec![0.0; k], vec![0.0; k]],
            diff2: vec![0.0; k],
            batch: PathBatch::default(),
        }
    }

    fn merge(mut self, other: Acc) -> Acc {
        self.count += other.count;
        add(&mut self.sigma, &other.sigma);
        add(&mut self.rl, &other.rl);
        add(&mut self.gam, &other.gam);
        for c in 0..2 {
            add(&mut self.stein[c], &other.stein[c]);
            add(&mut self.direct[c], &other.direct[c]);
        }
        add(&mut self.diff2, &other.diff2);
        self.batch.paths.extend(other.batch.paths);
        self.batch.jacobians.extend(other.batch.jacobians);
        self
    }
}

pub(crate) fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

pub(crate) fn mean_se(sum: f64, sum2: f64, n: usize) -> (f64, f64) {
    let m = n as f64;
    let mean = sum / m;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = ((sum2 - m * mean * mean) / (m - 1.0)).max(0.0);
    (mean, (var / m).sqrt())
}

/// Draws `(w, w*, z, ΔB)` for sample `index`.
pub(crate) fn draw_field(
    factor: &CholeskyFactor,
    grid: &TimeGrid,
    sigma2: f64,
    tau: f64,
    streams: &StreamFactory,
    index: usize,
) -> (Vec<f64>, f64, f64, Vec<f64>) {
    let mut rng = streams.field(index);
    let xi: Vec<f64> = (0..factor.dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut ww = vec![0.0; factor.dim];
    factor.apply(&xi, &mut ww);
    let z = sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal);
    let wstar = ww.pop().unwrap_or(0.0);
    let db = if tau > 0.0 {
        let mut nrng = streams.noise(index);
        let sd = grid.step.sqrt();
        (1..grid.count)
            .map(|_| sd * nrng.sample::<f64, _>(StandardNormal))
            .collect()
    } else {
        Vec::new()
    };
    (ww, wstar, z, db)
}

pub(crate) fn check_path(path: &FieldPath, grid: &TimeGrid, index: usize) -> Result<()> {
    for i in 0..path.r.len() {
        if !path.r[i].is_finite() || !path.ell[i].is_finite() || !path.dell[i].is_finite() {
            return Err(Error::NumericalFailure(format!(
                "effective field of sample {index} is not finite at t = {}",
                grid.time(i)
            )));
        }
    }
    Ok(())
}

pub(crate) fn factor_field(state: &DMFTState) -> Result<CholeskyFactor> {
    cholesky_psd(&state.c_theta, default_jitter_scale(&state.c_theta))
}

pub fn r_pass(
    state: &DMFTState,
    model: &ModelSpec,
    params: &SolverParams,
    streams: &StreamFactory,
) -> Result<RPassOutput> {
    r_pass_detailed(state, model, params, streams, PathDetail::None)
}

pub fn r_pass_detailed(
    state: &DMFTState,
    model: &ModelSpec,
    params: &SolverParams,
    streams: &StreamFactory,
    detail: PathDetail,
) -> Result<RPassOutput> {
    params.validate()?;
    let grid = state.grid;
    let k = grid.count;
    let star = state.star();
    let factor = factor_field(state)?;
    let rho2 = state.rho2;
    let overlap: Vec<f64> = (0..k).map(|i| state.c_theta.get(i, star)).collect();
    let smooth = model.smooth_in_rstar();

    let chunks = chunk_ranges(params.samples);
    let parts = map_indexed(chunks.len(), |c| -> Result<Acc> {
        let mut acc = Acc::new(k);
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
            let jac = field_jacobian(&path, &state.r_theta, state.delta);
            acc.count += 1;
            let mut stein = vec![0.0; k];
            for i in 0..k {
                let li = path.big_l[i];
                if li != 0.0 {
                    for j in i..k {
                        acc.sigma[i * k + j] += li * path.big_l[j];
                    }
                }
                acc.gam[i] += path.dell[i];
                let row = &jac[packed(i)..packed(i) + i];
                let di = path.dell[i];
                let mut proj = 0.0;
                for (j, &x) in row.iter().enumerate() {
                    acc.rl[i * k + j] += di * x;
                    proj += overlap[j] * x;
                }
                let s = (wstar * path.ell[i] - overlap[i] * di - di * proj) / rho2;
                stein[i] = s;
                acc.stein[0][i] += s;
                acc.stein[1][i] += s * s;
            }
            if smooth {
                let ds = path
                    .dstar
                    .as_ref()
                    .expect("smooth loss has an r* derivative");
                let q = star_derivative(&path, &state.r_theta, state.delta, ds);
                for i in 0..k {
                    let dval = path.dell[i] * q[i] + ds[i];
                    acc.direct[0][i] += dval;
                    acc.direct[1][i] += dval * dval;
                    acc.diff2[i] += (stein[i] - dval).powi(2);
                }
            }
            match detail {
                PathDetail::None => {}
                PathDetail::Paths => acc.batch.paths.push(path),
                PathDetail::PathsAndJacobians => {
                    acc.batch.paths.push(path);
                    acc.batch.jacobians.push(jac);
                }
            }
        }
        Ok(acc)
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let acc = tree_reduce(parts, Acc::merge).expect("at least one sample");
    let m = acc.count as f64;

    let sigma_ell = KernelMatrix::from_fn(grid, false, |i, j| acc.sigma[i * k + j] / m);
    let gamma_ell: Vec<f64> = acc.gam.iter().map(|g| g / m).collect();
    let mut r_ell = ResponseMatrix::from_fn(grid, |i, j| acc.rl[i * k + j] / (m * grid.step));

    let (star_stein, star_stein_se): (Vec<f64>, Vec<f64>) = (0..k)
        .map(|i| mean_se(acc.stein[0][i], acc.stein[1][i], acc.count))
        .unzip();
    let (star_direct, star_direct_se, star_diff_se) = if smooth {
        let (d, se): (Vec<f64>, Vec<f64>) = (0..k)
            .map(|i| mean_se(acc.direct[0][i], acc.direct[1][i], acc.count))
            .unzip();
        let diff_se: Vec<f64> = (0..k)
            .map(|i| {
                let mean = star_stein[i] - d[i];
                let var = (acc.diff2[i] / m - mean * mean).max(0.0) * m / (m - 1.0).max(1.0);
                (var / m).sqrt()
            })
            .collect();
        (Some(d), Some(se), Some(diff_se))
    } else {
        (None, None, None)
    };
    let use_direct = match params.star_estimator {
        StarEstimator::Auto => smooth,
        StarEstimator::Direct => {
            if !smooth {
                return Err(Error::InvalidArgument(
                    "direct planted response needs a loss smooth in r*".into(),
                ));
            }
            true
        }
        StarEstimator::Stein => false,
    };
    r_ell.star = Some(if use_direct {
        star_direct.clone().expect("computed for smooth losses")
    } else {
        star_stein.clone()
    });

    Ok(RPassOutput {
        sigma_ell,
        r_ell,
        gamma_ell,
        star_stein,
        star_stein_se,
        star_direct,
        star_direct_se,
        star_diff_se,
        jitter: factor.jitter,
        batch: acc.batch,
    })
}
