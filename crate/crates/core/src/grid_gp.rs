//! Time grids, two-time kernels, and Gaussian-process path sampling.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Uniform knots `t_k = k * step`, `k = 0..count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub step: f64,
    pub count: usize,
}

/// Builds the grid with `floor(horizon / step) + 1` knots.
pub fn make_grid(horizon: f64, step: f64) -> Result<TimeGrid> {
    if !(step > 0.0) || !step.is_finite() {
        return invalid(format!("grid step must be positive, got {step}"));
    }
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return invalid(format!("grid horizon must be non-negative, got {horizon}"));
    }
    // The relative slack absorbs representation error in horizon/step (10/0.05).
    let count = (horizon / step * (1.0 + 1e-12)).floor() as usize + 1;
    Ok(TimeGrid {
        horizon,
        step,
        count,
    })
}

impl TimeGrid {
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.step
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.count).map(|k| self.time(k)).collect()
    }

    /// Index of the knot closest to `t`, clamped to the grid.
    pub fn nearest(&self, t: f64) -> usize {
        ((t / self.step).round().max(0.0) as usize).min(self.count - 1)
    }
}

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self[(i, i)]).sum()
    }

    /// `self <- (1 - alpha) self + alpha other`.
    pub fn blend(&mut self, other: &SquareMatrix, alpha: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = (1.0 - alpha) * *a + alpha * b;
        }
    }

    /// Largest `|self - other|` divided by `max(|other|, floor)`.
    pub fn relative_change(&self, other: &SquareMatrix, floor: f64) -> f64 {
        let diff = self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        diff / other.max_abs().max(floor)
    }
}

impl std::ops::Index<(usize, usize)> for SquareMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.values[i * self.dim + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for SquareMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.values[i * self.dim + j]
    }
}

/// Symmetric PSD two-time kernel on a grid. When `star` is set, the planted
/// index is the last row/column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMatrix {
    pub grid: TimeGrid,
    pub star: bool,
    pub values: SquareMatrix,
}

impl KernelMatrix {
    pub fn zeros(grid: TimeGrid, star: bool) -> Self {
        Self {
            grid,
            star,
            values: SquareMatrix::zeros(grid.count + star as usize),
        }
    }

    /// Fills the upper triangle from `f` and mirrors it, so symmetry is exact.
    pub fn from_fn(grid: TimeGrid, star: bool, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut k = Self::zeros(grid, star);
        let n = k.dim();
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                k.values[(i, j)] = v;
                k.values[(j, i)] = v;
            }
        }
        k
    }

    pub fn dim(&self) -> usize {
        self.values.dim
    }

    pub fn star_index(&self) -> Option<usize> {
        self.star.then_some(self.grid.count)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..i).all(|j| self.values[(i, j)] == self.values[(j, i)]))
    }

    /// PSD up to `1e-8 * trace / dim`, tested by factoring the shifted kernel.
    pub fn is_psd(&self) -> bool {
        let tol = 1e-8 * self.values.trace().max(0.0) / self.dim() as f64;
        factor_shifted(&self.values, tol).is_some()
    }

    pub fn check(&self, what: &str) -> Result<()> {
        if !self.is_symmetric() {
            return Err(Error::NumericalFailure(format!("{what} is not symmetric")));
        }
        if !self.is_psd() {
            return Err(Error::NumericalFailure(format!(
                "{what} is not positive semidefinite within tolerance"
            )));
        }
        Ok(())
    }

    /// Restricts a starred kernel to its time block.
    pub fn time_block(&self) -> KernelMatrix {
        KernelMatrix::from_fn(self.grid, false, |i, j| self.values[(i, j)])
    }
}

/// Causal response kernel: `values[(i, j)] = 0` for `i <= j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMatrix {
    pub grid: TimeGrid,
    pub values: SquareMatrix,
    /// Response to the planted index, `R(t_i, *)`.
    pub star: Option<Vec<f64>>,
}

impl ResponseMatrix {
    pub fn zeros(grid: TimeGrid, with_star: bool) -> Self {
        Self {
            grid,
            values: SquareMatrix::zeros(grid.count),
            star: with_star.then(|| vec![0.0; grid.count]),
        }
    }

    /// Fills the strictly lower triangle from `f`.
    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut r = Self::zeros(grid, false);
        for i in 0..grid.count {
            for j in 0..i {
                r.values[(i, j)] = f(i, j);
            }
        }
        r
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn is_causal(&self) -> bool {
        let n = self.values.dim;
        (0..n).all(|i| (i..n).all(|j| self.values[(i, j)] == 0.0))
    }

    pub fn check(&self, what: &str) -> Result<()> {
        if self.is_causal() {
            Ok(())
        } else {
            Err(Error::NumericalFailure(format!(
                "{what} violates causality"
            )))
        }
    }
}

/// Lower-triangular `L` with `L L^T = kernel + jitter * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub dim: usize,
    pub lower: Vec<f64>,
    pub jitter: f64,
    /// Max-norm residual of `L L^T` against the jittered kernel.
    pub residual: f64,
}

/// Jitter scale used across the crate: `1e-10 * trace / dim`.
pub fn default_jitter_scale(kernel: &KernelMatrix) -> f64 {
    1e-10 * kernel.values.trace().max(0.0) / kernel.dim() as f64
}

const MAX_DOUBLINGS: usize = 20;

/// Factors `kernel + eps I` with the smallest `eps` in
/// `{0, s, 2s, 4s, ...}` that succeeds.
pub fn cholesky_psd(kernel: &KernelMatrix, jitter_scale: f64) -> Result<CholeskyFactor> {
    if !(jitter_scale >= 0.0) {
        return invalid("jitter scale must be non-negative");
    }
    if !kernel.is_symmetric() {
        return invalid("kernel must be symmetric");
    }
    cholesky_matrix(&kernel.values, jitter_scale)
}

pub(crate) fn cholesky_matrix(a: &SquareMatrix, jitter_scale: f64) -> Result<CholeskyFactor> {
    let n = a.dim;
    let mut eps = 0.0;
    for attempt in 0..=MAX_DOUBLINGS + 1 {
        if let Some(lower) = factor_shifted(a, eps) {
            let residual = reproduction_residual(a, &lower, eps);
            return Ok(CholeskyFactor {
                dim: n,
                lower,
                jitter: eps,
                residual,
            });
        }
        if jitter_scale == 0.0 {
            break;
        }
        eps = jitter_scale * f64::powi(2.0, attempt as i32);
    }
    Err(Error::NumericalFailure(format!(
        "kernel of dimension {n} is not positive semidefinite after {MAX_DOUBLINGS} jitter doublings"
    )))
}

/// Plain Cholesky of `a + shift I`. A pivot that vanishes is accepted only
/// when its whole remaining column vanishes too (exactly degenerate rows such
/// as the `t = 0` row of an integrated kernel).
fn factor_shifted(a: &SquareMatrix, shift: f64) -> Option<Vec<f64>> {
    let n = a.dim;
    let scale = a.max_abs().max(shift);
    let zero_tol = 1e-13 * scale;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[(j, j)] + shift;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        let pivot = if d > zero_tol {
            d.sqrt()
        } else if d >= -zero_tol {
            0.0
        } else {
            return None;
        };
        l[j * n + j] = pivot;
        let row_j: Vec<f64> = l[j * n..j * n + j].to_vec();
        for i in j + 1..n {
            let row_i = &mut l[i * n..(i + 1) * n];
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= row_i[k] * row_j[k];
            }
            if pivot > 0.0 {
                row_i[j] = v / pivot;
            } else if v.abs() <= zero_tol {
                row_i[j] = 0.0;
            } else {
                return None;
            }
        }
    }
    Some(l)
}

fn reproduction_residual(a: &SquareMatrix, lower: &[f64], shift: f64) -> f64 {
    let n = a.dim;
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..=j).map(|k| lower[i * n + k] * lower[j * n + k]).sum();
            let target = a[(i, j)] + if i == j { shift } else { 0.0 };
            worst = worst.max((s - target).abs());
        }
    }
    worst
}

impl CholeskyFactor {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    /// `out = L xi`.
    pub fn apply(&self, xi: &[f64], out: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i + 1];
            out[i] = row.iter().zip(xi).map(|(l, x)| l * x).sum();
        }
    }
}

/// One path `L xi`, `xi` i.i.d. standard normal.
pub fn sample_gp<R: Rng + ?Sized>(factor: &CholeskyFactor, rng: &mut R) -> Vec<f64> {
    let xi = standard_normals(factor.dim, rng);
    let mut out = vec![0.0; factor.dim];
    factor.apply(&xi, &mut out);
    out
}

pub fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `count - 1` i.i.d. `N(0, step)` increments.
pub fn brownian_increments<R: Rng + ?Sized>(grid: &TimeGrid, rng: &mut R) -> Vec<f64> {
    let sd = grid.step.sqrt();
    (1..grid.count)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}
