//! Finite-dimensional simulation of mini-batch SGD and of its stochastic
//! gradient flow on random designs.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid_gp::{make_grid, TimeGrid};
use crate::models::{evaluate_metric, Metric, ModelSpec};
use crate::parallel;
use crate::rng::{derive_seed, domain, stream};

/// Coordinates beyond this magnitude count as a blow-up.
pub const DIVERGENCE_BOUND: f64 = 1e12;

/// Fresh test samples per measurement for the zero-one metric.
pub const TEST_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// Entries `N(0, 1/d)`.
    #[default]
    Gaussian,
    /// Entries `±1/√d`.
    Rademacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub n: usize,
    pub d: usize,
    /// Row-major `n × d`.
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub theta0: Vec<f64>,
    pub delta: f64,
    pub design: Design,
    /// Seed of the fresh test samples used by the zero-one metric.
    pub test_seed: u64,
}

impl DataSet {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// `X v`.
    pub fn predict(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), v);
        }
    }

    /// `out += Xᵀ w`.
    pub fn add_transpose(&self, w: &[f64], out: &mut [f64]) {
        for (i, &wi) in w.iter().enumerate() {
            if wi != 0.0 {
                axpy(wi, self.row(i), out);
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub d: usize,
    pub delta: f64,
    pub eta: f64,
    pub batch: usize,
    pub tau: f64,
    pub gamma: f64,
    pub horizon: f64,
    pub record_grid: TimeGrid,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub design: Design,
}

impl SimConfig {
    pub fn n(&self) -> usize {
        (self.delta * self.d as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return invalid("d must be >= 1");
        }
        if !(self.delta > 0.0) || self.n() == 0 {
            return invalid(format!("delta = {} gives no samples", self.delta));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return invalid(format!("eta must be >= 0, got {}", self.eta));
        }
        if self.batch == 0 {
            return invalid("batch must be >= 1");
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return invalid(format!("tau must be >= 0, got {}", self.tau));
        }
        if !(self.gamma > 0.0) {
            return invalid(format!("gamma must be > 0, got {}", self.gamma));
        }
        if !(self.horizon >= 0.0) {
            return invalid(format!("horizon must be >= 0, got {}", self.horizon));
        }
        if self.trials == 0 {
            return invalid("trials must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Producer {
    Sgd,
    Sgf,
    DmftMc,
    Volterra,
    Online,
}

impl Producer {
    pub const ALL: [Producer; 5] = [
        Producer::Sgd,
        Producer::Sgf,
        Producer::DmftMc,
        Producer::Volterra,
        Producer::Online,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Producer::Sgd => "sgd",
            Producer::Sgf => "sgf",
            Producer::DmftMc => "dmft_mc",
            Producer::Volterra => "volterra",
            Producer::Online => "online",
        }
    }

    pub fn parse(s: &str) -> Option<Producer> {
        Producer::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub producer: Producer,
    pub times: Vec<f64>,
    pub train_mean: Vec<f64>,
    pub train_std: Vec<f64>,
    pub test_mean: Vec<f64>,
    pub test_std: Vec<f64>,
}

impl ErrorCurve {
    /// A curve without spread.
    pub fn exact(producer: Producer, times: Vec<f64>, train: Vec<f64>, test: Vec<f64>) -> Self {
        let n = times.len();
        Self {
            producer,
            times,
            train_mean: train,
            train_std: vec![0.0; n],
            test_mean: test,
            test_std: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Lengths agree and every value is finite and non-negative.
    pub fn is_well_formed(&self) -> bool {
        let n = self.times.len();
        [
            &self.train_mean,
            &self.train_std,
            &self.test_mean,
            &self.test_std,
        ]
        .iter()
        .all(|v| v.len() == n && v.iter().all(|x| x.is_finite() && *x >= 0.0))
    }

    pub fn write_csv_rows<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.times[i],
                self.producer.as_str(),
                self.train_mean[i],
                self.train_std[i],
                self.test_mean[i],
                self.test_std[i]
            )?;
        }
        Ok(())
    }
}

pub const CSV_HEADER: &str = "time,producer,train_mean,train_std,test_mean,test_std";

/// Long-format table: a `# status=...` comment, the header, then all rows.
pub fn write_csv<W: Write>(curves: &[ErrorCurve], status: &str, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "# status={status}")?;
    writeln!(w, "{CSV_HEADER}")?;
    for c in curves {
        c.write_csv_rows(w)?;
    }
    Ok(())
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gen_data<R: Rng + ?Sized>(
    config: &SimConfig,
    model: &ModelSpec,
    rng: &mut R,
) -> Result<DataSet> {
    if config.d == 0 {
        return invalid("d must be >= 1");
    }
    let d = config.d;
    let n = config.n();
    if n == 0 {
        return invalid(format!("delta = {} gives no samples", config.delta));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let x: Vec<f64> = match config.design {
        Design::Gaussian => (0..n * d).map(|_| scale * normal(rng)).collect(),
        Design::Rademacher => (0..n * d)
            .map(|_| if rng.random::<bool>() { scale } else { -scale })
            .collect(),
    };
    let sz = model.sigma2.sqrt();
    let z = (0..n).map(|_| sz * normal(rng)).collect();
    let sr = model.rho2.sqrt();
    let theta_star = (0..d).map(|_| sr * normal(rng)).collect();
    let s0 = model.theta0.std_dev();
    let theta0 = (0..d)
        .map(|_| if s0 > 0.0 { s0 * normal(rng) } else { 0.0 })
        .collect();
    Ok(DataSet {
        n,
        d,
        x,
        z,
        theta_star,
        theta0,
        delta: n as f64 / d as f64,
        design: config.design,
        test_seed: rng.random(),
    })
}

/// Measures train and test error of `theta`.
struct Meter<'a> {
    model: &'a ModelSpec,
    data: &'a DataSet,
    metric: Metric,
    rstar: Vec<f64>,
    r: Vec<f64>,
    star_norm2: f64,
}

impl<'a> Meter<'a> {
    fn new(model: &'a ModelSpec, data: &'a DataSet, metric: Metric) -> Self {
        let mut rstar = vec![0.0; data.n];
        data.predict(&data.theta_star, &mut rstar);
        Self {
            model,
            data,
            metric,
            rstar,
            r: vec![0.0; data.n],
            star_norm2: dot(&data.theta_star, &data.theta_star),
        }
    }

    fn train(&mut self, theta: &[f64]) -> f64 {
        self.data.predict(theta, &mut self.r);
        let n = self.data.n;
        (0..n)
            .map(|i| evaluate_metric(self.metric, self.r[i], self.rstar[i], self.data.z[i]))
            .sum::<f64>()
            / n as f64
    }

    fn test(&self, theta: &[f64], record: usize) -> f64 {
        let d = self.data.d as f64;
        match self.metric {
            Metric::Squared => {
                let e: f64 = theta
                    .iter()
                    .zip(&self.data.theta_star)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                e / d + self.model.sigma2
            }
            Metric::ZeroOne => {
                let mut rng = stream(self.data.test_seed, record as u64);
                let sz = self.model.sigma2.sqrt();
                let mut wrong = 0.0;
                match self.data.design {
                    Design::Gaussian => {
                        // (xᵀθ, xᵀθ*) for a fresh isotropic row is exactly this
                        // bivariate normal.
                        let a = dot(theta, theta) / d;
                        let b = dot(theta, &self.data.theta_star) / d;
                        let c = self.star_norm2 / d;
                        let l11 = c.sqrt();
                        let l21 = if l11 > 0.0 { b / l11 } else { 0.0 };
                        let l22 = (a - l21 * l21).max(0.0).sqrt();
                        for _ in 0..TEST_SAMPLES {
                            let (u, v) = (normal(&mut rng), normal(&mut rng));
                            let gs = l11 * u;
                            let g = l21 * u + l22 * v;
                            let z = sz * normal(&mut rng);
                            wrong += evaluate_metric(Metric::ZeroOne, g, gs, z);
                        }
                    }
                    Design::Rademacher => {
                        let scale = 1.0 / d.sqrt();
                        for _ in 0..TEST_SAMPLES {
                            let (mut g, mut gs) = (0.0, 0.0);
                            for (t, s) in theta.iter().zip(&self.data.theta_star) {
                                let x = if rng.random::<bool>() { scale } else { -scale };
                                g += x * t;
                                gs += x * s;
                            }
                            let z = sz * normal(&mut rng);
                            wrong += evaluate_metric(Metric::ZeroOne, g, gs, z);
                        }
                    }
                }
                wrong / TEST_SAMPLES as f64
            }
        }
    }
}

fn check_divergence(theta: &[f64], producer: Producer, time: f64) -> Result<()> {
    if theta
        .iter()
        .all(|v| v.is_finite() && v.abs() <= DIVERGENCE_BOUND)
    {
        Ok(())
    } else {
        Err(Error::Diverged {
            producer: producer.as_str().into(),
            time,
        })
    }
}

/// Mini-batch SGD state on one dataset.
pub struct SgdStepper<'a> {
    model: &'a ModelSpec,
    data: &'a DataSet,
    rstar: Vec<f64>,
    perm: Vec<usize>,
    grad: Vec<f64>,
}

impl<'a> SgdStepper<'a> {
    pub fn new(model: &'a ModelSpec, data: &'a DataSet) -> Self {
        let mut rstar = vec![0.0; data.n];
        data.predict(&data.theta_star, &mut rstar);
        Self {
            model,
            data,
            rstar,
            perm: (0..data.n).collect(),
            grad: vec![0.0; data.d],
        }
    }

    /// One update `θ ← θ − η[(1/d) h(θ) + (1/B) Σ_{i∈batch} xᵢ ℓᵢ]`, the batch
    /// drawn uniformly without replacement by a partial Fisher–Yates shuffle.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        theta: &mut [f64],
        t: f64,
        eta: f64,
        batch: usize,
        rng: &mut R,
    ) {
        let n = self.data.n;
        let d = self.data.d as f64;
        for i in 0..batch {
            let j = rng.random_range(i..n);
            self.perm.swap(i, j);
        }
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        for &i in &self.perm[..batch] {
            let row = self.data.row(i);
            let l = self
                .model
                .loss_grad(t, dot(row, theta), self.rstar[i], self.data.z[i]);
            axpy(l / batch as f64, row, &mut self.grad);
        }
        for (th, g) in theta.iter_mut().zip(&self.grad) {
            *th -= eta * (self.model.h(t, *th) / d + g);
        }
    }
}

/// Euler–Maruyama integrator of the gradient flow
/// `dθ = −[h(θ) + (1/δ) Xᵀℓ] dt − √(τ/δ) Σᵢ xᵢ ℓᵢ dBᵢ`.
pub struct SgfStepper<'a> {
    model: &'a ModelSpec,
    data: &'a DataSet,
    rstar: Vec<f64>,
    r: Vec<f64>,
    w: Vec<f64>,
}

impl<'a> SgfStepper<'a> {
    pub fn new(model: &'a ModelSpec, data: &'a DataSet) -> Self {
        let mut rstar = vec![0.0; data.n];
        data.predict(&data.theta_star, &mut rstar);
        Self {
            model,
            data,
            rstar,
            r: vec![0.0; data.n],
            w: vec![0.0; data.n],
        }
    }

    /// Advances by `gamma`. `increments` are the `n` Brownian increments over
    /// the step; `None` means the diffusion term is absent.
    pub fn step(
        &mut self,
        theta: &mut [f64],
        t: f64,
        gamma: f64,
        tau: f64,
        increments: Option<&[f64]>,
    ) {
        let delta = self.data.delta;
        self.data.predict(theta, &mut self.r);
        let noise = (tau * delta).sqrt();
        for i in 0..self.data.n {
            let l = self
                .model
                .loss_grad(t, self.r[i], self.rstar[i], self.data.z[i]);
            let a = match increments {
                Some(db) => gamma + noise * db[i],
                None => gamma,
            };
            self.w[i] = -l * a / delta;
        }
        for th in theta.iter_mut() {
            *th -= gamma * self.model.h(t, *th);
        }
        self.data.add_transpose(&self.w, theta);
    }
}

/// Record indices on an iterate axis where iterate `k` sits at time `k * dt`.
fn snap(record: &TimeGrid, dt: f64) -> Vec<usize> {
    record
        .times()
        .iter()
        .map(|t| (t / dt).round() as usize)
        .collect()
}

pub fn run_sgd<R: Rng + ?Sized>(
    model: &ModelSpec,
    data: &DataSet,
    config: &SimConfig,
    metric: Metric,
    rng: &mut R,
) -> Result<ErrorCurve> {
    if config.batch == 0 || config.batch > data.n {
        return invalid(format!("batch {} must lie in 1..={}", config.batch, data.n));
    }
    if !(config.eta >= 0.0) {
        return invalid("eta must be >= 0");
    }
    let d = data.d as f64;
    let times = config.record_grid.times();
    let targets: Vec<usize> = if config.eta == 0.0 {
        vec![0; times.len()]
    } else {
        snap(&config.record_grid, config.eta / d)
    };
    let last = targets.iter().copied().max().unwrap_or(0);
    let mut meter = Meter::new(model, data, metric);
    let mut stepper = SgdStepper::new(model, data);
    let mut theta = data.theta0.clone();
    let mut train = Vec::with_capacity(times.len());
    let mut test = Vec::with_capacity(times.len());
    let mut next = 0;
    for k in 0..=last {
        let t = k as f64 * config.eta / d;
        while next < targets.len() && targets[next] == k {
            train.push(meter.train(&theta));
            test.push(meter.test(&theta, next));
            next += 1;
        }
        if k == last {
            break;
        }
        stepper.step(&mut theta, t, config.eta, config.batch, rng);
        check_divergence(&theta, Producer::Sgd, (k + 1) as f64 * config.eta / d)?;
    }
    Ok(ErrorCurve::exact(Producer::Sgd, times, train, test))
}

pub fn run_sgf<R: Rng + ?Sized>(
    model: &ModelSpec,
    data: &DataSet,
    config: &SimConfig,
    metric: Metric,
    rng: &mut R,
) -> Result<ErrorCurve> {
    let grid = make_grid(config.horizon, config.gamma)?;
    let gamma = grid.step;
    let times = config.record_grid.times();
    let targets: Vec<usize> = snap(&config.record_grid, gamma)
        .into_iter()
        .map(|k| k.min(grid.count - 1))
        .collect();
    let last = targets.iter().copied().max().unwrap_or(0);
    let mut meter = Meter::new(model, data, metric);
    let mut stepper = SgfStepper::new(model, data);
    let mut theta = data.theta0.clone();
    let mut db = vec![0.0; data.n];
    let sd = gamma.sqrt();
    let mut train = Vec::with_capacity(times.len());
    let mut test = Vec::with_capacity(times.len());
    let mut next = 0;
    for k in 0..=last {
        while next < targets.len() && targets[next] == k {
            train.push(meter.train(&theta));
            test.push(meter.test(&theta, next));
            next += 1;
        }
        if k == last {
            break;
        }
        let inc = if config.tau > 0.0 {
            db.iter_mut().for_each(|b| *b = sd * normal(rng));
            Some(db.as_slice())
        } else {
            None
        };
        stepper.step(&mut theta, grid.time(k), gamma, config.tau, inc);
        check_divergence(&theta, Producer::Sgf, grid.time(k + 1))?;
    }
    Ok(ErrorCurve::exact(Producer::Sgf, times, train, test))
}

/// Pointwise mean and sample standard deviation across trials.
pub fn aggregate_trials(curves: &[ErrorCurve]) -> Result<ErrorCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InvalidArgument("no curves to aggregate".into()))?;
    if curves.iter().any(|c| c.times != first.times) {
        return invalid("curves have different time axes");
    }
    let m = curves.len() as f64;
    let n = first.len();
    let stats = |pick: fn(&ErrorCurve) -> &Vec<f64>| -> (Vec<f64>, Vec<f64>) {
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for i in 0..n {
            let v0 = pick(first)[i];
            if curves.iter().all(|c| pick(c)[i] == v0) {
                mean[i] = v0;
                continue;
            }
            let mu = curves.iter().map(|c| pick(c)[i]).sum::<f64>() / m;
            mean[i] = mu;
            if curves.len() > 1 {
                let ss: f64 = curves.iter().map(|c| (pick(c)[i] - mu).powi(2)).sum();
                std[i] = (ss / (m - 1.0)).sqrt();
            }
        }
        (mean, std)
    };
    let (train_mean, train_std) = stats(|c| &c.train_mean);
    let (test_mean, test_std) = stats(|c| &c.test_mean);
    Ok(ErrorCurve {
        producer: first.producer,
        times: first.times.clone(),
        train_mean,
        train_std,
        test_mean,
        test_std,
    })
}

/// Dataset stream of trial `i`. SGD and SGF runs with the same seed see the
/// same datasets.
pub fn trial_data_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    stream(derive_seed(seed, domain::TRIAL_DATA), trial as u64)
}

pub fn trial_dynamics_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    stream(derive_seed(seed, domain::TRIAL_DYNAMICS), trial as u64)
}

/// Runs `config.trials` independent trials of SGD or SGF and aggregates them.
pub fn run_trials(
    model: &ModelSpec,
    config: &SimConfig,
    metric: Metric,
    producer: Producer,
) -> Result<ErrorCurve> {
    config.validate()?;
    let results = parallel::map_indexed(config.trials, |trial| -> Result<ErrorCurve> {
        let data = gen_data(config, model, &mut trial_data_rng(config.seed, trial))?;
        let mut rng = trial_dynamics_rng(config.seed, trial);
        match producer {
            Producer::Sgd => run_sgd(model, &data, config, metric, &mut rng),
            Producer::Sgf => run_sgf(model, &data, config, metric, &mut rng),
            other => invalid(format!("{} is not a simulation producer", other.as_str())),
        }
    });
    let curves = results.into_iter().collect::<Result<Vec<_>>>()?;
    aggregate_trials(&curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{logistic_model, ridge_model};
    use crate::rng::stream;

    fn config(d: usize, delta: f64, eta: f64, batch: usize, tau: f64, horizon: f64) -> SimConfig {
        SimConfig {
            d,
            delta,
            eta,
            batch,
            tau,
            gamma: 0.05,
            horizon,
            record_grid: make_grid(horizon, 0.05).unwrap(),
            trials: 1,
            seed: 0,
            design: Design::Gaussian,
        }
    }

    #[test]
    fn data_shapes_and_variance() {
        let m = ridge_model(0.0, 1.0, 0.0).unwrap();
        let c = config(1024, 2.0, 0.5, 10, 0.05, 1.0);
        let data = gen_data(&c, &m, &mut stream(1, 0)).unwrap();
        assert_eq!((data.n, data.d), (2048, 1024));
        assert_eq!(data.delta, 2.0);
        assert!(data.z.iter().all(|&z| z == 0.0));
        let s = data.x.iter().map(|v| v * v).sum::<f64>() * 1024.0 / (2048.0 * 1024.0);
        assert!((0.9..=1.1).contains(&s), "{s}");
        let mut c2 = c.clone();
        c2.d = 100;
        c2.design = Design::Rademacher;
        let r = gen_data(&c2, &m, &mut stream(1, 0)).unwrap();
        assert!(r.x.iter().all(|v| (v.abs() - 0.1).abs() < 1e-15));
    }

    #[test]
    fn data_replays() {
        let m = ridge_model(0.0, 1.0, 0.1).unwrap();
        let c = config(50, 2.0, 0.5, 10, 0.05, 1.0);
        assert_eq!(
            gen_data(&c, &m, &mut stream(4, 2)).unwrap(),
            gen_data(&c, &m, &mut stream(4, 2)).unwrap()
        );
    }

    #[test]
    fn zero_learning_rate_is_constant() {
        let m = ridge_model(0.0, 1.0, 0.1).unwrap();
        let c = config(30, 2.0, 0.0, 5, 0.0, 1.0);
        let data = gen_data(&c, &m, &mut stream(2, 0)).unwrap();
        let curve = run_sgd(&m, &data, &c, Metric::Squared, &mut stream(3, 0)).unwrap();
        assert!(curve.train_mean.iter().all(|&v| v == curve.train_mean[0]));
        assert!(curve.test_mean.iter().all(|&v| v == curve.test_mean[0]));
    }

    #[test]
    fn full_batch_matches_dense_iteration() {
        let m = ridge_model(0.0, 1.0, 0.04).unwrap();
        let c = config(40, 2.0, 0.5, 80, 0.5 / 80.0, 2.0);
        let data = gen_data(&c, &m, &mut stream(5, 0)).unwrap();
        let (n, d) = (data.n, data.d);
        let y: Vec<f64> = (0..n)
            .map(|i| dot(data.row(i), &data.theta_star) + data.z[i])
            .collect();
        let steps = (2.0 * d as f64 / 0.5) as usize;
        let mut oracle = vec![0.0; d];
        for _ in 0..steps {
            let resid: Vec<f64> = (0..n).map(|i| dot(data.row(i), &oracle) - y[i]).collect();
            for j in 0..d {
                let g: f64 = (0..n).map(|i| data.x[i * d + j] * resid[i]).sum();
                oracle[j] -= 0.5 / n as f64 * g;
            }
        }
        let mut theta = data.theta0.clone();
        let mut stepper = SgdStepper::new(&m, &data);
        let mut rng = stream(6, 0);
        for k in 0..steps {
            stepper.step(&mut theta, k as f64, 0.5, n, &mut rng);
        }
        for (a, b) in theta.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
        // The recorded test error at the horizon equals the closed form at the oracle.
        let curve = run_sgd(&m, &data, &c, Metric::Squared, &mut stream(6, 0)).unwrap();
        let expected = oracle
            .iter()
            .zip(&data.theta_star)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / d as f64
            + 0.04;
        assert!((curve.test_mean.last().unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn sgd_rejects_oversized_batch() {
        let m = ridge_model(0.0, 1.0, 0.0).unwrap();
        let c = config(10, 1.0, 0.5, 11, 0.0, 1.0);
        let data = gen_data(&c, &m, &mut stream(0, 0)).unwrap();
        assert!(matches!(
            run_sgd(&m, &data, &c, Metric::Squared, &mut stream(0, 1)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn initial_train_error_formula() {
        let m = ridge_model(0.0, 1.0, 0.09).unwrap();
        let c = config(60, 1.5, 0.5, 10, 0.05, 0.5);
        let data = gen_data(&c, &m, &mut stream(7, 0)).unwrap();
        let expected = (0..data.n)
            .map(|i| (dot(data.row(i), &data.theta_star) + data.z[i]).powi(2))
            .sum::<f64>()
            / data.n as f64;
        let a = run_sgd(&m, &data, &c, Metric::Squared, &mut stream(1, 0)).unwrap();
        let b = run_sgf(&m, &data, &c, Metric::Squared, &mut stream(1, 0)).unwrap();
        assert_eq!(a.train_mean[0], expected);
        assert_eq!(b.train_mean[0], expected);
    }

    #[test]
    fn minibatch_increment_is_unbiased() {
        let m = logistic_model(0.2, 1.0, 0.01).unwrap();
        let c = config(20, 2.0, 0.5, 5, 0.1, 1.0);
        let data = gen_data(&c, &m, &mut stream(8, 0)).unwrap();
        let (n, d) = (data.n, data.d);
        let theta0: Vec<f64> = (0..d).map(|j| 0.1 * j as f64 - 1.0).collect();
        let rstar: Vec<f64> = (0..n).map(|i| dot(data.row(i), &data.theta_star)).collect();
        let mut expected = vec![0.0; d];
        for i in 0..n {
            let l = m.loss_grad(0.0, dot(data.row(i), &theta0), rstar[i], data.z[i]);
            axpy(l / n as f64, data.row(i), &mut expected);
        }
        for (e, th) in expected.iter_mut().zip(&theta0) {
            *e = -0.5 * (m.h(0.0, *th) / d as f64 + *e);
        }
        let reps = 100_000;
        let mut stepper = SgdStepper::new(&m, &data);
        let mut rng = stream(9, 0);
        let mut sum = vec![0.0; d];
        let mut sum2 = vec![0.0; d];
        let mut theta = theta0.clone();
        for _ in 0..reps {
            theta.copy_from_slice(&theta0);
            stepper.step(&mut theta, 0.0, 0.5, 5, &mut rng);
            for j in 0..d {
                let inc = theta[j] - theta0[j];
                sum[j] += inc;
                sum2[j] += inc * inc;
            }
        }
        for j in 0..d {
            let mean = sum[j] / reps as f64;
            let var = sum2[j] / reps as f64 - mean * mean;
            let se = (var / reps as f64).sqrt();
            assert!((mean - expected[j]).abs() <= 5.0 * se + 1e-15, "coord {j}");
        }
    }

    #[test]
    fn sgf_moments_match_scalar_recursion() {
        // d = n = 1, X = [1], λ = 0: e = θ - y obeys e' = e (1 - γ - √τ ΔB).
        let m = ridge_model(0.0, 1.0, 0.0).unwrap();
        let data = DataSet {
            n: 1,
            d: 1,
            x: vec![1.0],
            z: vec![0.0],
            theta_star: vec![1.0],
            theta0: vec![0.0],
            delta: 1.0,
            design: Design::Gaussian,
            test_seed: 0,
        };
        let (gamma, tau, steps): (f64, f64, i32) = (0.05, 0.5, 20);
        let paths = 100_000;
        let mut stepper = SgfStepper::new(&m, &data);
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut s4 = 0.0;
        for p in 0..paths {
            let mut rng = stream(10, p);
            let mut theta = [0.0];
            for k in 0..steps {
                let db = [gamma.sqrt() * normal(&mut rng)];
                stepper.step(&mut theta, k as f64 * gamma, gamma, tau, Some(&db));
            }
            s1 += theta[0];
            s2 += theta[0] * theta[0];
            s4 += theta[0].powi(4);
        }
        let n = paths as f64;
        let (m1, m2, m4) = (s1 / n, s2 / n, s4 / n);
        let mean_e = -(1.0f64 - gamma).powi(steps);
        let second_e = ((1.0f64 - gamma).powi(2) + tau * gamma).powi(steps);
        // θ = 1 + e.
        let mean = 1.0 + mean_e;
        let second = 1.0 + 2.0 * mean_e + second_e;
        let se1 = ((m2 - m1 * m1) / n).sqrt();
        let se2 = ((m4 - m2 * m2) / n).sqrt();
        assert!((m1 - mean).abs() <= 3.0 * se1, "{m1} vs {mean}");
        assert!((m2 - second).abs() <= 3.0 * se2, "{m2} vs {second}");
    }

    #[test]
    fn sgf_without_temperature_ignores_seed() {
        let m = logistic_model(0.01, 1.0, 0.01).unwrap();
        let c = config(40, 2.0, 0.5, 10, 0.0, 1.0);
        let data = gen_data(&c, &m, &mut stream(11, 0)).unwrap();
        let a = run_sgf(&m, &data, &c, Metric::ZeroOne, &mut stream(1, 0)).unwrap();
        let b = run_sgf(&m, &data, &c, Metric::ZeroOne, &mut stream(2, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_batch_energy_decreases() {
        let m = ridge_model(0.1, 1.0, 0.25).unwrap();
        let c = config(30, 2.0, 0.5, 60, 0.0, 1.0);
        let data = gen_data(&c, &m, &mut stream(12, 0)).unwrap();
        let (n, d) = (data.n, data.d);
        let y: Vec<f64> = (0..n)
            .map(|i| dot(data.row(i), &data.theta_star) + data.z[i])
            .collect();
        let objective = |th: &[f64]| {
            let fit: f64 = (0..n).map(|i| (dot(data.row(i), th) - y[i]).powi(2)).sum();
            fit / (2.0 * n as f64) + 0.1 / (2.0 * d as f64) * dot(th, th)
        };
        // Power iteration for the top eigenvalue of (1/n) XᵀX.
        let mut v = vec![1.0; d];
        let mut top = 0.0;
        for _ in 0..200 {
            let mut xv = vec![0.0; n];
            data.predict(&v, &mut xv);
            let mut w = vec![0.0; d];
            data.add_transpose(&xv, &mut w);
            top = dot(&w, &v) / dot(&v, &v) / n as f64;
            let norm = dot(&w, &w).sqrt();
            v = w.iter().map(|x| x / norm).collect();
        }
        let eta = 1.0 / (top + 0.1 / d as f64);
        let mut stepper = SgdStepper::new(&m, &data);
        let mut theta = data.theta0.clone();
        let mut rng = stream(0, 0);
        let mut prev = objective(&theta);
        for k in 0..200 {
            stepper.step(&mut theta, k as f64, eta, n, &mut rng);
            let cur = objective(&theta);
            assert!(cur <= prev + 1e-14 * prev.abs(), "step {k}: {cur} > {prev}");
            prev = cur;
        }
    }

    #[test]
    fn divergence_is_reported() {
        let m = ridge_model(0.0, 1.0, 0.0).unwrap();
        let mut c = config(20, 2.0, 0.5, 40, 0.0, 120.0);
        c.gamma = 3.0;
        c.record_grid = make_grid(120.0, 3.0).unwrap();
        let data = gen_data(&c, &m, &mut stream(13, 0)).unwrap();
        match run_sgf(&m, &data, &c, Metric::Squared, &mut stream(0, 0)) {
            Err(Error::Diverged { producer, time }) => {
                assert_eq!(producer, "sgf");
                assert!(time > 0.0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    fn constant(v: f64) -> ErrorCurve {
        ErrorCurve::exact(Producer::Sgd, vec![0.0, 1.0], vec![v; 2], vec![2.0 * v; 2])
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate_trials(&[constant(1.0)]).unwrap();
        assert_eq!(one.train_mean, vec![1.0, 1.0]);
        assert_eq!(one.train_std, vec![0.0, 0.0]);
        let two = aggregate_trials(&[constant(1.0), constant(3.0)]).unwrap();
        assert_eq!(two.train_mean, vec![2.0, 2.0]);
        assert!((two.train_std[0] - 2.0 / 2f64.sqrt()).abs() < 1e-15);
        let ten = aggregate_trials(&vec![constant(0.7); 10]).unwrap();
        assert!(ten.test_std.iter().all(|&s| s == 0.0));
        let mut shifted = constant(1.0);
        shifted.times[1] = 2.0;
        assert!(aggregate_trials(&[constant(1.0), shifted]).is_err());
        assert!(aggregate_trials(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut out = Vec::new();
        write_csv(&[constant(0.5)], "ok", &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# status=ok");
        assert_eq!(lines[1], CSV_HEADER);
        assert_eq!(lines[2], "0,sgd,0.5,0,1,0");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn trials_are_reproducible() {
        let m = ridge_model(0.0, 1.0, 0.01).unwrap();
        let mut c = config(40, 2.0, 0.5, 4, 0.125, 1.0);
        c.trials = 3;
        let a = run_trials(&m, &c, Metric::Squared, Producer::Sgd).unwrap();
        let b = run_trials(&m, &c, Metric::Squared, Producer::Sgd).unwrap();
        assert_eq!(a, b);
        assert!(a.is_well_formed());
        assert!(a.train_std.iter().skip(1).any(|&s| s > 0.0));
    }
}
