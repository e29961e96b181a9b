//! Experiment configs and orchestration behind the `dmft-lab` binary.
//!
//! A config is a single JSON document with the sections `model`, `dims`,
//! `dynamics`, `mc`, `run` and `output`. [`validate_config`] checks it
//! against every invariant at once and reports violations by field path;
//! [`run_experiment`] runs the requested producers on a shared record grid.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dmft::{fixed_point_solve, predict_errors, ConvergenceReport, DMFTState, SolverParams};
use crate::error::Error;
use crate::grid_gp::{make_grid, TimeGrid};
use crate::linreg_theory::{mp_rule, online_closed_form, solve_volterra, DEFAULT_NODES};
use crate::models::{logistic_model, ridge_model, Metric, ModelSpec, Theta0};
use crate::rng::{domain, StreamFactory};
use crate::simulator::{run_trials, write_csv, Design, ErrorCurve, Producer, SimConfig};

/// Tolerance for `tau = eta / batch`.
pub const TAU_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ridge,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub lambda: f64,
    pub rho2: f64,
    pub sigma2: f64,
    /// Variance of the normal initialization; 0 starts at the origin.
    pub theta0_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimsConfig {
    /// Simulation dimension; only needed by `sgd` and `sgf`.
    pub d: Option<usize>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub eta: Option<f64>,
    pub batch: Option<usize>,
    pub tau: f64,
    pub gamma: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub samples: usize,
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub resample_each_iter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub producers: Vec<Producer>,
    pub trials: usize,
    pub seed: u64,
    pub record_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub path: Option<PathBuf>,
    pub format: OutputFormat,
}

/// A validated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub dims: DimsConfig,
    pub dynamics: DynamicsConfig,
    pub mc: Option<McConfig>,
    pub run: RunConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn model_spec(&self) -> crate::Result<ModelSpec> {
        let m = &self.model;
        let spec = match m.kind {
            ModelKind::Ridge => ridge_model(m.lambda, m.rho2, m.sigma2)?,
            ModelKind::Logistic => logistic_model(m.lambda, m.rho2, m.sigma2)?,
        };
        if m.theta0_var > 0.0 {
            spec.with_theta0(Theta0::Normal { var: m.theta0_var })
        } else {
            Ok(spec)
        }
    }

    pub fn metric(&self) -> Metric {
        match self.model.kind {
            ModelKind::Ridge => Metric::Squared,
            ModelKind::Logistic => Metric::ZeroOne,
        }
    }

    pub fn record_grid(&self) -> crate::Result<TimeGrid> {
        make_grid(self.dynamics.horizon, self.run.record_step)
    }

    pub fn solver_params(&self) -> Option<SolverParams> {
        self.mc.as_ref().map(|mc| {
            let mut p =
                SolverParams::new(mc.samples, mc.damping, mc.tol, mc.max_iters, self.run.seed);
            p.resample_each_iter = mc.resample_each_iter;
            p
        })
    }

    pub fn n(&self) -> Option<usize> {
        self.dims
            .d
            .map(|d| (self.dims.delta * d as f64).round() as usize)
    }
}

/// Collects typed fields from a JSON object, recording problems by path.
struct Reader {
    errors: Vec<String>,
}

impl Reader {
    fn fail(&mut self, path: &str, msg: impl std::fmt::Display) {
        self.errors.push(format!("{path}: {msg}"));
    }

    fn section<'a>(
        &mut self,
        root: &'a Map<String, Value>,
        name: &str,
        required: bool,
    ) -> Option<&'a Map<String, Value>> {
        match root.get(name) {
            Some(Value::Object(m)) => Some(m),
            Some(_) => {
                self.fail(name, "must be an object");
                None
            }
            None => {
                if required {
                    self.fail(name, "missing section");
                }
                None
            }
        }
    }

    fn unknown_keys(&mut self, map: &Map<String, Value>, section: &str, known: &[&str]) {
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                let path = if section.is_empty() {
                    key.clone()
                } else {
                    format!("{section}.{key}")
                };
                self.fail(&path, "unknown field");
            }
        }
    }

    fn number(
        &mut self,
        map: Option<&Map<String, Value>>,
        section: &str,
        key: &str,
        required: bool,
    ) -> Option<f64> {
        let path = format!("{section}.{key}");
        match map.and_then(|m| m.get(key)) {
            Some(v) => match v.as_f64() {
                Some(x) if x.is_finite() => Some(x),
                _ => {
                    self.fail(&path, "must be a finite number");
                    None
                }
            },
            None => {
                if required && map.is_some() {
                    self.fail(&path, "required");
                }
                None
            }
        }
    }

    fn count(
        &mut self,
        map: Option<&Map<String, Value>>,
        section: &str,
        key: &str,
        required: bool,
    ) -> Option<u64> {
        let path = format!("{section}.{key}");
        match map.and_then(|m| m.get(key)) {
            Some(v) => match v.as_u64() {
                Some(x) => Some(x),
                None => {
                    self.fail(&path, "must be a non-negative integer");
                    None
                }
            },
            None => {
                if required && map.is_some() {
                    self.fail(&path, "required");
                }
                None
            }
        }
    }

    fn string<'a>(
        &mut self,
        map: Option<&'a Map<String, Value>>,
        section: &str,
        key: &str,
        required: bool,
    ) -> Option<&'a str> {
        let path = format!("{section}.{key}");
        match map.and_then(|m| m.get(key)) {
            Some(Value::String(s)) => Some(s),
            Some(_) => {
                self.fail(&path, "must be a string");
                None
            }
            None => {
                if required && map.is_some() {
                    self.fail(&path, "required");
                }
                None
            }
        }
    }

    fn boolean(
        &mut self,
        map: Option<&Map<String, Value>>,
        section: &str,
        key: &str,
    ) -> Option<bool> {
        match map.and_then(|m| m.get(key)) {
            Some(Value::Bool(b)) => Some(*b),
            Some(_) => {
                self.fail(&format!("{section}.{key}"), "must be true or false");
                None
            }
            None => None,
        }
    }
}

fn check(r: &mut Reader, ok: bool, path: &str, msg: impl std::fmt::Display) {
    if !ok {
        r.fail(path, msg);
    }
}

/// Parses and validates a config. On failure every violation is returned,
/// each prefixed by its field path.
pub fn validate_config(raw: &str) -> Result<ExperimentConfig, Vec<String>> {
    let root: Value =
        serde_json::from_str(raw).map_err(|e| vec![format!("<root>: invalid JSON: {e}")])?;
    let Value::Object(root) = root else {
        return Err(vec!["<root>: must be a JSON object".into()]);
    };
    let mut r = Reader { errors: Vec::new() };
    r.unknown_keys(
        &root,
        "",
        &["model", "dims", "dynamics", "mc", "run", "output"],
    );

    let model = r.section(&root, "model", true);
    if let Some(m) = model {
        r.unknown_keys(
            m,
            "model",
            &["kind", "lambda", "rho2", "sigma2", "theta0_var"],
        );
    }
    let kind = match r.string(model, "model", "kind", true) {
        Some("ridge") => Some(ModelKind::Ridge),
        Some("logistic") => Some(ModelKind::Logistic),
        Some(other) => {
            r.fail(
                "model.kind",
                format!("unknown model `{other}` (expected ridge or logistic)"),
            );
            None
        }
        None => None,
    };
    let lambda = r.number(model, "model", "lambda", true);
    let rho2 = r.number(model, "model", "rho2", true);
    let sigma2 = r.number(model, "model", "sigma2", true);
    let theta0_var = r.number(model, "model", "theta0_var", false).unwrap_or(0.0);
    if let Some(x) = lambda {
        check(&mut r, x >= 0.0, "model.lambda", "must be >= 0");
    }
    if let Some(x) = rho2 {
        check(&mut r, x >= 0.0, "model.rho2", "must be >= 0");
    }
    if let Some(x) = sigma2 {
        check(&mut r, x >= 0.0, "model.sigma2", "must be >= 0");
    }
    check(
        &mut r,
        theta0_var >= 0.0,
        "model.theta0_var",
        "must be >= 0",
    );

    let dims = r.section(&root, "dims", true);
    if let Some(m) = dims {
        r.unknown_keys(m, "dims", &["d", "delta"]);
    }
    let d = r.count(dims, "dims", "d", false).map(|x| x as usize);
    let delta = r.number(dims, "dims", "delta", true);
    if let Some(x) = delta {
        check(&mut r, x > 0.0, "dims.delta", "must be > 0");
    }

    let dynamics = r.section(&root, "dynamics", true);
    if let Some(m) = dynamics {
        r.unknown_keys(m, "dynamics", &["eta", "batch", "tau", "gamma", "horizon"]);
    }
    let eta = r.number(dynamics, "dynamics", "eta", false);
    let batch = r
        .count(dynamics, "dynamics", "batch", false)
        .map(|x| x as usize);
    let tau_given = r.number(dynamics, "dynamics", "tau", false);
    let gamma = r.number(dynamics, "dynamics", "gamma", true);
    let horizon = r.number(dynamics, "dynamics", "horizon", true);
    if let Some(x) = eta {
        check(&mut r, x > 0.0, "dynamics.eta", "must be > 0");
    }
    if let Some(x) = batch {
        check(&mut r, x >= 1, "dynamics.batch", "must be >= 1");
    }
    if let Some(x) = tau_given {
        check(&mut r, x >= 0.0, "dynamics.tau", "must be >= 0");
    }
    if let Some(x) = gamma {
        check(&mut r, x > 0.0, "dynamics.gamma", "must be > 0");
    }
    if let Some(x) = horizon {
        check(&mut r, x > 0.0, "dynamics.horizon", "must be > 0");
    }
    let n = match (d, delta) {
        (Some(d), Some(delta)) if delta > 0.0 => Some((delta * d as f64).round() as usize),
        _ => None,
    };
    let full_batch = matches!((batch, n), (Some(b), Some(n)) if b == n);
    let tau = match (tau_given, eta, batch) {
        (Some(t), Some(e), Some(b)) if b >= 1 => {
            let implied = e / b as f64;
            let consistent = (t - implied).abs() <= TAU_TOLERANCE || (t == 0.0 && full_batch);
            check(
                &mut r,
                consistent,
                "dynamics.tau",
                format!("temperature mismatch: tau = {t} but eta/batch = {implied}"),
            );
            Some(t)
        }
        (Some(t), _, _) => Some(t),
        (None, Some(e), Some(b)) if b >= 1 => Some(e / b as f64),
        (None, _, _) => {
            if dynamics.is_some() {
                r.fail("dynamics.tau", "required (or give both eta and batch)");
            }
            None
        }
    };
    if eta.is_some() != batch.is_some() {
        r.fail("dynamics", "eta and batch must be given together");
    }

    let run = r.section(&root, "run", true);
    if let Some(m) = run {
        r.unknown_keys(m, "run", &["producers", "trials", "seed", "record_step"]);
    }
    let mut producers = Vec::new();
    match run.and_then(|m| m.get("producers")) {
        Some(Value::Array(items)) => {
            if items.is_empty() {
                r.fail("run.producers", "must not be empty");
            }
            for (i, item) in items.iter().enumerate() {
                let path = format!("run.producers[{i}]");
                match item.as_str().map(|s| (s, Producer::parse(s))) {
                    Some((_, Some(p))) if producers.contains(&p) => r.fail(&path, format!("duplicate producer `{}`", p.as_str())),
                    Some((_, Some(p))) => producers.push(p),
                    Some((s, None)) => r.fail(
                        &path,
                        format!("unknown producer `{s}` (expected sgd, sgf, dmft_mc, volterra or online)"),
                    ),
                    None => r.fail(&path, "must be a string"),
                }
            }
        }
        Some(_) => r.fail("run.producers", "must be a list of producer names"),
        None => {
            if run.is_some() {
                r.fail("run.producers", "required");
            }
        }
    }
    let trials = r.count(run, "run", "trials", false).unwrap_or(1) as usize;
    check(&mut r, trials >= 1, "run.trials", "must be >= 1");
    let seed = r.count(run, "run", "seed", true);
    let record_step = r.number(run, "run", "record_step", false).or(gamma);
    if let (Some(s), Some(g)) = (record_step, gamma) {
        if s > 0.0 && g > 0.0 {
            let ratio = s / g;
            check(
                &mut r,
                ratio >= 1.0 - 1e-9 && (ratio - ratio.round()).abs() <= 1e-9 * ratio,
                "run.record_step",
                format!("must be a positive integer multiple of dynamics.gamma = {g}"),
            );
        } else {
            check(&mut r, s > 0.0, "run.record_step", "must be > 0");
        }
    }

    let has = |p: Producer| producers.contains(&p);
    let simulates = has(Producer::Sgd) || has(Producer::Sgf);
    if simulates && d.is_none() && dims.is_some() {
        r.fail("dims.d", "required by the sgd and sgf producers");
    }
    if let Some(d) = d {
        check(&mut r, d >= 1, "dims.d", "must be >= 1");
    }
    if has(Producer::Sgd) {
        if eta.is_none() || batch.is_none() {
            r.fail("dynamics", "the sgd producer needs eta and batch");
        }
        if let (Some(b), Some(n)) = (batch, n) {
            check(
                &mut r,
                b <= n,
                "dynamics.batch",
                format!("must not exceed n = {n}"),
            );
        }
    }
    if kind == Some(ModelKind::Logistic) {
        for p in [Producer::Volterra, Producer::Online] {
            if has(p) {
                r.fail(
                    "run.producers",
                    format!("{} requires model.kind = ridge", p.as_str()),
                );
            }
        }
    }
    if has(Producer::Online) && kind == Some(ModelKind::Ridge) {
        check(
            &mut r,
            lambda == Some(0.0),
            "model.lambda",
            "the online producer requires lambda = 0",
        );
        check(
            &mut r,
            theta0_var == 0.0,
            "model.theta0_var",
            "the online producer requires theta0_var = 0",
        );
    }

    let mc_section = r.section(&root, "mc", has(Producer::DmftMc));
    if let Some(m) = mc_section {
        r.unknown_keys(
            m,
            "mc",
            &[
                "samples",
                "damping",
                "tol",
                "max_iters",
                "resample_each_iter",
            ],
        );
    }
    let mut mc = None;
    if let Some(section) = mc_section {
        let samples = r.count(Some(section), "mc", "samples", true);
        let damping = r.number(Some(section), "mc", "damping", true);
        let tol = r.number(Some(section), "mc", "tol", true);
        let max_iters = r.count(Some(section), "mc", "max_iters", true);
        let resample = r
            .boolean(Some(section), "mc", "resample_each_iter")
            .unwrap_or(false);
        if let Some(x) = samples {
            check(&mut r, x >= 1, "mc.samples", "must be >= 1");
        }
        if let Some(x) = damping {
            check(
                &mut r,
                x > 0.0 && x <= 1.0,
                "mc.damping",
                "must lie in (0, 1]",
            );
        }
        if let Some(x) = tol {
            check(&mut r, x > 0.0, "mc.tol", "must be > 0");
        }
        if let Some(x) = max_iters {
            check(&mut r, x >= 1, "mc.max_iters", "must be >= 1");
        }
        if let (Some(samples), Some(damping), Some(tol), Some(max_iters)) =
            (samples, damping, tol, max_iters)
        {
            mc = Some(McConfig {
                samples: samples as usize,
                damping,
                tol,
                max_iters: max_iters as usize,
                resample_each_iter: resample,
            });
        }
    }

    let output = r.section(&root, "output", false);
    if let Some(m) = output {
        r.unknown_keys(m, "output", &["path", "format"]);
    }
    let path = r.string(output, "output", "path", false).map(PathBuf::from);
    let format = match r.string(output, "output", "format", false) {
        None | Some("csv") => OutputFormat::Csv,
        Some("json") => OutputFormat::Json,
        Some(other) => {
            r.fail(
                "output.format",
                format!("unknown format `{other}` (expected csv or json)"),
            );
            OutputFormat::Csv
        }
    };

    if !r.errors.is_empty() {
        return Err(r.errors);
    }
    // Every field below was checked above; a `None` here is a bug.
    let missing = || vec!["<internal>: incomplete config".to_string()];
    Ok(ExperimentConfig {
        model: ModelConfig {
            kind: kind.ok_or_else(missing)?,
            lambda: lambda.ok_or_else(missing)?,
            rho2: rho2.ok_or_else(missing)?,
            sigma2: sigma2.ok_or_else(missing)?,
            theta0_var,
        },
        dims: DimsConfig {
            d,
            delta: delta.ok_or_else(missing)?,
        },
        dynamics: DynamicsConfig {
            eta,
            batch,
            tau: tau.ok_or_else(missing)?,
            gamma: gamma.ok_or_else(missing)?,
            horizon: horizon.ok_or_else(missing)?,
        },
        mc,
        run: RunConfig {
            producers,
            trials,
            seed: seed.ok_or_else(missing)?,
            record_step: record_step.ok_or_else(missing)?,
        },
        output: OutputConfig { path, format },
    })
}

/// An example config for `ridge` or `logistic`.
pub fn gen_config(model: ModelKind) -> String {
    let value = match model {
        ModelKind::Ridge => serde_json::json!({
            "model": { "kind": "ridge", "lambda": 0.0, "rho2": 1.0, "sigma2": 0.01 },
            "dims": { "d": 400, "delta": 2.0 },
            "dynamics": { "eta": 0.5, "batch": 1, "tau": 0.5, "gamma": 0.05, "horizon": 5.0 },
            "mc": { "samples": 8000, "damping": 0.8, "tol": 0.001, "max_iters": 40 },
            "run": {
                "producers": ["sgd", "sgf", "dmft_mc", "volterra", "online"],
                "trials": 10,
                "seed": 1,
                "record_step": 0.05
            },
            "output": { "path": "ridge.csv", "format": "csv" }
        }),
        ModelKind::Logistic => serde_json::json!({
            "model": { "kind": "logistic", "lambda": 0.01, "rho2": 1.0, "sigma2": 0.01 },
            "dims": { "d": 256, "delta": 2.0 },
            "dynamics": { "eta": 0.5, "batch": 10, "tau": 0.05, "gamma": 0.05, "horizon": 10.0 },
            "mc": { "samples": 8000, "damping": 0.8, "tol": 0.001, "max_iters": 40 },
            "run": { "producers": ["sgd", "dmft_mc"], "trials": 10, "seed": 1, "record_step": 0.1 },
            "output": { "path": "logistic.csv", "format": "csv" }
        }),
    };
    let mut s = serde_json::to_string_pretty(&value).expect("static config serializes");
    s.push('\n');
    s
}

/// How a run ended. Worse outcomes take precedence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    NotConverged,
    Diverged,
    Failed,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::NotConverged => "not_converged",
            RunStatus::Diverged => "diverged",
            RunStatus::Failed => "failed",
        }
    }

    /// Process exit code; 2 is reserved for config errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunStatus::Ok => 0,
            RunStatus::Failed => 1,
            RunStatus::Diverged => 3,
            RunStatus::NotConverged => 4,
        }
    }
}

pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmftOutcome {
    pub state: DMFTState,
    pub report: ConvergenceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: RunStatus,
    /// Curves of the producers that finished, in config order.
    pub curves: Vec<ErrorCurve>,
    pub dmft: Option<DmftOutcome>,
    /// Error of the producer that stopped the run, if any.
    pub error: Option<String>,
}

/// Keeps every `stride`-th knot and relabels the times with `record`.
fn subsample(curve: &ErrorCurve, stride: usize, record: &TimeGrid) -> crate::Result<ErrorCurve> {
    let pick = |v: &[f64]| -> crate::Result<Vec<f64>> {
        (0..record.count)
            .map(|i| {
                v.get(i * stride).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "record time {} lies beyond the solver grid",
                        record.time(i)
                    ))
                })
            })
            .collect()
    };
    Ok(ErrorCurve {
        producer: curve.producer,
        times: record.times(),
        train_mean: pick(&curve.train_mean)?,
        train_std: pick(&curve.train_std)?,
        test_mean: pick(&curve.test_mean)?,
        test_std: pick(&curve.test_std)?,
    })
}

fn sim_config(cfg: &ExperimentConfig, record: TimeGrid) -> SimConfig {
    SimConfig {
        d: cfg.dims.d.unwrap_or(0),
        delta: cfg.dims.delta,
        eta: cfg.dynamics.eta.unwrap_or(0.0),
        batch: cfg.dynamics.batch.unwrap_or(1),
        tau: cfg.dynamics.tau,
        gamma: cfg.dynamics.gamma,
        horizon: cfg.dynamics.horizon,
        record_grid: record,
        trials: cfg.run.trials,
        seed: cfg.run.seed,
        design: Design::Gaussian,
    }
}

fn run_producer(
    cfg: &ExperimentConfig,
    producer: Producer,
    model: &ModelSpec,
    record: &TimeGrid,
    dmft: &mut Option<DmftOutcome>,
) -> crate::Result<ErrorCurve> {
    let metric = cfg.metric();
    let gamma = cfg.dynamics.gamma;
    let stride = (cfg.run.record_step / gamma).round() as usize;
    match producer {
        Producer::Sgd | Producer::Sgf => {
            run_trials(model, &sim_config(cfg, *record), metric, producer)
        }
        Producer::DmftMc => {
            let params = cfg
                .solver_params()
                .ok_or_else(|| Error::InvalidArgument("dmft_mc needs the mc section".into()))?;
            let grid = make_grid(cfg.dynamics.horizon, gamma)?;
            let (state, report) =
                fixed_point_solve(grid, model, cfg.dims.delta, cfg.dynamics.tau, &params)?;
            let streams = StreamFactory::new(cfg.run.seed).child(domain::PREDICT);
            let curve = predict_errors(&state, model, metric, &params, &streams)?;
            *dmft = Some(DmftOutcome { state, report });
            subsample(&curve, stride, record)
        }
        Producer::Volterra => {
            let grid = make_grid(cfg.dynamics.horizon, gamma)?;
            let rule = mp_rule(cfg.dims.delta, DEFAULT_NODES)?;
            let sol = solve_volterra(
                &rule,
                &grid,
                cfg.dynamics.tau,
                model.lambda,
                model.rho2,
                model.sigma2,
            )?;
            let curve = ErrorCurve::exact(Producer::Volterra, grid.times(), sol.train, sol.test);
            subsample(&curve, stride, record)
        }
        Producer::Online => {
            // Infinite data: train and test risk coincide.
            let risk: Vec<f64> = record
                .times()
                .iter()
                .map(|&t| online_closed_form(t, cfg.dynamics.tau, model.rho2, model.sigma2).2)
                .collect();
            Ok(ErrorCurve::exact(
                Producer::Online,
                record.times(),
                risk.clone(),
                risk,
            ))
        }
    }
}

/// Runs the configured producers in order. A producer error stops the run;
/// the curves finished so far are kept in the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> RunReport {
    let mut report = RunReport {
        status: RunStatus::Ok,
        curves: Vec::new(),
        dmft: None,
        error: None,
    };
    let setup = cfg
        .model_spec()
        .and_then(|m| cfg.record_grid().map(|g| (m, g)));
    let (model, record) = match setup {
        Ok(x) => x,
        Err(e) => {
            report.status = RunStatus::Failed;
            report.error = Some(e.to_string());
            return report;
        }
    };
    for &producer in &cfg.run.producers {
        match run_producer(cfg, producer, &model, &record, &mut report.dmft) {
            Ok(curve) => report.curves.push(curve),
            Err(e) => {
                report.status = match e {
                    Error::Diverged { .. } => RunStatus::Diverged,
                    _ => RunStatus::Failed,
                };
                report.error = Some(format!("{}: {e}", producer.as_str()));
                return report;
            }
        }
    }
    if matches!(&report.dmft, Some(d) if !d.report.converged) {
        report.status = RunStatus::NotConverged;
    }
    report
}

#[derive(Serialize)]
struct JsonOutput<'a> {
    status: RunStatus,
    error: &'a Option<String>,
    config: &'a ExperimentConfig,
    curves: &'a [ErrorCurve],
    dmft: &'a Option<DmftOutcome>,
}

/// Writes the report in the configured format.
pub fn write_report<W: Write>(
    cfg: &ExperimentConfig,
    report: &RunReport,
    w: &mut W,
) -> std::io::Result<()> {
    match cfg.output.format {
        OutputFormat::Csv => write_csv(&report.curves, report.status.as_str(), w),
        OutputFormat::Json => {
            let out = JsonOutput {
                status: report.status,
                error: &report.error,
                config: cfg,
                curves: &report.curves,
                dmft: &report.dmft,
            };
            serde_json::to_writer_pretty(&mut *w, &out)?;
            writeln!(w)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ridge_config() -> Value {
        serde_json::from_str(&gen_config(ModelKind::Ridge)).unwrap()
    }

    fn errors(v: &Value) -> Vec<String> {
        validate_config(&v.to_string()).unwrap_err()
    }

    #[test]
    fn generated_configs_validate() {
        for kind in [ModelKind::Ridge, ModelKind::Logistic] {
            let cfg = validate_config(&gen_config(kind)).unwrap();
            assert_eq!(cfg.model.kind, kind);
        }
    }

    #[test]
    fn consistent_temperature_accepted() {
        let mut v = ridge_config();
        v["dynamics"] = serde_json::json!({ "eta": 0.5, "batch": 10, "tau": 0.05, "gamma": 0.05, "horizon": 1.0 });
        let cfg = validate_config(&v.to_string()).unwrap();
        assert_eq!(cfg.dynamics.tau, 0.05);
    }

    #[test]
    fn temperature_mismatch_rejected() {
        let mut v = ridge_config();
        v["dynamics"] = serde_json::json!({ "eta": 0.5, "batch": 10, "tau": 0.2, "gamma": 0.05, "horizon": 1.0 });
        let e = errors(&v);
        assert!(
            e.iter()
                .any(|m| m.starts_with("dynamics.tau") && m.contains("mismatch")),
            "{e:?}"
        );
    }

    #[test]
    fn tau_derived_from_eta_and_batch() {
        let mut v = ridge_config();
        v["dynamics"] =
            serde_json::json!({ "eta": 0.5, "batch": 10, "gamma": 0.05, "horizon": 1.0 });
        assert_eq!(validate_config(&v.to_string()).unwrap().dynamics.tau, 0.05);
    }

    #[test]
    fn physics_fields_have_no_defaults() {
        let mut v = ridge_config();
        v["run"]["producers"] = serde_json::json!(["volterra"]);
        v["dynamics"] = serde_json::json!({ "horizon": 1.0 });
        v["dims"] = serde_json::json!({});
        let e = errors(&v);
        for field in ["dynamics.tau", "dynamics.gamma", "dims.delta"] {
            assert!(e.iter().any(|m| m.starts_with(field)), "{field} in {e:?}");
        }
    }

    #[test]
    fn full_batch_is_noiseless() {
        let mut v = ridge_config();
        v["dynamics"] = serde_json::json!({ "eta": 0.5, "batch": 800, "tau": 0.0, "gamma": 0.05, "horizon": 1.0 });
        assert!(validate_config(&v.to_string()).is_ok());
        v["dynamics"]["batch"] = serde_json::json!(400);
        assert!(validate_config(&v.to_string()).is_err());
    }

    #[test]
    fn producer_gating() {
        let mut v: Value = serde_json::from_str(&gen_config(ModelKind::Logistic)).unwrap();
        v["run"]["producers"] = serde_json::json!(["volterra"]);
        let e = errors(&v);
        assert!(
            e.iter()
                .any(|m| m.contains("volterra requires model.kind = ridge")),
            "{e:?}"
        );

        let mut v = ridge_config();
        v["model"]["lambda"] = serde_json::json!(0.1);
        let e = errors(&v);
        assert!(e.iter().any(|m| m.starts_with("model.lambda")), "{e:?}");
    }

    #[test]
    fn every_violation_is_reported_with_a_path() {
        let mut v = ridge_config();
        v["run"]["producers"] = serde_json::json!(["sgd", "nope", "sgd"]);
        v["mc"]["damping"] = serde_json::json!(1.5);
        v["model"]["extra"] = serde_json::json!(1);
        v["run"]["record_step"] = serde_json::json!(0.07);
        let e = errors(&v);
        let expect = [
            "run.producers[1]: unknown producer `nope`",
            "run.producers[2]: duplicate producer",
            "mc.damping",
            "model.extra: unknown field",
            "run.record_step",
        ];
        for prefix in expect {
            assert!(e.iter().any(|m| m.starts_with(prefix)), "{prefix} in {e:?}");
        }
    }

    #[test]
    fn empty_producers_rejected() {
        let mut v = ridge_config();
        v["run"]["producers"] = serde_json::json!([]);
        assert!(errors(&v).iter().any(|m| m.starts_with("run.producers")));
    }

    #[test]
    fn record_step_defaults_to_gamma() {
        let mut v = ridge_config();
        v["run"].as_object_mut().unwrap().remove("record_step");
        assert_eq!(
            validate_config(&v.to_string()).unwrap().run.record_step,
            0.05
        );
    }

    #[test]
    fn noiseless_volterra_run_equals_closed_form() {
        let mut v = ridge_config();
        v["dynamics"] = serde_json::json!({ "tau": 0.0, "gamma": 0.1, "horizon": 2.0 });
        v["run"]["producers"] = serde_json::json!(["volterra"]);
        v["run"]["record_step"] = serde_json::json!(0.2);
        let cfg = validate_config(&v.to_string()).unwrap();
        let report = run_experiment(&cfg);
        assert_eq!(report.status, RunStatus::Ok);
        let curve = &report.curves[0];
        let rule = mp_rule(2.0, DEFAULT_NODES).unwrap();
        for (i, &t) in curve.times.iter().enumerate() {
            let (l, r) = crate::linreg_theory::noiseless_errors(&rule, t, 0.0, 1.0, 0.01).unwrap();
            assert!((curve.train_mean[i] - l).abs() < 1e-12, "t = {t}");
            assert!((curve.test_mean[i] - r).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn time_axes_are_shared() {
        let mut v = ridge_config();
        v["dims"]["d"] = serde_json::json!(40);
        v["dynamics"]["horizon"] = serde_json::json!(1.0);
        v["mc"]["samples"] = serde_json::json!(200);
        v["mc"]["max_iters"] = serde_json::json!(3);
        v["run"]["trials"] = serde_json::json!(2);
        v["run"]["record_step"] = serde_json::json!(0.1);
        let cfg = validate_config(&v.to_string()).unwrap();
        let report = run_experiment(&cfg);
        assert_eq!(report.curves.len(), 5, "{:?}", report.error);
        for c in &report.curves {
            assert_eq!(c.times, report.curves[0].times, "{}", c.producer.as_str());
            assert_eq!(c.len(), 11);
        }
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes: Vec<i32> = [
            RunStatus::Ok,
            RunStatus::NotConverged,
            RunStatus::Diverged,
            RunStatus::Failed,
        ]
        .iter()
        .map(|s| s.exit_code())
        .chain([EXIT_CONFIG])
        .collect();
        let mut sorted = codes.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), codes.len());
    }
}
