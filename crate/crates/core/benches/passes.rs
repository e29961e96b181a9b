use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dmft_lab::dmft::{init_state, r_pass, theta_pass, DMFTState, SolverParams};
use dmft_lab::grid_gp::make_grid;
use dmft_lab::models::{logistic_model, Metric, ModelSpec};
use dmft_lab::parallel;
use dmft_lab::rng::StreamFactory;
use dmft_lab::simulator::{run_trials, Producer, SimConfig};

fn setup() -> (DMFTState, ModelSpec, SolverParams) {
    let grid = make_grid(2.0, 0.05).unwrap();
    let model = logistic_model(0.01, 1.0, 0.01).unwrap();
    let state = init_state(grid, &model, 2.0, 0.1).unwrap();
    (state, model, SolverParams::new(2048, 0.8, 1e-3, 10, 1))
}

/// Worker counts to compare. Without the `parallel` feature there is only
/// the sequential loop.
fn workers() -> Vec<usize> {
    if cfg!(feature = "parallel") {
        let max = std::thread::available_parallelism().map_or(1, |n| n.get());
        let mut w = vec![1];
        if max > 1 {
            w.push(max);
        }
        w
    } else {
        vec![1]
    }
}

#[cfg(feature = "parallel")]
fn with_workers<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .unwrap()
        .install(f)
}

#[cfg(not(feature = "parallel"))]
fn with_workers<T: Send>(_n: usize, f: impl FnOnce() -> T + Send) -> T {
    f()
}

fn passes(c: &mut Criterion) {
    let (state, model, params) = setup();
    let streams = StreamFactory::new(1);
    let mut state = state;
    let r = r_pass(&state, &model, &params, &streams).unwrap();
    state.sigma_ell = r.sigma_ell;
    state.r_ell = r.r_ell;

    let mut group = c.benchmark_group(format!("passes/{}", parallel::backend()));
    group.sample_size(10);
    for n in workers() {
        group.bench_with_input(BenchmarkId::new("r_pass", n), &n, |b, &n| {
            b.iter(|| with_workers(n, || r_pass(&state, &model, &params, &streams).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("theta_pass", n), &n, |b, &n| {
            b.iter(|| with_workers(n, || theta_pass(&state, &model, &params, &streams).unwrap()))
        });
    }
    group.finish();
}

fn simulation(c: &mut Criterion) {
    let model = logistic_model(0.01, 1.0, 0.01).unwrap();
    let record = make_grid(2.0, 0.1).unwrap();
    let config = SimConfig {
        d: 128,
        delta: 2.0,
        eta: 1.0,
        batch: 10,
        tau: 0.1,
        gamma: 0.05,
        horizon: 2.0,
        record_grid: record,
        trials: 8,
        seed: 1,
        design: Default::default(),
    };
    let mut group = c.benchmark_group(format!("run_trials/{}", parallel::backend()));
    group.sample_size(10);
    for n in workers() {
        group.bench_with_input(BenchmarkId::new("sgd", n), &n, |b, &n| {
            b.iter(|| {
                with_workers(n, || {
                    run_trials(&model, &config, Metric::ZeroOne, Producer::Sgd).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, passes, simulation);
criterion_main!(benches);
