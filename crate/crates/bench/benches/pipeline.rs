use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mfclear_bench::solved_futures;
use mfclear_core::clearing::{net_flow_metric, ClearingConfig};
use mfclear_core::{
    build_scenarios, presets, rate_sweep, simulate_agents, solve_affine, solve_lq, solve_nonlinear_deterministic,
    ScenarioOptions, SolverConfig,
};

fn riccati(c: &mut Criterion) {
    let mut g = c.benchmark_group("riccati");
    for (name, spec) in [("general_1d", presets::general_1d()), ("general_2d", presets::general_2d())] {
        let grid = spec.grid().unwrap();
        g.bench_function(name, |b| b.iter(|| solve_affine(black_box(&spec), &grid).unwrap()));
    }
    g.finish();
}

fn solvers(c: &mut Criterion) {
    let spec = presets::general_1d();
    let grid = spec.grid().unwrap();
    let sc = build_scenarios(&spec, &grid, 16, 64, 1, ScenarioOptions::default()).unwrap();
    c.bench_function("solve_lq/16x64", |b| b.iter(|| solve_lq(black_box(&spec), &sc, false).unwrap()));

    let sat = presets::saturating_1d();
    let sc = build_scenarios(&sat, &sat.grid().unwrap(), 1, 8, 1, ScenarioOptions::default()).unwrap();
    let cfg = SolverConfig::default();
    c.bench_function("fixed_point/saturating", |b| {
        b.iter(|| solve_nonlinear_deterministic(black_box(&sat), &sc, &cfg).unwrap())
    });
}

fn scenarios(c: &mut Criterion) {
    let spec = presets::general_2d();
    let grid = spec.grid().unwrap();
    c.bench_function("scenarios/2d_16x64", |b| {
        b.iter(|| build_scenarios(black_box(&spec), &grid, 16, 64, 1, ScenarioOptions::default()).unwrap())
    });
}

fn clearing(c: &mut Criterion) {
    let (_, sol) = solved_futures(16, 16);
    let mut g = c.benchmark_group("clearing");
    g.sample_size(10);
    g.bench_function("agents/N=1024", |b| {
        b.iter(|| net_flow_metric(&simulate_agents(black_box(&sol), 1024, 7).unwrap()))
    });
    let cfg = ClearingConfig::new(vec![16, 64, 256], 4, 2);
    g.bench_function("sweep/16-256x4", |b| b.iter(|| rate_sweep(black_box(&sol), &cfg).unwrap()));
    g.finish();
}

criterion_group!(benches, riccati, solvers, scenarios, clearing);
criterion_main!(benches);
