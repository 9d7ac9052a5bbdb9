use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sfw_core::{
    build_scenario, default_initial, run, solve_inner, FunctionalModel, InnerSettings, ScenarioConfig, SfwConfig,
};

fn desk(c: &mut Criterion) {
    let sc = build_scenario(&ScenarioConfig::desk()).expect("desk scenario");
    let model = sc.solver_model();
    let p0 = default_initial(&sc.kernel, &sc.mu, &sc.nu).expect("initial plan");
    let phi = model.linear_derivative(&p0);

    let mut g = c.benchmark_group("desk_300x300");
    g.bench_function("congestion_derivative", |b| b.iter(|| model.linear_derivative(black_box(&p0))));
    g.bench_function("congestion_value", |b| b.iter(|| model.value(black_box(&p0))));
    g.bench_function("inner_solve_cold_tol1e-4", |b| {
        b.iter(|| solve_inner(&sc.kernel, black_box(&phi), &sc.mu, &sc.nu, &InnerSettings::default()).unwrap())
    });
    let tight = InnerSettings { tol: 1e-8, max_iters: 1000, ..InnerSettings::default() };
    g.bench_function("inner_solve_cold_tol1e-8", |b| {
        b.iter(|| solve_inner(&sc.kernel, black_box(&phi), &sc.mu, &sc.nu, &tight).unwrap())
    });
    let ten = SfwConfig { max_outer: 10, outer_tol: 1e-14, ..SfwConfig::default() };
    g.bench_function("sfw_10_outer_steps", |b| b.iter(|| run(black_box(&p0), &sc.kernel, &model, &ten).unwrap()));
    g.finish();
}

fn scaling(c: &mut Criterion) {
    let mut g = c.benchmark_group("inner_solve_by_grid");
    g.sample_size(10);
    for (nx, ny) in [(10, 8), (20, 15), (40, 27)] {
        let sc = build_scenario(&ScenarioConfig { nx, ny, ..ScenarioConfig::default() }).expect("scenario");
        let model = sc.solver_model();
        let p0 = default_initial(&sc.kernel, &sc.mu, &sc.nu).expect("initial plan");
        let phi = model.linear_derivative(&p0);
        g.bench_function(format!("{nx}x{ny}"), |b| {
            b.iter(|| solve_inner(&sc.kernel, black_box(&phi), &sc.mu, &sc.nu, &InnerSettings::default()).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, desk, scaling);
criterion_main!(benches);
