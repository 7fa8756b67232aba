use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use prefaudit_core::fe_glm::{fit_poisson_fe, FitOptions, FixedEffect, ModelSpec};
use prefaudit_core::panel::lag_covariates;
use prefaudit_core::synthetic::simulate_panel;
use prefaudit_core::SimulationConfig;

fn two_way_poisson(c: &mut Criterion) {
    let mut group = c.benchmark_group("two_way_poisson");
    group.sample_size(10);
    for (products, days) in [(200, 60), (500, 200), (2000, 120)] {
        let cfg = SimulationConfig {
            n_products: products,
            n_days: days,
            ..SimulationConfig::with_seed(1)
        };
        let panel = lag_covariates(&simulate_panel(&cfg).unwrap().0, 1).unwrap();
        let design = ModelSpec::coo(FixedEffect::Product).design(&panel).unwrap();
        let rows = design.y.len();
        group.bench_with_input(BenchmarkId::from_parameter(rows), &design, |b, d| {
            b.iter(|| fit_poisson_fe(d, &FitOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn simulate(c: &mut Criterion) {
    let cfg = SimulationConfig::with_seed(2);
    c.bench_function("simulate_500x200", |b| b.iter(|| simulate_panel(&cfg).unwrap()));
}

criterion_group!(benches, two_way_poisson, simulate);
criterion_main!(benches);
