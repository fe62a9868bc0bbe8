use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use wlasso_bench::{ar1_gram, problem};
use wlasso_core::analysis::{
    compatibility_constant, default_m2, f2_factor_with, glm_gif_lower_bounds_with, simple_gif,
    ConeSpec, FactorOptions, Phi,
};
use wlasso_core::{FamilyKind, GlmFamily};

fn enumeration(c: &mut Criterion) {
    let mut group = c.benchmark_group("enumeration");
    group.sample_size(10);
    for p in [6, 8, 10] {
        let sigma = ar1_gram(p, 0.5, p as u64);
        let cone = ConeSpec::new(3.0, vec![0, 1], p).unwrap();
        group.bench_with_input(BenchmarkId::new("kappa", p), &p, |b, _| {
            b.iter(|| compatibility_constant(&sigma, &cone).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("f0_phi2", p), &p, |b, _| {
            b.iter(|| simple_gif(&sigma, &cone, Phi::Q { q: 2.0 }).unwrap())
        });
    }
    group.finish();
}

fn search(c: &mut Criterion) {
    let mut group = c.benchmark_group("search");
    group.sample_size(10);
    let options = FactorOptions {
        restarts: 16,
        ..FactorOptions::default()
    };
    for p in [50, 200] {
        let sigma = ar1_gram(p, 0.5, 7);
        let cone = ConeSpec::new(3.0, (0..5).collect(), p).unwrap();
        group.bench_with_input(BenchmarkId::new("f2", p), &p, |b, _| {
            b.iter(|| f2_factor_with(&sigma, &cone, &options).unwrap())
        });
    }
    let (data, beta) = problem(FamilyKind::Logistic, 200, 50, 3, 4);
    let family = GlmFamily::logistic();
    let cone = ConeSpec::new(3.0, vec![0, 1, 2], 50).unwrap();
    let m2 = default_m2(&data, &family);
    group.bench_function("glm_factors/logistic/200x50", |b| {
        b.iter(|| glm_gif_lower_bounds_with(&data, &family, &beta, &cone, m2, &options).unwrap())
    });
    group.finish();
}

criterion_group!(benches, enumeration, search);
criterion_main!(benches);
