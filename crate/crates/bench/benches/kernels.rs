use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use whiskers::fixtures::{benchmark_map, golden};
use whiskers::fourier::{sd_solve_map, FrequencyVector, DEFAULT_DIVISOR_FLOOR};
use whiskers::jet::jet_compose;
use whiskers::{solve_to_order, EngineOptions};
use whiskers_bench::{dense_series, solved_benchmark};

fn series_product(c: &mut Criterion) {
    let mut g = c.benchmark_group("series_product");
    for cap in [16u32, 32, 64] {
        let a = dense_series(1, cap, 0.8);
        let b = dense_series(1, cap, 0.7);
        g.bench_with_input(BenchmarkId::new("d1", cap), &cap, |bch, _| bch.iter(|| black_box(&a).mul_truncated(black_box(&b))));
    }
    let a = dense_series(2, 12, 0.8);
    let b = dense_series(2, 12, 0.7);
    g.bench_function("d2/12", |bch| bch.iter(|| black_box(&a).mul_truncated(black_box(&b))));
    g.finish();
}

fn small_divisor_solve(c: &mut Criterion) {
    let freq = FrequencyVector::new(vec![golden()], vec![]);
    let mut h = dense_series(1, 64, 0.8);
    h.set_term(vec![0], 0.0.into());
    c.bench_function("sd_solve_map/64", |bch| {
        bch.iter(|| sd_solve_map(black_box(&h), &freq, DEFAULT_DIVISOR_FLOOR).unwrap())
    });
}

fn compose(c: &mut Criterion) {
    let (model, k) = solved_benchmark(5, 24);
    let f = model.full_jets(k.deg());
    c.bench_function("jet_compose/benchmark_j5", |bch| bch.iter(|| jet_compose(black_box(&f), black_box(&k), None).unwrap()));
}

fn solve(c: &mut Criterion) {
    let model = benchmark_map(24);
    let opts = EngineOptions::default();
    c.bench_function("solve_to_order/benchmark_j5", |bch| {
        bch.iter(|| solve_to_order(black_box(&model), 5, &opts).unwrap())
    });
}

criterion_group!(benches, series_product, small_divisor_solve, compose, solve);
criterion_main!(benches);
