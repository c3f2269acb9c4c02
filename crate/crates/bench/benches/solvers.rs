use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use obsw_bench::{desk_bundle, reflection_inputs, SEED};
use obsw_core::instances::desk2;
use obsw_core::oracle::DEFAULT_POLICY_BUDGET;
use obsw_core::*;

fn reflection(c: &mut Criterion) {
    let mut group = c.benchmark_group("reflect");
    for d in [2, 3, 5] {
        let (costs, ys) = reflection_inputs(d, 1024);
        group.throughput(Throughput::Elements(ys.len() as u64));
        group.bench_with_input(BenchmarkId::from_parameter(d), &ys, |b, ys| {
            b.iter(|| {
                for y in ys {
                    black_box(reflect(black_box(y), &costs).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let spec = desk2();
    let grid = TimeGrid::from_horizon(&spec.horizon);
    let mut group = c.benchmark_group("simulate_forward");
    group.sample_size(20);
    for n in [10_000, 100_000] {
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| simulate_forward(&spec, &grid, n, SEED).unwrap())
        });
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let (spec, bundle) = desk_bundle(20_000);
    let mut group = c.benchmark_group("backward");
    group.sample_size(20);
    group.bench_function("reflected/20k", |b| b.iter(|| solve_reflected(&bundle, &spec, 2).unwrap()));
    group.bench_function("penalized_n5/20k", |b| b.iter(|| solve_penalized(&bundle, &spec, 5, 2).unwrap()));
    group.finish();
}

fn lattice(c: &mut Criterion) {
    let spec = desk2();
    let mut group = c.benchmark_group("oracle");
    group.bench_function("dp_solve/100", |b| b.iter(|| dp_solve(&spec, black_box(100)).unwrap()));
    group.sample_size(10);
    group.bench_function("enumerate/6", |b| {
        b.iter(|| enumerate_strategies(&spec, 6, DEFAULT_POLICY_BUDGET).unwrap())
    });
    group.finish();
}

criterion_group!(benches, reflection, forward, backward, lattice);
criterion_main!(benches);
