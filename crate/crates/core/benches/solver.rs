use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vertex_bounds::baseline::baseline_directional_min;
use vertex_bounds::certified::certified_directional_min;
use vertex_bounds::harness::synth_instance;
use vertex_bounds::solver::{directional_min, exhaustive_vertex_min};

fn threshold_scaling(c: &mut Criterion) {
    let mut group = c.benchmark_group("threshold_sweep");
    for k in [16usize, 64, 256, 1024, 4096] {
        let (dir, bx) = synth_instance(k, 1, 0, 0.5, 1.0).unwrap();
        group.bench_with_input(BenchmarkId::new("fast", k), &k, |b, _| {
            b.iter(|| directional_min(black_box(&dir), black_box(&bx)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("certified", k), &k, |b, _| {
            b.iter(|| certified_directional_min(black_box(&dir), black_box(&bx)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("baseline", k), &k, |b, _| {
            b.iter(|| baseline_directional_min(black_box(&dir), black_box(&bx)).unwrap())
        });
    }
    group.finish();
}

fn exhaustive_oracle(c: &mut Criterion) {
    let mut group = c.benchmark_group("exhaustive_oracle");
    for k in [4usize, 8, 12, 16] {
        let (dir, bx) = synth_instance(k, 2, 0, 0.5, 1.0).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| exhaustive_vertex_min(black_box(&dir), black_box(&bx)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, threshold_scaling, exhaustive_oracle);
criterion_main!(benches);
