use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sad_bench::{model, pattern};
use sad_core::candidates::{refresh_with_table, topk_convergence};
use sad_core::grad::backward;
use sad_core::render::render_image;
use sad_core::{MergeMode, PropagationParams, RefreshMode, ScoreTable};

fn propagation(c: &mut Criterion) {
    let mut g = c.benchmark_group("propagation");
    g.sample_size(10);
    for side in [128usize, 256, 512] {
        let (store, field) = model(side, side * side / 16, 1);
        let table = ScoreTable::new(&store, 1.0 / side as f64);
        g.bench_with_input(BenchmarkId::new("warm_pass", side), &side, |b, _| {
            let mut f = field.clone();
            b.iter(|| refresh_with_table(&table, &mut f, RefreshMode::WarmStart, 1, PropagationParams::default()))
        });
        g.bench_with_input(BenchmarkId::new("full_16", side), &side, |b, _| {
            let mut f = field.clone();
            b.iter(|| refresh_with_table(&table, &mut f, RefreshMode::Full, 16, PropagationParams::default()))
        });
    }
    g.finish();
}

fn render_and_backward(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit_step");
    g.sample_size(10);
    let side = 256;
    let target = pattern(side, side);
    let (store, field) = model(side, 4000, 2);
    g.bench_function("render_256_4k", |b| b.iter(|| black_box(render_image(&store, &field).unwrap())));
    for (name, mode) in [("backward_deterministic", MergeMode::Deterministic), ("backward_fast", MergeMode::Fast)] {
        g.bench_function(name, |b| b.iter(|| black_box(backward(&store, &field, &target, mode, 16).unwrap())));
    }
    g.finish();
}

fn convergence(c: &mut Criterion) {
    let mut g = c.benchmark_group("topk_convergence");
    g.sample_size(10);
    g.bench_function("256_4k_12_passes", |b| b.iter(|| black_box(topk_convergence(256, 256, 4096, &[12], 1, 256, 0).unwrap())));
    g.finish();
}

criterion_group!(benches, propagation, render_and_backward, convergence);
criterion_main!(benches);
