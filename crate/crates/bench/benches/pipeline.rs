use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use softreg::pipeline::{build_pyramids, register_pyramids};
use softreg::sampling::{knn_points, wfps, KdTree};
use softreg::{weighted_kabsch, PipelineConfig, RigidTransform, WeightedCorrespondences};
use softreg_bench::{random_points, scene_pair};

fn kabsch(c: &mut Criterion) {
    let mut g = c.benchmark_group("weighted_kabsch");
    for n in [100, 1000, 10000] {
        let src = random_points(n, 1);
        let tgt = RigidTransform::rot_z_deg(20.0).apply_points(&src);
        let w = vec![1.0; n];
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| weighted_kabsch(&WeightedCorrespondences::new(&src, &tgt, &w).unwrap()).unwrap())
        });
    }
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let pts = random_points(16384, 2);
    let sigma = vec![0.0; pts.len()];
    c.bench_function("wfps 16384 -> 1024", |b| b.iter(|| wfps(black_box(&pts), &sigma, 1024, 0).unwrap()));
    c.bench_function("kdtree build 16384", |b| b.iter(|| KdTree::build(black_box(&pts)).len()));
    let queries = &pts[..1024];
    c.bench_function("knn 1024 x 16 in 16384", |b| b.iter(|| knn_points(&pts, black_box(queries), 16).unwrap()));
}

fn registration(c: &mut Criterion) {
    let cfg = PipelineConfig::default();
    let (src, tgt, _) = scene_pair(7);
    let (sp, tp) = build_pyramids(&src, &tgt, &cfg, None).unwrap();
    let mut g = c.benchmark_group("registration");
    g.sample_size(10);
    g.bench_function("pyramids", |b| b.iter(|| build_pyramids(&src, &tgt, &cfg, None).unwrap()));
    g.bench_function("coarse + fine", |b| b.iter(|| register_pyramids(&sp, &tp, &cfg, None).unwrap()));
    g.finish();
}

criterion_group!(benches, kabsch, sampling, registration);
criterion_main!(benches);
