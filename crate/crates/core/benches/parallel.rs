use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pseudomine::dataset::{generate_scenes, sample_sparse, GenConfig};
use pseudomine::entropy::{fit_entropy_model, EntropyConfig};
use pseudomine::pipeline::{run_loop, RunConfig};
use pseudomine::{rotated_iou, Exec, RotatedBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STRATEGIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn small_config() -> GenConfig {
    GenConfig {
        scenes: 24,
        width: 240,
        height: 240,
        density: 24,
        ..GenConfig::benchmark()
    }
}

fn random_pairs(n: usize) -> Vec<(RotatedBox, RotatedBox)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draw = |rng: &mut ChaCha8Rng| {
        RotatedBox::new(
            rng.random_range(0.0..20.0),
            rng.random_range(0.0..20.0),
            rng.random_range(2.0..15.0),
            rng.random_range(2.0..15.0),
            rng.random_range(-3.2..3.2),
        )
        .unwrap()
    };
    (0..n).map(|_| (draw(&mut rng), draw(&mut rng))).collect()
}

fn bench_generate(c: &mut Criterion) {
    let cfg = small_config();
    let mut group = c.benchmark_group("generate_scenes");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_scenes(black_box(&cfg), 3, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_iou(c: &mut Criterion) {
    let pairs = random_pairs(20_000);
    let mut group = c.benchmark_group("rotated_iou_batch");
    for (name, exec) in STRATEGIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(black_box(&pairs), |(a, b)| rotated_iou(a, b)))
        });
    }
    group.finish();
}

fn bench_mining(c: &mut Criterion) {
    let full = generate_scenes(&small_config(), 3, Exec::Parallel).unwrap();
    let sparse = full.with_manifest(sample_sparse(&full.manifest, 0.1, 3).unwrap());
    let model = fit_entropy_model(&sparse, EntropyConfig::default()).unwrap();
    let cfg = RunConfig {
        seed: 3,
        epochs: 2,
        ..RunConfig::default()
    };
    let mut group = c.benchmark_group("mining_run");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_loop(&sparse, Some(&model), &cfg, exec, |_, _| Ok(())).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_generate, bench_iou, bench_mining);
criterion_main!(benches);
