use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedcl::config::preset;
use fedcl::data::generate_synthetic;
use fedcl::nn::{infer_with, Architecture, LayerConfig, ModelParams};
use fedcl::{run_experiment, sweep, RunOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn experiment(c: &mut Criterion) {
    let mut cfg = preset("exp3-exemplars-flwf2").unwrap();
    cfg.rounds = 2;
    cfg.clients[0].tasks[0].rounds = 1;
    cfg.clients[0].tasks[1].rounds = 1;
    cfg.clients[1].tasks[0].rounds = 2;
    let mut group = c.benchmark_group("experiment");
    group.sample_size(10);
    for parallel in [false, true] {
        group.bench_with_input(BenchmarkId::new("two_rounds", label(parallel)), &parallel, |b, &p| {
            b.iter(|| run_experiment(&cfg, RunOptions { parallel: p }).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sweep_4_seeds", label(parallel)), &parallel, |b, &p| {
            b.iter(|| sweep(&cfg, &[1, 2, 3, 4], RunOptions { parallel: p }).unwrap())
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let pool = generate_synthetic(6, 200, 1152, 2.5, 1).unwrap();
    let batch = pool.to_batch();
    let arch = Architecture::new(9, 128, 6, LayerConfig::har_cnn(6), 0.5).unwrap();
    let params = ModelParams::glorot(&arch, &mut ChaCha8Rng::seed_from_u64(1));
    let rows: Vec<usize> = (0..64).collect();
    let inputs = batch.select(&rows);
    let mut group = c.benchmark_group("cnn_inference_64");
    group.sample_size(10);
    for parallel in [false, true] {
        group.bench_with_input(BenchmarkId::from_parameter(label(parallel)), &parallel, |b, &p| {
            b.iter(|| infer_with(&params, inputs.features(), p).unwrap())
        });
    }
    group.finish();
}

fn label(parallel: bool) -> &'static str {
    if parallel {
        "parallel"
    } else {
        "sequential"
    }
}

criterion_group!(benches, experiment, inference);
criterion_main!(benches);
