//! Rayon against the sequential fallback for mini-batch gradients and for
//! batched inference. Both modes produce bit-identical results.

use adagtcn::data::{SessionSample, SyntheticConfig};
use adagtcn::model::{Model, ModelConfig};
use adagtcn::train::{batch_gradient, predict_all, ExecMode};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn samples(n: usize) -> Vec<SessionSample> {
    let cfg = SyntheticConfig {
        sessions: n,
        participants: 3,
        ..SyntheticConfig::default()
    };
    cfg.generate(1).unwrap().1
}

fn gradients(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default()).unwrap();
    let data = samples(16);
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for batch in [4, 16] {
        let refs: Vec<&SessionSample> = data.iter().take(batch).collect();
        let seeds: Vec<u64> = (0..batch as u64).collect();
        for (name, mode) in [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, batch), &refs, |b, refs| {
                b.iter(|| batch_gradient(&model, refs, &seeds, 0.0, mode).unwrap())
            });
        }
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default()).unwrap();
    let data = samples(64);
    let mut group = c.benchmark_group("predict_all");
    group.sample_size(10);
    for (name, mode) in [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)] {
        group.bench_function(name, |b| b.iter(|| predict_all(&model, &data, mode).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, gradients, inference);
criterion_main!(benches);
