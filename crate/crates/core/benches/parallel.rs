use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use itrain_core::dataset::{Batch, BatchItem, Example};
use itrain_core::model::{forward_backward, mse, ModelParams, Objective};
use itrain_core::par::Exec;
use itrain_core::rng::TrainRng;

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn points(n: usize, rng: &mut TrainRng) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let x = rng.uniform_range(-1.0, 1.0);
            Example { x, y: (3.0 * x).sin() }
        })
        .collect()
}

fn forward_backward_batches(c: &mut Criterion) {
    let mut rng = TrainRng::seed_from_u64(0);
    let model = ModelParams::mlp(64, 0.0, &mut rng);
    let mut group = c.benchmark_group("forward_backward");
    for n in [32, 256, 2048, 16384] {
        let batch = Batch {
            items: points(n, &mut rng)
                .into_iter()
                .map(|e| BatchItem {
                    x: e.x,
                    y: e.y,
                    source: Arc::from("bench"),
                    generation: 0,
                })
                .collect(),
        };
        group.throughput(Throughput::Elements(n as u64));
        for (name, exec) in EXECS {
            group.bench_with_input(BenchmarkId::new(name, n), &batch, |b, batch| {
                b.iter(|| forward_backward(Objective::Mse, black_box(&model), batch, None, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let mut rng = TrainRng::seed_from_u64(1);
    let model = ModelParams::mlp(64, 0.0, &mut rng);
    let mut group = c.benchmark_group("evaluate");
    for n in [128, 4096, 65536] {
        let data = points(n, &mut rng);
        group.throughput(Throughput::Elements(n as u64));
        for (name, exec) in EXECS {
            group.bench_with_input(BenchmarkId::new(name, n), &data, |b, data| {
                b.iter(|| mse(black_box(&model), data, exec))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, forward_backward_batches, evaluation);
criterion_main!(benches);
