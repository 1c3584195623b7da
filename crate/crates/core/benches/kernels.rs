//! Sequential versus rayon-parallel execution of the hot kernels.
//!
//! Each benchmark runs once inside a one-worker pool and once inside a pool
//! with every available core. Results are bit-identical either way; only the
//! wall time differs. Build with `--no-default-features` to compare against
//! the pure sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use modfuse_core::model::{Model, ModelConfig};
use modfuse_core::nn::{conv3d_backward, conv3d_forward};
use modfuse_core::rng::seeded;
use modfuse_core::{par, Tensor};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn pools() -> Vec<(&'static str, usize)> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![("sequential", 1), ("parallel", all)]
}

fn conv(c: &mut Criterion) {
    let x = random(&[8, 16, 16, 16], 1);
    let w = random(&[8, 8, 3, 3, 3], 2);
    let b = random(&[8], 3);
    let y = conv3d_forward(&x, &w, &b, 1, 1).unwrap();
    let mut group = c.benchmark_group("conv3d_16cube_8to8");
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::new("forward", name), |bench| {
            par::with_threads(threads, || bench.iter(|| conv3d_forward(black_box(&x), &w, &b, 1, 1).unwrap()))
        });
        group.bench_function(BenchmarkId::new("backward", name), |bench| {
            par::with_threads(threads, || bench.iter(|| conv3d_backward(black_box(&x), &w, &y, 1, 1).unwrap()))
        });
    }
    group.finish();
}

fn model_step(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let model = Model::build(&cfg, &mut seeded(0)).unwrap();
    let inputs: Vec<Tensor> = (0..cfg.num_modalities).map(|m| random(&[16, 16, 16], 10 + m as u64)).collect();
    let (logits, _) = model.forward_traced(&inputs).unwrap();
    let upstream = random(logits.shape(), 20);
    let mut group = c.benchmark_group("desk_model_16cube");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::new("train_step", name), |bench| {
            par::with_threads(threads, || {
                bench.iter(|| {
                    let (_, trace) = model.forward_traced(black_box(&inputs)).unwrap();
                    let mut grads = model.params().grad_buffers();
                    model.gradients(&trace, &upstream, &mut grads).unwrap();
                    grads
                })
            })
        });
        group.bench_function(BenchmarkId::new("batch_forward_x4", name), |bench| {
            let batch = vec![inputs.clone(); 4];
            par::with_threads(threads, || bench.iter(|| model.forward_batch(black_box(&batch)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, model_step);
criterion_main!(benches);
