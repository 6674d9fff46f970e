use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use csalnet_core::metrics::{evaluate_all, EvalOptions, FixationSet, FrameEval};
use csalnet_core::model::forward_batch;
use csalnet_core::nn::{kernels, ConvGeometry, Mode};
use csalnet_core::rng::seeded;
use csalnet_core::{build_model, ModelConfig, SaliencyMap, Tensor};
use rand::Rng as _;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let g = ConvGeometry { kernel: 3, stride: 1, padding: 1 };
    let mut group = c.benchmark_group("conv3x3");
    for (ch, size) in [(8usize, 64usize), (32, 16), (64, 8)] {
        let x = random(&[16, ch, size, size], 1);
        let w = random(&[ch, ch, 3, 3], 2);
        let b = random(&[ch], 3);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{ch}ch_{size}px")), &(), |bench, _| {
            bench.iter(|| kernels::conv2d(&x, &w, &b, g).unwrap())
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let net = build_model(&ModelConfig::desk(64)).unwrap();
    let images = random(&[16, 3, 64, 64], 4).map(|v| v + 0.5);
    let ctx = vec![1usize; 16];
    let seeds: Vec<u64> = (0..16).collect();
    c.bench_function("forward_eval_batch16_64px", |b| {
        b.iter(|| forward_batch(&net, images.clone(), Some(&ctx), Mode::Eval, &seeds).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = seeded(5);
    let pool = Arc::new(FixationSet::new(64, 64, (0..4000).map(|_| (rng.gen_range(0..64), rng.gen_range(0..64))).collect()).unwrap());
    let frames: Vec<FrameEval> = (0..32)
        .map(|i| FrameEval {
            id: format!("f{i}"),
            pred: SaliencyMap::new(64, 64, (0..4096).map(|_| rng.gen::<f64>()).collect()).unwrap(),
            gt: SaliencyMap::new(64, 64, (0..4096).map(|_| rng.gen::<f64>()).collect()).unwrap(),
            fixations: FixationSet::new(64, 64, (0..6).map(|_| (rng.gen_range(0..64), rng.gen_range(0..64))).collect()).unwrap(),
            other: pool.clone(),
        })
        .collect();
    let base = SaliencyMap::new(64, 64, vec![1.0 / 4096.0; 4096]).unwrap();
    c.bench_function("evaluate_all_32_frames", |b| {
        b.iter(|| evaluate_all("bench", &frames, &base, &EvalOptions::default()).unwrap())
    });
}

criterion_group!(benches, conv, model, metrics);
criterion_main!(benches);
