use std::hint::black_box;

use candle_core::{DType, Device};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dtmi_bench::{toy_batch, toy_net};
use dtmi_core::nn::Ctx;
use dtmi_core::training::Trainer;
use dtmi_core::{RunConfig, Variant};

fn inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(20);
    for variant in [Variant::Full, Variant::CmiV2, Variant::RgbOnly] {
        let net = toy_net(variant);
        for n in [1, 4] {
            let batch = toy_batch(n);
            group.bench_with_input(BenchmarkId::new(variant.name(), n), &batch, |b, batch| {
                b.iter(|| {
                    net.forward(black_box(&batch.rgb), black_box(&batch.depth), &Ctx::eval())
                        .unwrap()
                })
            });
        }
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let cfg = RunConfig::default();
    let mut trainer = Trainer::new(&cfg, DType::F32, &Device::Cpu).unwrap();
    let batch = toy_batch(cfg.batch_size);
    group.bench_function("full/4", |b| {
        b.iter(|| trainer.train_step(black_box(&batch), cfg.lr).unwrap())
    });
    group.finish();
}

criterion_group!(benches, inference, training_step);
criterion_main!(benches);
