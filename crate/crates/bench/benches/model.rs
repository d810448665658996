use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use vtfpar_bench::desk_fixture;
use vtfpar_core::train::train;
use vtfpar_core::TrainConfig;

fn forward(c: &mut Criterion) {
    let (model, data) = desk_fixture(14);
    let frames = data.train[0].frame_refs();
    c.bench_function("forward 6 frames", |b| b.iter(|| black_box(model.forward(&frames).unwrap())));
}

fn train_step(c: &mut Criterion) {
    let (model, data) = desk_fixture(56);
    let cfg = TrainConfig {
        max_steps: Some(1),
        ..TrainConfig::default()
    };
    c.bench_function("train step batch 8", |b| {
        b.iter(|| {
            let mut m = model.clone();
            black_box(train(&mut m, &data.train, None, &cfg, |_, _| Ok(())).unwrap())
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward, train_step
}
criterion_main!(benches);
