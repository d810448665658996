use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use vtfpar_bench::random_tensor;
use vtfpar_core::nn::MultiHeadAttention;
use vtfpar_core::{ParamStore, Tape};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 197] {
        let a = random_tensor(&[n, 64], 1);
        let b = random_tensor(&[64, 64], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let x = tape.constant(a.clone());
                let w = tape.constant(b.clone());
                black_box(tape.matmul(x, w).unwrap());
            })
        });
    }
    group.finish();
}

fn softmax(c: &mut Criterion) {
    let scores = random_tensor(&[1, 4, 80, 80], 3);
    c.bench_function("softmax 4x80x80", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.constant(scores.clone());
            black_box(tape.softmax(x, 3).unwrap());
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", 64, 4, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let tokens = random_tensor(&[1, 80, 64], 5);
    c.bench_function("attention forward+backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.constant(tokens.clone());
            let y = attn.forward(&mut tape, &store, x, None).unwrap();
            let loss = tape.sum(y).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

criterion_group!(benches, matmul, softmax, attention);
criterion_main!(benches);
