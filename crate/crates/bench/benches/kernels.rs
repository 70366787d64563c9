//! Benchmarks for the kernels that dominate training time: batched matmul,
//! same-padded convolution (forward and backward), the CSA forward pass,
//! and DTW.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use csa_bench::{random_tensor, random_tensor_f64};
use csa_core::csa::{AttnUpdate, CsaDims, CsaModule};
use csa_core::eval::dtw_distance;
use csa_core::nn::ParamStore;
use csa_core::tensor::Tape;

fn bench_matmul(c: &mut Criterion) {
    // The projection shape of the full-size model: [16, 100, 128] x [128, 64]
    let a = random_tensor(&[16, 100, 128], 1);
    let b = random_tensor(&[128, 64], 2);
    c.bench_function("matmul_16x100x128_by_128x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let av = tape.constant(a.clone());
            let bv = tape.constant(b.clone());
            black_box(tape.matmul(av, bv).unwrap());
        })
    });
}

fn bench_conv_forward_backward(c: &mut Criterion) {
    // Second conv block of the full backbone: 128 -> 256 channels, k=5
    let x = random_tensor(&[16, 128, 100], 3);
    let kernel = random_tensor(&[256, 128, 5], 4);
    let bias = random_tensor(&[256], 5);
    c.bench_function("conv1d_same_fwd_bwd_block2", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let kv = tape.leaf(kernel.clone(), true);
            let bv = tape.leaf(bias.clone(), true);
            let y = tape.conv1d_same(xv, kv, bv).unwrap();
            let loss = tape.sum_all(y);
            tape.backward(loss).unwrap();
            black_box(tape.grad(kv).is_some());
        })
    });
}

fn bench_csa_forward(c: &mut Criterion) {
    let dims = CsaDims {
        f: 128,
        f_a: 64,
        c: 4,
        t: 100,
    };
    let mut store = ParamStore::<f32>::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    use rand::SeedableRng;
    let mut module = CsaModule::new(&mut store, &mut rng, dims, AttnUpdate::Latest, true).unwrap();
    let l = random_tensor(&[16, 100, 128], 8);
    let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
    c.bench_function("csa_forward_train_b16_t100_f128", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape, false);
            let lv = tape.constant(l.clone());
            black_box(
                module
                    .forward_train(&mut tape, &binding, lv, &labels)
                    .unwrap(),
            );
        })
    });
}

fn bench_dtw(c: &mut Criterion) {
    let a = random_tensor_f64(&[6, 100], 9);
    let b = random_tensor_f64(&[6, 100], 10);
    c.bench_function("dtw_v6_t100", |bench| {
        bench.iter(|| black_box(dtw_distance(&a, &b).unwrap()))
    });
}

fn config() -> Criterion {
    Criterion::default()
        .sample_size(10)
        .measurement_time(Duration::from_secs(3))
        .warm_up_time(Duration::from_secs(1))
}

criterion_group! {
    name = benches;
    config = config();
    targets = bench_matmul, bench_conv_forward_backward, bench_csa_forward, bench_dtw
}
criterion_main!(benches);
