//! Microbenchmarks for the hot kernels: conv forward/backward, one PGD step,
//! and elementwise quantization.

use criterion::{criterion_group, criterion_main, Criterion};

use psl_core::attacks::{pgd, AttackConfig};
use psl_core::model::{build, Activation, Arch, TapMap};
use psl_core::quant::quantize;
use psl_core::rng::rng_from_seed;
use psl_core::tensor::{Graph, Tensor};

fn random_batch(n: usize, c: usize, hw: usize, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let data = (0..n * c * hw * hw).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
    Tensor::new(vec![n, c, hw, hw], data).unwrap()
}

fn bench_conv(c: &mut Criterion) {
    let net = build(Arch::TinyCnn, 1, 2, Activation::Relu, 0).unwrap();
    let batch = random_batch(16, 1, 8, 1);
    let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();

    c.bench_function("forward_tiny_cnn_16x8x8", |b| {
        b.iter(|| net.logits(&batch, &TapMap::new()).unwrap())
    });

    c.bench_function("forward_backward_tiny_cnn_16x8x8", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.leaf(batch.clone(), true);
            let binding = net.bind(&mut g, false);
            let out = net.forward_bound(&mut g, &binding, x, &TapMap::new()).unwrap();
            let loss = g.softmax_cross_entropy(out.logits, &labels).unwrap();
            g.backward(loss).unwrap();
        })
    });
}

fn bench_pgd_step(c: &mut Criterion) {
    let net = build(Arch::TinyCnn, 1, 2, Activation::Relu, 0).unwrap();
    let batch = random_batch(16, 1, 8, 2);
    let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
    let cfg = AttackConfig::new(4, 1, 3);
    c.bench_function("pgd_single_step_16x8x8", |b| {
        b.iter(|| pgd(&net, &TapMap::new(), &batch, &labels, &cfg).unwrap())
    });
}

fn bench_quantize(c: &mut Criterion) {
    let x = random_batch(16, 8, 8, 4);
    c.bench_function("quantize_8192_elems", |b| b.iter(|| quantize(&x, 8.0).unwrap()));
}

criterion_group!(benches, bench_conv, bench_pgd_step, bench_quantize);
criterion_main!(benches);
