use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mi_core::envs::{make_random_mdp, TabularPolicy};
use mi_core::nn::{Activation, Mlp};
use mi_core::oracle::{exact_occupancy, hamming, wasserstein1};
use mi_core::rng::seeded;
use rand::Rng as _;
use std::hint::black_box;

fn mlp(c: &mut Criterion) {
    let mut rng = seeded(0);
    let net = Mlp::new(&[7, 64, 64, 64, 1], Activation::Relu, &mut rng).unwrap();
    let x: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("mlp_forward_64x3", |b| b.iter(|| net.forward(black_box(&x)).unwrap()));
    c.bench_function("mlp_forward_backward_64x3", |b| {
        b.iter(|| {
            let cache = net.forward_cached(black_box(&x)).unwrap();
            let mut g = net.grad_buffer();
            net.backward_into(&cache, &[1.0], &mut g);
            net.finish(g)
        })
    });
}

fn occupancy(c: &mut Criterion) {
    let mut group = c.benchmark_group("exact_occupancy");
    for ns in [4usize, 16, 64] {
        let mut rng = seeded(ns as u64);
        let mdp = make_random_mdp(ns, 4, &mut rng, 0.0).unwrap();
        let pi = TabularPolicy::random(ns, 4, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(ns), &ns, |b, _| {
            b.iter(|| exact_occupancy(black_box(&mdp), &pi, 0.9).unwrap())
        });
    }
    group.finish();
}

fn w1(c: &mut Criterion) {
    let mut group = c.benchmark_group("wasserstein1_hamming");
    for ns in [4usize, 8, 16] {
        let mut rng = seeded(100 + ns as u64);
        let mdp = make_random_mdp(ns, 2, &mut rng, 0.0).unwrap();
        let p = exact_occupancy(&mdp, &TabularPolicy::random(ns, 2, &mut rng), 0.9).unwrap();
        let q = exact_occupancy(&mdp, &TabularPolicy::random(ns, 2, &mut rng), 0.9).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(ns * 2), &ns, |b, _| {
            b.iter(|| wasserstein1(black_box(&p), black_box(&q), hamming).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, mlp, occupancy, w1);
criterion_main!(benches);
