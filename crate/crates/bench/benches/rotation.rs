use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use poseflow::rotation::{gram_schmidt, inverse_gram_schmidt, rotvec_from_6d, AugmentParams};
use poseflow_bench::raw_joints;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rotations(c: &mut Criterion) {
    let raw = raw_joints(1024, 5);
    let ortho: Vec<_> = raw.iter().map(|r| gram_schmidt(r).unwrap()).collect();
    let params = AugmentParams::default();
    let mut g = c.benchmark_group("rotation");
    g.throughput(Throughput::Elements(raw.len() as u64));
    g.bench_function("gram_schmidt", |b| b.iter(|| raw.iter().map(|r| gram_schmidt(black_box(r)).unwrap()).collect::<Vec<_>>()));
    g.bench_function("inverse_gram_schmidt", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        b.iter(|| ortho.iter().map(|r| inverse_gram_schmidt(r, &params, &mut rng)).collect::<Vec<_>>())
    });
    g.bench_function("rotvec_from_6d", |b| b.iter(|| ortho.iter().map(|r| rotvec_from_6d(black_box(r))).collect::<Vec<_>>()));
    g.finish();
}

criterion_group!(benches, rotations);
criterion_main!(benches);
