//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use poseflow::flow::{FlowConfig, FlowModel, Init};
use poseflow::rotation::{rotation_from_rotvec, RawRotation6D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Full-size model with small random hypernet weights.
pub fn full_model(seed: u64) -> FlowModel {
    FlowModel::new(FlowConfig::default(), Init::Random { gain: 0.1 }, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn gaussian_batch(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng))
}

pub fn raw_joints(n: usize, seed: u64) -> Vec<RawRotation6D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let r = rotation_from_rotvec(&v).to_raw();
            RawRotation6D::new(r.a1.map(|x| x * 1.3), [r.a2[0] + 0.2 * r.a1[0], r.a2[1] + 0.2 * r.a1[1], r.a2[2] + 0.2 * r.a1[2]])
        })
        .collect()
}
