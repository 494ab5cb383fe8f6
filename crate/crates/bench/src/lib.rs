//! Shared input builders for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spvox_core::coords::PointTensor;
use spvox_core::nn::FeatureMatrix;

/// A reproducible random scan: `n` points over a slab, 4 feature channels.
pub fn synthetic_points(n: usize, seed: u64) -> PointTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<[f32; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-2.0..2.0),
            ]
        })
        .collect();
    let mut feats = FeatureMatrix::zeros(n, 4);
    for v in feats.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    PointTensor::new(positions, feats, vec![0; n])
}

// Re-exported so benches depend on one crate path.
pub use rand_chacha;
