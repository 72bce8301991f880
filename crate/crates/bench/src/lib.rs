//! Inputs shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metrack_core::metric::Triplet;
use metrack_core::{GrayFrame, MetricMatrix, RegressionCache, Vector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vector {
    Vector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)).normalize()
}

/// A cache over `n` random unit columns at the identity metric.
pub fn filled_cache(dim: usize, n: usize, capacity: usize, rng: &mut impl Rng) -> (MetricMatrix, RegressionCache) {
    let metric = MetricMatrix::identity(dim);
    let cols = (0..n).map(|_| unit_vector(rng, dim)).collect();
    let cache = RegressionCache::build(&metric, cols, capacity).expect("valid columns");
    (metric, cache)
}

/// Triplets whose negative sits closer than the positive, so PA steps are
/// mostly active.
pub fn hard_triplets(dim: usize, count: usize, rng: &mut impl Rng) -> Vec<Triplet> {
    (0..count)
        .map(|_| {
            let p = unit_vector(rng, dim);
            let near = &p + unit_vector(rng, dim) * 0.5;
            let far = &p + unit_vector(rng, dim) * 0.1;
            Triplet::new(p, near, far).expect("distinct points")
        })
        .collect()
}

pub fn noise_frame(width: usize, height: usize, rng: &mut impl Rng) -> GrayFrame {
    GrayFrame::from_fn(width, height, |_, _| rng.random_range(0.0..1.0)).expect("finite pixels")
}
