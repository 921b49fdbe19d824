//! Fixtures shared by the benchmarks.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softreg::io::{generate_pair, ScenePairSpec};
use softreg::{PointCloud, RigidTransform};

/// `n` points uniform in a 50 m cube.
pub fn random_points(n: usize, seed: u64) -> Vec<Point3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Point3::from(Vector3::from_fn(|_, _| rng.random_range(-25.0..25.0))))
        .collect()
}

/// A default synthetic pair.
pub fn scene_pair(seed: u64) -> (PointCloud, PointCloud, RigidTransform) {
    generate_pair(&ScenePairSpec::default().with_seed(seed)).expect("default spec is valid")
}
