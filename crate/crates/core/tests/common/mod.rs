//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use softreg::RigidTransform;

/// Weighted squared residual `Σ w ‖R x + t − y‖²`.
pub fn objective(src: &[Point3<f64>], tgt: &[Point3<f64>], w: &[f64], r: &Matrix3<f64>, t: &Vector3<f64>) -> f64 {
    src.iter()
        .zip(tgt)
        .zip(w)
        .map(|((x, y), wi)| wi * (r * x.coords + t - y.coords).norm_squared())
        .sum()
}

/// Best translation for a fixed rotation: the weighted centroid offset.
pub fn best_translation(src: &[Point3<f64>], tgt: &[Point3<f64>], w: &[f64], r: &Matrix3<f64>) -> Vector3<f64> {
    let total: f64 = w.iter().sum();
    let mx = src.iter().zip(w).map(|(p, wi)| p.coords * *wi).sum::<Vector3<f64>>() / total;
    let my = tgt.iter().zip(w).map(|(p, wi)| p.coords * *wi).sum::<Vector3<f64>>() / total;
    my - r * mx
}

fn rotation_cost(src: &[Point3<f64>], tgt: &[Point3<f64>], w: &[f64], q: &UnitQuaternion<f64>) -> f64 {
    let r = *q.to_rotation_matrix().matrix();
    objective(src, tgt, w, &r, &best_translation(src, tgt, w, &r))
}

/// Minimum of the weighted objective by exhaustive search over a quaternion
/// lattice followed by a shrinking pattern search in the tangent space. Uses
/// no SVD, so it is independent of the solver under test.
pub fn grid_search(src: &[Point3<f64>], tgt: &[Point3<f64>], w: &[f64]) -> (RigidTransform, f64) {
    const STEPS: i32 = 12;
    let mut best = (UnitQuaternion::identity(), f64::INFINITY);
    for a in 0..=STEPS {
        for b in -STEPS..=STEPS {
            for c in -STEPS..=STEPS {
                for d in -STEPS..=STEPS {
                    let v = nalgebra::Vector4::new(b as f64, c as f64, d as f64, a as f64);
                    if v.norm() == 0.0 {
                        continue;
                    }
                    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(v));
                    let e = rotation_cost(src, tgt, w, &q);
                    if e < best.1 {
                        best = (q, e);
                    }
                }
            }
        }
    }
    let mut step = 0.1;
    while step > 1e-13 {
        let mut improved = false;
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut delta = Vector3::zeros();
                delta[axis] = sign * step;
                let q = UnitQuaternion::from_scaled_axis(delta) * best.0;
                let e = rotation_cost(src, tgt, w, &q);
                if e < best.1 {
                    best = (q, e);
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    let r = *best.0.to_rotation_matrix().matrix();
    (RigidTransform::new(r, best_translation(src, tgt, w, &r)), best.1)
}

/// Rotation about a uniformly random axis by an angle uniform in `[0, max_angle]`
/// and a translation uniform in the cube of half-width `max_t`.
pub fn random_se3(rng: &mut impl Rng, max_angle: f64, max_t: f64) -> RigidTransform {
    let axis = loop {
        let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        if v.norm() > 1e-3 && v.norm() <= 1.0 {
            break v;
        }
    };
    let angle = rng.random_range(0.0..=max_angle);
    let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
    RigidTransform::new(*r.matrix(), Vector3::from_fn(|_, _| rng.random_range(-max_t..max_t)))
}

pub fn random_points(rng: &mut impl Rng, n: usize, half: f64) -> Vec<Point3<f64>> {
    (0..n)
        .map(|_| Point3::from(Vector3::from_fn(|_, _| rng.random_range(-half..half))))
        .collect()
}
