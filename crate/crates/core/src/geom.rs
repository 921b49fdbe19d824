//! Rigid motions and the confidence-weighted Kabsch solver.

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// A proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized), then translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self::new(*r.matrix(), translation)
    }

    /// Rotation about +z by `deg` degrees.
    pub fn rot_z_deg(deg: f64) -> Self {
        Self::from_axis_angle(Vector3::z(), deg.to_radians(), Vector3::zeros())
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Pointwise `R x + t`; intensities are carried through unchanged.
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().map(|p| self.transform_point(p)).collect(),
            intensity: cloud.intensity.clone(),
        }
    }

    pub fn apply_points(&self, points: &[Point3<f64>]) -> Vec<Point3<f64>> {
        points.iter().map(|p| self.transform_point(p)).collect()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    /// Geodesic angle of the rotation part, in radians.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Maximum deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        gram.abs().max().max((self.rotation.determinant() - 1.0).abs())
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
            && self.orthonormality_error() <= tol
    }

    /// Replaces the rotation by the nearest proper rotation (Frobenius sense).
    pub fn orthonormalized(&self) -> Self {
        Self::new(nearest_rotation(&self.rotation), self.translation)
    }

    /// Row-major `[R | t]`, the layout of KITTI-style pose files.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn from_row_major_3x4(v: &[f64; 12]) -> Self {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self::new(rotation, Vector3::new(v[3], v[7], v[11]))
    }
}

/// Angle of a rotation matrix, `arccos((Tr R − 1)/2)` evaluated as
/// `atan2(‖vee(R − Rᵀ)‖/2, (Tr R − 1)/2)`, which keeps full precision near 0 and π.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    (axis.norm() / 2.0).atan2((r.trace() - 1.0) / 2.0)
}

/// `outer ∘ inner`: the returned motion applies `inner` first.
///
/// Matches the refinement update `R = ΔR R_prev`, `t = ΔR t_prev + Δt`.
pub fn compose(outer: &RigidTransform, inner: &RigidTransform) -> RigidTransform {
    RigidTransform::new(
        outer.rotation * inner.rotation,
        outer.rotation * inner.translation + outer.translation,
    )
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

pub fn apply(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    t.apply(cloud)
}

fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Source/target pairs with non-negative confidences.
#[derive(Debug, Clone, Copy)]
pub struct WeightedCorrespondences<'a> {
    pub source: &'a [Point3<f64>],
    pub target: &'a [Point3<f64>],
    pub weights: &'a [f64],
}

impl<'a> WeightedCorrespondences<'a> {
    pub fn new(
        source: &'a [Point3<f64>],
        target: &'a [Point3<f64>],
        weights: &'a [f64],
    ) -> Result<Self> {
        if source.len() != target.len() || source.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} source, {} target, {} weights",
                source.len(),
                target.len(),
                weights.len()
            )));
        }
        if source.len() < 3 {
            return Err(Error::DegenerateInput(format!(
                "weighted Kabsch needs at least 3 pairs, got {}",
                source.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::DegenerateInput(
                "weights must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            source,
            target,
            weights,
        })
    }

    /// Weighted squared residual of `t` over the pairs.
    pub fn objective(&self, t: &RigidTransform) -> f64 {
        self.source
            .iter()
            .zip(self.target)
            .zip(self.weights)
            .map(|((x, y), w)| w * (y - t.transform_point(x)).norm_squared())
            .sum()
    }
}

/// Closed-form minimizer of `Σ wᵢ ‖yᵢ − (R xᵢ + t)‖²` over proper rigid motions.
pub fn weighted_kabsch(corr: &WeightedCorrespondences<'_>) -> Result<RigidTransform> {
    let w_sum: f64 = corr.weights.iter().sum();
    if !(w_sum > 0.0) {
        return Err(Error::DegenerateInput("weight sum must be positive".into()));
    }

    let mut cs = Vector3::zeros();
    let mut ct = Vector3::zeros();
    for ((x, y), w) in corr.source.iter().zip(corr.target).zip(corr.weights) {
        cs += *w * x.coords;
        ct += *w * y.coords;
    }
    cs /= w_sum;
    ct /= w_sum;

    let mut h = Matrix3::zeros();
    let (mut spread_s, mut spread_t) = (0.0, 0.0);
    for ((x, y), w) in corr.source.iter().zip(corr.target).zip(corr.weights) {
        let dx = x.coords - cs;
        let dy = y.coords - ct;
        h += *w * dx * dy.transpose();
        spread_s += w * dx.norm_squared();
        spread_t += w * dy.norm_squared();
    }
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite correspondences".into()));
    }

    let svd = h.svd(true, true);
    let sigma_max = svd.singular_values.max();
    // Scale of H is W · rms_s · rms_t.
    let scale = (spread_s * spread_t).sqrt();
    if sigma_max <= 1e-12 * scale || sigma_max == 0.0 {
        return Err(Error::DegenerateInput(
            "cross-covariance is numerically rank-0".into(),
        ));
    }

    let u = svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    let translation = ct - rotation * cs;
    Ok(RigidTransform::new(rotation, translation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                )
            })
            .collect()
    }

    #[test]
    fn identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 10);
        let w = vec![1.0; 10];
        let t = weighted_kabsch(&WeightedCorrespondences::new(&pts, &pts, &w).unwrap()).unwrap();
        assert_relative_eq!(t.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert!(t.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_rz30_with_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_points(&mut rng, 10);
        let gt = RigidTransform::from_axis_angle(
            Vector3::z(),
            30f64.to_radians(),
            Vector3::new(1.0, 0.0, 0.0),
        );
        let tgt = gt.apply_points(&src);
        let w = vec![1.0; 10];
        let est = weighted_kabsch(&WeightedCorrespondences::new(&src, &tgt, &w).unwrap()).unwrap();
        for (x, y) in src.iter().zip(&tgt) {
            assert!((est.transform_point(x) - y).norm() <= 1e-9);
        }
        assert_relative_eq!(est.rotation, gt.rotation, epsilon = 1e-9);
        assert_relative_eq!(est.translation, gt.translation, epsilon = 1e-9);
    }

    #[test]
    fn zero_weight_outlier_is_ignored() {
        let src = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 2.0, 0.5),
            Point3::new(3.0, 3.0, 3.0),
        ];
        let gt = RigidTransform::from_axis_angle(
            Vector3::new(1.0, 2.0, 3.0),
            0.7,
            Vector3::new(0.5, -1.0, 2.0),
        );
        let mut tgt = gt.apply_points(&src);
        tgt[3] = Point3::new(100.0, -40.0, 7.0);
        let w = [1.0, 1.0, 1.0, 0.0];
        let est = weighted_kabsch(&WeightedCorrespondences::new(&src, &tgt, &w).unwrap()).unwrap();
        assert_relative_eq!(est.rotation, gt.rotation, epsilon = 1e-9);
        assert_relative_eq!(est.translation, gt.translation, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let p = vec![Point3::new(1.0, 1.0, 1.0); 4];
        let w = vec![1.0; 4];
        let c = WeightedCorrespondences::new(&p, &p, &w).unwrap();
        assert!(matches!(weighted_kabsch(&c), Err(Error::DegenerateInput(_))));

        let q = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)];
        let zero = vec![0.0; 3];
        let c = WeightedCorrespondences::new(&q, &q, &zero).unwrap();
        assert!(matches!(weighted_kabsch(&c), Err(Error::DegenerateInput(_))));

        assert!(WeightedCorrespondences::new(&q[..2], &q[..2], &zero[..2]).is_err());
        assert!(WeightedCorrespondences::new(&q, &q, &[1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn reflection_is_never_returned() {
        // Target is a mirror image; the best proper rotation must still have det +1.
        let src = vec![
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(1.0, 1.0, 1.0),
        ];
        let tgt: Vec<_> = src.iter().map(|p| Point3::new(-p.x, p.y, p.z)).collect();
        let w = vec![1.0; 4];
        let est = weighted_kabsch(&WeightedCorrespondences::new(&src, &tgt, &w).unwrap()).unwrap();
        assert!(est.is_valid(1e-9));
    }

    #[test]
    fn rotation_angle_resolves_tiny_and_half_turns() {
        for angle in [1e-12, 1e-8, 0.3, PI - 1e-9, PI] {
            let t = RigidTransform::from_axis_angle(Vector3::new(0.2, -0.7, 0.4), angle, Vector3::zeros());
            assert_relative_eq!(t.rotation_angle(), angle, max_relative = 1e-6);
        }
    }

    #[test]
    fn compose_examples() {
        let t = RigidTransform::from_axis_angle(Vector3::x(), 0.3, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(compose(&RigidTransform::identity(), &t), t);

        let c = compose(
            &RigidTransform::rot_z_deg(90.0),
            &RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0)),
        );
        let o = c.transform_point(&Point3::origin());
        assert_relative_eq!(o, Point3::new(0.0, 1.0, 0.0), epsilon = 1e-15);

        let id = compose(&t.inverse(), &t);
        assert_relative_eq!(id.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert!(id.translation.norm() < 1e-12);
    }

    #[test]
    fn apply_and_invert_examples() {
        let cloud = PointCloud::from_points(vec![Point3::origin()]);
        let moved = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0)).apply(&cloud);
        assert_eq!(moved.points[0], Point3::new(1.0, 2.0, 3.0));

        let rot = RigidTransform::rot_z_deg(90.0)
            .apply(&PointCloud::from_points(vec![Point3::new(1.0, 0.0, 0.0)]));
        assert_relative_eq!(rot.points[0], Point3::new(0.0, 1.0, 0.0), epsilon = 1e-15);

        let inv = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0)).inverse();
        assert_eq!(inv.translation, Vector3::new(-1.0, 0.0, 0.0));
        assert_eq!(RigidTransform::identity().inverse(), RigidTransform::identity());
    }

    #[test]
    fn row_major_round_trip() {
        let t = RigidTransform::from_axis_angle(Vector3::new(0.2, 1.0, -0.4), 1.1, Vector3::new(4.0, 5.0, 6.0));
        assert_eq!(RigidTransform::from_row_major_3x4(&t.to_row_major_3x4()), t);
    }
}
