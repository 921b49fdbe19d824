use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the rotation term.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 1.8 }
    }
}

impl LossConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

pub fn translation_loss(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    (gt.translation - est.translation).norm()
}

/// `‖R̂ᵀR − I‖_F`.
pub fn rotation_loss(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    (est.rotation.transpose() * gt.rotation - Matrix3::identity()).norm()
}

pub fn loss_total(est: &RigidTransform, gt: &RigidTransform, cfg: &LossConfig) -> f64 {
    translation_loss(est, gt) + cfg.alpha * rotation_loss(est, gt)
}

/// Gradient of [`loss_total`] with respect to the estimate's `(R̂, t̂)`.
///
/// Both norms use the zero subgradient where they vanish.
pub fn loss_total_grad(
    est: &RigidTransform,
    gt: &RigidTransform,
    cfg: &LossConfig,
) -> (Matrix3<f64>, Vector3<f64>) {
    let dt = est.translation - gt.translation;
    let n = dt.norm();
    let g_t = if n > 0.0 { dt / n } else { Vector3::zeros() };

    let m = est.rotation.transpose() * gt.rotation - Matrix3::identity();
    let mn = m.norm();
    let g_r = if mn > 0.0 {
        gt.rotation * m.transpose() * (cfg.alpha / mn)
    } else {
        Matrix3::zeros()
    };
    (g_r, g_t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let cfg = LossConfig::new(1.8).unwrap();
        let gt = RigidTransform::from_axis_angle(Vector3::new(0.3, 0.1, 1.0), 0.4, Vector3::new(1.0, 2.0, 3.0));
        assert!(loss_total(&gt, &gt, &cfg) < 1e-12);

        let mut est = gt;
        est.translation += Vector3::new(3.0, 4.0, 0.0);
        assert!((loss_total(&est, &gt, &cfg) - 5.0).abs() < 1e-12);

        // R̂ᵀR = Rz(180°)
        let est = RigidTransform::new(
            gt.rotation * RigidTransform::rot_z_deg(180.0).rotation.transpose(),
            gt.translation,
        );
        let expected = cfg.alpha * 2.0 * 2f64.sqrt();
        assert!((loss_total(&est, &gt, &cfg) - expected).abs() < 1e-12);
        assert!(LossConfig::new(0.0).is_err());
    }
}
