//! Gradient through the weighted Kabsch solver by central finite differences.

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::Result;
use crate::geom::{weighted_kabsch, RigidTransform, WeightedCorrespondences};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Upstream gradients mapped onto the solver's target points and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct KabschInputGrad {
    pub target: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
}

impl KabschInputGrad {
    pub fn norm(&self) -> f64 {
        let t: f64 = self.target.iter().map(|v| v.norm_squared()).sum();
        let w: f64 = self.weights.iter().map(|v| v * v).sum();
        (t + w).sqrt()
    }
}

/// Pulls `(dL/dR, dL/dt)` back to `dL/dtarget` and `dL/dweights`.
///
/// Each scalar input is perturbed by `step · scale`, where the scale is the
/// larger of its magnitude and the mean magnitude of its kind. Weights too small
/// for a symmetric step fall back to a forward difference.
pub fn kabsch_backward(
    source: &[Point3<f64>],
    target: &[Point3<f64>],
    weights: &[f64],
    grad_rotation: &Matrix3<f64>,
    grad_translation: &Vector3<f64>,
    step: f64,
) -> Result<KabschInputGrad> {
    let solve = |tgt: &[Point3<f64>], w: &[f64]| -> Result<RigidTransform> {
        weighted_kabsch(&WeightedCorrespondences::new(source, tgt, w)?)
    };
    let contract = |a: &RigidTransform, b: &RigidTransform, h: f64| -> f64 {
        ((a.rotation - b.rotation).component_mul(grad_rotation).sum()
            + (a.translation - b.translation).dot(grad_translation))
            / h
    };

    let n = target.len();
    let coord_scale = (target.iter().map(|p| p.coords.abs().sum()).sum::<f64>() / (3 * n.max(1)) as f64).max(1e-3);
    let weight_scale = (weights.iter().sum::<f64>() / n.max(1) as f64).max(1e-12);

    let mut tgt = target.to_vec();
    let mut g_target = vec![Vector3::zeros(); n];
    for i in 0..n {
        for a in 0..3 {
            let orig = tgt[i][a];
            let h = step * orig.abs().max(coord_scale);
            tgt[i][a] = orig + h;
            let plus = solve(&tgt, weights)?;
            tgt[i][a] = orig - h;
            let minus = solve(&tgt, weights)?;
            tgt[i][a] = orig;
            g_target[i][a] = contract(&plus, &minus, 2.0 * h);
        }
    }

    let base = solve(target, weights)?;
    let mut w = weights.to_vec();
    let mut g_weights = vec![0.0; n];
    for i in 0..n {
        let orig = w[i];
        let h = step * orig.abs().max(weight_scale);
        w[i] = orig + h;
        let plus = solve(target, &w)?;
        g_weights[i] = if orig >= h {
            w[i] = orig - h;
            let minus = solve(target, &w)?;
            contract(&plus, &minus, 2.0 * h)
        } else {
            contract(&plus, &base, h)
        };
        w[i] = orig;
    }
    Ok(KabschInputGrad {
        target: g_target,
        weights: g_weights,
    })
}
