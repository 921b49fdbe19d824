//! Mask-guided fine registration on pyramid levels 2 and 1.

use nalgebra::Point3;

use crate::coarse::{
    build_clusters, soft_match_learned, LearnedContext, LearnedPass, MatchSet, SearchSpace, SoftMatch,
};
use crate::config::{Mode, PipelineConfig};
use crate::error::{Error, Result};
use crate::geom::{compose, weighted_kabsch, RigidTransform, WeightedCorrespondences};
use crate::neural::{softmax, Matrix, Var};
use crate::pyramid::PyramidLevel;
use crate::sampling::knn_points;

/// Lower clamp of distances in reciprocal weights and log-distance scores (m).
pub const DISTANCE_CLAMP: f64 = 1e-9;

/// Per-keypoint confidence carried from a deeper level.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMask {
    pub initial: Vec<f64>,
}

impl ConfidenceMask {
    pub fn ones(n: usize) -> Self {
        Self {
            initial: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.initial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initial.is_empty()
    }
}

/// Inverse-distance interpolation of deep confidences at shallow points from
/// their `k` nearest deep points.
pub fn upsample_confidence(
    shallow: &[Point3<f64>],
    deep: &[Point3<f64>],
    deep_confidence: &[f64],
    k: usize,
) -> Result<ConfidenceMask> {
    if deep.len() != deep_confidence.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} deep points but {} confidences",
            deep.len(),
            deep_confidence.len()
        )));
    }
    let neighbors = knn_points(deep, shallow, k)?;
    let initial = neighbors
        .iter()
        .map(|nb| {
            let (num, den) = nb.indices.iter().zip(&nb.distances).fold((0.0, 0.0), |(n, d), (&j, &dist)| {
                let w = 1.0 / dist.max(DISTANCE_CLAMP);
                (n + w * deep_confidence[j], d + w)
            });
            num / den
        })
        .collect();
    Ok(ConfidenceMask { initial })
}

/// Result of one refinement layer.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub transform: RigidTransform,
    pub delta: RigidTransform,
    /// Source keypoints moved by the incoming transform.
    pub moved_source: Vec<Point3<f64>>,
    pub virtual_targets: Vec<Point3<f64>>,
    pub confidences: Vec<f64>,
    pub vars: Option<(Var, Var)>,
}

/// Deterministic fine score: `s − d/τ − ln(max(d, DISTANCE_CLAMP))`.
fn fine_scores(distances: &[f64], consistency: &[f64], temperature: f64, use_consistency: bool) -> Vec<f64> {
    distances
        .iter()
        .zip(consistency)
        .map(|(&d, &s)| {
            let v = -d / temperature - d.max(DISTANCE_CLAMP).ln();
            if use_consistency {
                v + s
            } else {
                v
            }
        })
        .collect()
}

/// Moves the source level by `prev`, soft-matches it against the target level
/// in Euclidean space, solves the increment and composes it onto `prev`.
///
/// Deterministic confidences are `m · max_j w_j · max(0, 1 − (r/ρ)²)` with `m`
/// the mask value, `r` the distance to the virtual target and `ρ` the level's
/// inlier radius. Learned mode applies the mask to the member features.
pub fn refine_layer(
    src: &PyramidLevel,
    tgt: &PyramidLevel,
    prev: &RigidTransform,
    mask: &ConfidenceMask,
    cfg: &PipelineConfig,
    learned: Option<LearnedContext<'_>>,
) -> Result<Refinement> {
    let level = src.level;
    if level != 1 && level != 2 {
        return Err(Error::Config(format!("fine registration runs on levels 1 and 2, not {level}")));
    }
    if mask.len() != src.len() {
        return Err(Error::DimensionMismatch(format!(
            "mask of {} for {} keypoints",
            mask.len(),
            src.len()
        )));
    }
    if cfg.mode == Mode::Learned && learned.is_none() {
        return Err(Error::Config("learned mode needs matching parameters".into()));
    }
    let moved = prev.apply_points(&src.keypoints);
    let centers = MatchSet::new(&moved, &src.descriptors)?;
    let pool = MatchSet::new(&tgt.keypoints, &tgt.descriptors)?;
    let clusters = build_clusters(centers, pool, cfg.k_fine, SearchSpace::Euclidean, false)?;
    let fs = cfg.flags.feature_consistency;
    let mask_values = cfg.flags.mask.then_some(mask.initial.as_slice());

    let (matched, vars) = match learned {
        None => {
            let k = clusters.k;
            let mut points = Vec::with_capacity(clusters.len());
            let mut weights = Vec::with_capacity(clusters.len());
            for (i, nb) in clusters.neighbors.iter().enumerate() {
                let w = softmax(&fine_scores(
                    &nb.distances,
                    &clusters.consistency[i * k..(i + 1) * k],
                    cfg.fine_temperature,
                    fs,
                ));
                let p = nb
                    .indices
                    .iter()
                    .zip(&w)
                    .fold(nalgebra::Vector3::zeros(), |acc, (&j, wj)| acc + *wj * tgt.keypoints[j].coords);
                points.push(Point3::from(p));
                weights.push(w);
            }
            let rho = cfg.fine_inlier_radius(level);
            let confidences = weights
                .iter()
                .zip(&points)
                .zip(&moved)
                .enumerate()
                .map(|(i, ((w, y), x))| {
                    let r = (y - x).norm() / rho;
                    let m = mask_values.map_or(1.0, |m| m[i]);
                    m * w.iter().copied().fold(0.0, f64::max) * (1.0 - r * r).max(0.0)
                })
                .collect();
            (
                SoftMatch {
                    points,
                    descriptors: crate::cloud::Descriptors::default(),
                    weights,
                    confidences: Some(confidences),
                },
                None,
            )
        }
        Some(l) => {
            let (net, bound) = if level == 2 {
                (&l.net.fine2, &l.bound.fine2)
            } else {
                (&l.net.fine1, &l.bound.fine1)
            };
            let pool_var = l.tape.leaf(
                Matrix::from_vec(
                    tgt.len(),
                    3,
                    tgt.keypoints.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
                )?,
            );
            let pass = LearnedPass {
                net,
                bound,
                geometry_scale: cfg.level(level).descriptor_radius,
                use_consistency: fs,
                use_consensus: false,
                mask: mask_values,
                with_confidence: true,
            };
            let m = soft_match_learned(l.tape, centers, pool, pool_var, &clusters, &pass)?;
            let vars = (m.points_var, m.confidence_var.unwrap());
            (m.matched, Some(vars))
        }
    };
    let confidences = matched.confidences.unwrap_or_default();
    let delta = if confidences.iter().all(|&c| c == 0.0) {
        RigidTransform::identity()
    } else {
        weighted_kabsch(&WeightedCorrespondences::new(&moved, &matched.points, &confidences)?)?
    };
    Ok(Refinement {
        transform: compose(&delta, prev),
        delta,
        moved_source: moved,
        virtual_targets: matched.points,
        confidences,
        vars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Descriptors;
    use nalgebra::Vector3;

    #[test]
    fn upsample_examples() {
        let deep = [Point3::new(1.0, 0.0, 0.0), Point3::new(-2.0, 0.0, 0.0)];
        let m = upsample_confidence(&[Point3::origin()], &deep, &[1.0, 0.4], 2).unwrap();
        assert!((m.initial[0] - 0.8).abs() < 1e-12);
        let m = upsample_confidence(&[Point3::origin()], &deep, &[0.3, 0.3], 2).unwrap();
        assert!((m.initial[0] - 0.3).abs() < 1e-12);
        let m = upsample_confidence(&[deep[1]], &deep, &[1.0, 0.4], 2).unwrap();
        assert!((m.initial[0] - 0.4).abs() < 1e-6);
    }

    fn level(l: usize, pts: Vec<Point3<f64>>) -> PyramidLevel {
        let n = pts.len();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![1.0, (i % 5) as f64 * 0.1, 0.3]).collect();
        PyramidLevel {
            level: l,
            keypoints: pts,
            descriptors: Descriptors::from_rows(&rows).unwrap(),
            uncertainties: vec![0.1; n],
            clusters: Vec::new(),
            weights: Vec::new(),
        }
    }

    fn scatter(n: usize) -> Vec<Point3<f64>> {
        (0..n)
            .map(|i| {
                let f = i as f64;
                Point3::new((f * 7.3) % 20.0, (f * 3.1) % 17.0, (f * 1.7) % 4.0)
            })
            .collect()
    }

    #[test]
    fn aligned_input_is_a_fixed_point() {
        let gt = RigidTransform::from_axis_angle(Vector3::new(0.1, 0.0, 1.0), 0.4, Vector3::new(2.0, -1.0, 0.3));
        let src = level(2, scatter(40));
        let tgt = level(2, gt.apply_points(&src.keypoints));
        let mut cfg = PipelineConfig::toy();
        cfg.k_fine = 6;
        let mask = ConfidenceMask {
            initial: (0..40).map(|i| 0.5 + 0.01 * i as f64).collect(),
        };
        let r = refine_layer(&src, &tgt, &gt, &mask, &cfg, None).unwrap();
        assert!((r.delta.rotation - nalgebra::Matrix3::identity()).norm() < 1e-6);
        assert!(r.delta.translation.norm() < 1e-6);
        assert!((r.transform.translation - gt.translation).norm() < 1e-6);
    }

    #[test]
    fn disabled_mask_equals_all_ones() {
        let gt = RigidTransform::from_axis_angle(Vector3::z(), 0.2, Vector3::new(0.5, 0.2, 0.0));
        let src = level(1, scatter(50));
        let tgt = level(1, gt.apply_points(&scatter(50)));
        let prev = RigidTransform::from_translation(Vector3::new(0.4, 0.0, 0.0));
        let mut cfg = PipelineConfig::toy();
        let ones = refine_layer(&src, &tgt, &prev, &ConfidenceMask::ones(50), &cfg, None).unwrap();
        cfg.flags.mask = false;
        let other = ConfidenceMask {
            initial: vec![0.2; 50],
        };
        let off = refine_layer(&src, &tgt, &prev, &other, &cfg, None).unwrap();
        assert_eq!(ones.transform, off.transform);
        assert_eq!(ones.confidences, off.confidences);
    }

    #[test]
    fn refinement_reduces_small_offsets() {
        let gt = RigidTransform::identity();
        let src = level(1, scatter(60));
        let tgt = level(1, scatter(60));
        let prev = RigidTransform::from_translation(Vector3::new(0.3, -0.2, 0.1));
        let cfg = PipelineConfig::toy();
        let r = refine_layer(&src, &tgt, &prev, &ConfidenceMask::ones(60), &cfg, None).unwrap();
        assert!((r.transform.translation - gt.translation).norm() < prev.translation.norm());
    }
}
