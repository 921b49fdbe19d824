//! Handcrafted local-shape descriptor used by the deterministic detector.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};

use crate::cloud::Descriptors;
use crate::sampling::KdTree;

/// Features per support scale.
pub const BASE_DIM: usize = 8 + HIST_BINS + HEIGHT_EDGES.len() + 1 + SHELLS;
const HIST_BINS: usize = 8;
/// Upper edges of the height-above-local-minimum bins (m); the last bin is open.
const HEIGHT_EDGES: [f64; 5] = [0.3, 1.0, 2.0, 3.0, 4.5];
/// Equal-width horizontal-distance shells.
const SHELLS: usize = 4;
/// Support radii as multiples of the level's descriptor radius.
pub const SCALES: [f64; 2] = [1.0, 0.5];
pub const RAW_DIM: usize = BASE_DIM * SCALES.len();

/// The preprocessed cloud every level's descriptor support is drawn from.
pub struct SupportCloud<'a> {
    pub points: &'a [Point3<f64>],
    tree: KdTree<'a>,
}

impl<'a> SupportCloud<'a> {
    pub fn new(points: &'a [Point3<f64>]) -> Self {
        Self {
            points,
            tree: KdTree::build(points),
        }
    }

    pub fn within(&self, center: &Point3<f64>, radius: f64) -> Vec<Point3<f64>> {
        self.tree
            .within_radius(center, radius)
            .into_iter()
            .map(|(i, _)| self.points[i])
            .collect()
    }
}

/// Shape features of `neighborhood` around `center`, lengths normalized by `radius`:
/// linearity, planarity, sphericity, |normal_z|, height above the neighborhood
/// centroid, vertical extent, mean and std of distances to `center`, and an
/// 8-bin histogram of horizontal distance by azimuth, measured from the principal
/// horizontal axis and folded modulo π, the share of points per height band above
/// the lowest neighbor, and the share per horizontal-distance shell.
pub fn handcrafted_features(
    center: &Point3<f64>,
    neighborhood: &[Point3<f64>],
    radius: f64,
) -> [f64; BASE_DIM] {
    let mut f = [0.0; BASE_DIM];
    let n = neighborhood.len();
    if n < 3 {
        return f;
    }
    let nf = n as f64;
    let mean = neighborhood.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / nf;
    let mut cov = Matrix3::zeros();
    for p in neighborhood {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= nf;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l1 = eig.eigenvalues[order[0]].max(0.0);
    let l2 = eig.eigenvalues[order[1]].max(0.0);
    let l3 = eig.eigenvalues[order[2]].max(0.0);
    if l1 > 1e-12 {
        f[0] = (l1 - l2) / l1;
        f[1] = (l2 - l3) / l1;
        f[2] = l3 / l1;
        f[3] = eig.eigenvectors.column(order[2]).z.abs();
    }

    f[4] = (center.z - mean.z) / radius;
    let (zmin, zmax) = neighborhood
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.z), hi.max(p.z)));
    f[5] = (zmax - zmin) / radius;

    let dists: Vec<f64> = neighborhood.iter().map(|p| (p - center).norm()).collect();
    let dmean = dists.iter().sum::<f64>() / nf;
    let dvar = dists.iter().map(|d| (d - dmean).powi(2)).sum::<f64>() / nf;
    f[6] = dmean / radius;
    f[7] = dvar.sqrt() / radius;

    let phi0 = 0.5 * (2.0 * cov[(0, 1)]).atan2(cov[(0, 0)] - cov[(1, 1)]);
    let mut total = 0.0;
    for p in neighborhood {
        let d = p - center;
        let h = d.x.hypot(d.y);
        if h <= 1e-9 {
            continue;
        }
        let theta = (d.y.atan2(d.x) - phi0).rem_euclid(PI);
        let bin = ((theta / PI * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        f[8 + bin] += h;
        total += h;
    }
    if total > 0.0 {
        for v in &mut f[8..8 + HIST_BINS] {
            *v /= total;
        }
    }

    let heights = 8 + HIST_BINS;
    let shells = heights + HEIGHT_EDGES.len() + 1;
    for p in neighborhood {
        let band = HEIGHT_EDGES.iter().take_while(|&&e| p.z - zmin >= e).count();
        f[heights + band] += 1.0 / nf;
        let h = (p - center).xy().norm() / radius;
        f[shells + ((h * SHELLS as f64) as usize).min(SHELLS - 1)] += 1.0 / nf;
    }
    f
}

/// Multi-scale raw features of each keypoint (before normalization).
pub fn raw_features(
    keypoints: &[Point3<f64>],
    support: &SupportCloud<'_>,
    radius: f64,
) -> Vec<[f64; RAW_DIM]> {
    keypoints
        .iter()
        .map(|kp| {
            let mut out = [0.0; RAW_DIM];
            let outer = support.within(kp, radius * SCALES[0]);
            for (s, &scale) in SCALES.iter().enumerate() {
                let r = radius * scale;
                let r2 = r * r;
                let subset: Vec<Point3<f64>> = outer
                    .iter()
                    .filter(|p| (*p - kp).norm_squared() <= r2)
                    .copied()
                    .collect();
                out[s * BASE_DIM..(s + 1) * BASE_DIM]
                    .copy_from_slice(&handcrafted_features(kp, &subset, r));
            }
            out
        })
        .collect()
}

/// Standardizes each channel across the level, L2-normalizes, then tiles or
/// truncates to `channels` and normalizes again.
pub fn finalize_descriptors(raw: &[Vec<f64>], channels: usize) -> Descriptors {
    let n = raw.len();
    let dim = raw.first().map_or(0, Vec::len);
    let mut out = Descriptors::zeros(n, channels);
    if n == 0 || dim == 0 {
        return out;
    }
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for r in raw {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    for r in raw {
        for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    for (i, r) in raw.iter().enumerate() {
        let z: Vec<f64> = r
            .iter()
            .zip(&mean)
            .zip(&std)
            .map(|((v, m), s)| if s.sqrt() > 1e-9 { (v - m) / s.sqrt() } else { 0.0 })
            .collect();
        let row = out.row_mut(i);
        for (c, slot) in row.iter_mut().enumerate() {
            *slot = z[c % dim];
        }
        normalize_or_uniform(row);
    }
    out
}

/// Scales `v` to unit length; a zero vector becomes the uniform unit vector.
pub fn normalize_or_uniform(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        let u = 1.0 / (v.len() as f64).sqrt();
        v.iter_mut().for_each(|x| *x = u);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_and_line_shapes() {
        let plane: Vec<_> = (0..10)
            .flat_map(|i| (0..10).map(move |j| Point3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0)))
            .collect();
        let f = handcrafted_features(&Point3::new(0.45, 0.45, 0.0), &plane, 1.0);
        assert!(f[1] > 0.9, "planarity {}", f[1]);
        assert!((f[3] - 1.0).abs() < 1e-9, "horizontal plane normal");

        let line: Vec<_> = (0..20).map(|i| Point3::new(0.0, 0.0, i as f64 * 0.1)).collect();
        let f = handcrafted_features(&Point3::new(0.0, 0.0, 1.0), &line, 1.0);
        assert!(f[0] > 0.99);
    }

    #[test]
    fn histogram_is_yaw_invariant() {
        let pts: Vec<_> = (0..40)
            .map(|i| {
                let a = i as f64 * 0.37;
                Point3::new(a.cos() * (1.0 + 0.5 * (i % 3) as f64), a.sin() * 0.4 * (i % 5) as f64, 0.1 * (i % 4) as f64)
            })
            .collect();
        let rot = crate::geom::RigidTransform::rot_z_deg(27.0);
        let moved = rot.apply_points(&pts);
        let a = handcrafted_features(&Point3::origin(), &pts, 2.0);
        let b = handcrafted_features(&Point3::origin(), &moved, 2.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn descriptors_are_unit_length() {
        let raw = vec![vec![1.0, 2.0, 3.0], vec![2.0, 2.0, 1.0], vec![0.0, 2.0, 2.0]];
        let d = finalize_descriptors(&raw, 8);
        for r in d.rows() {
            let n: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        // Constant channels carry no information; identical rows become uniform.
        let same = finalize_descriptors(&[vec![1.0, 1.0], vec![1.0, 1.0]], 4);
        assert_eq!(same.row(0), &[0.5; 4]);
    }
}
