//! Registration metrics, inlier classification, benchmark reports, recall
//! curves and the ablation table.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::cloud::PointCloud;
use crate::coarse::CorrespondenceSet;
use crate::config::{AblationFlags, PipelineConfig};
use crate::error::{Error, Result};
use crate::geom::RigidTransform;
use crate::learned::Model;
use crate::pipeline::{build_pyramids, register_pyramids};
use crate::pyramid::Pyramid;

/// Translation error ‖t − t̂‖ in meters.
pub fn rte(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    (gt.translation - est.translation).norm()
}

/// Geodesic rotation error arccos((Tr(R̂ᵀR) − 1)/2) in degrees.
pub fn rre(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    crate::geom::rotation_angle(&(est.rotation.transpose() * gt.rotation)).to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalThresholds {
    pub eps_trans: f64,
    pub eps_rot: f64,
    /// Inlier distance for correspondences (m).
    pub eps_d: f64,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self {
            eps_trans: 2.0,
            eps_rot: 5.0,
            eps_d: 1.0,
        }
    }
}

impl EvalThresholds {
    pub fn validate(&self) -> Result<()> {
        if [self.eps_trans, self.eps_rot, self.eps_d].iter().all(|v| *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config("evaluation thresholds must be positive".into()))
        }
    }

    /// Success uses strict inequalities on both errors.
    pub fn is_success(&self, rte_m: f64, rre_deg: f64) -> bool {
        rte_m < self.eps_trans && rre_deg < self.eps_rot
    }
}

/// Inlier iff the virtual target lies strictly within `eps_d` of the
/// ground-truth image of its source point.
pub fn classify_inliers(corr: &CorrespondenceSet, gt: &RigidTransform, eps_d: f64) -> Vec<bool> {
    corr.source
        .iter()
        .zip(&corr.virtual_targets)
        .map(|(x, y)| (y - gt.transform_point(x)).norm() < eps_d)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairResult {
    pub pair_id: usize,
    /// `NaN` when the registration failed.
    pub rte_m: f64,
    pub rre_deg: f64,
    pub success: bool,
    pub ms: f64,
    pub estimate: Option<RigidTransform>,
    /// RTE/RRE after the coarse stage.
    pub coarse_rte_m: f64,
    pub coarse_rre_deg: f64,
    pub inlier_ratio: f64,
    pub error: Option<String>,
}

impl PairResult {
    fn failed(pair_id: usize, ms: f64, err: &Error) -> Self {
        Self {
            pair_id,
            rte_m: f64::NAN,
            rre_deg: f64::NAN,
            success: false,
            ms,
            estimate: None,
            coarse_rte_m: f64::NAN,
            coarse_rre_deg: f64::NAN,
            inlier_ratio: f64::NAN,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub pairs: Vec<PairResult>,
    pub thresholds: EvalThresholds,
    pub recall: f64,
    /// Mean and population standard deviation over successful pairs only.
    pub rte_mean: f64,
    pub rte_std: f64,
    pub rre_mean: f64,
    pub rre_std: f64,
    pub ms_mean: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl BenchmarkReport {
    /// Aggregates per-pair results; success flags are recomputed from the errors.
    pub fn from_pairs(mut pairs: Vec<PairResult>, thresholds: EvalThresholds) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for p in &mut pairs {
            p.success = thresholds.is_success(p.rte_m, p.rre_deg);
        }
        let ok: Vec<&PairResult> = pairs.iter().filter(|p| p.success).collect();
        let (rte_mean, rte_std) = mean_std(&ok.iter().map(|p| p.rte_m).collect::<Vec<_>>());
        let (rre_mean, rre_std) = mean_std(&ok.iter().map(|p| p.rre_deg).collect::<Vec<_>>());
        let ms_mean = pairs.iter().map(|p| p.ms).sum::<f64>() / pairs.len() as f64;
        Ok(Self {
            recall: ok.len() as f64 / pairs.len() as f64,
            pairs,
            thresholds,
            rte_mean,
            rte_std,
            rre_mean,
            rre_std,
            ms_mean,
        })
    }

    /// Report for stored estimates (`None` marks a failed pair).
    pub fn from_estimates(
        estimates: &[(Option<RigidTransform>, RigidTransform)],
        thresholds: EvalThresholds,
    ) -> Result<Self> {
        let pairs = estimates
            .iter()
            .enumerate()
            .map(|(i, (est, gt))| match est {
                Some(e) => PairResult {
                    pair_id: i,
                    rte_m: rte(e, gt),
                    rre_deg: rre(e, gt),
                    success: false,
                    ms: 0.0,
                    estimate: Some(*e),
                    coarse_rte_m: f64::NAN,
                    coarse_rre_deg: f64::NAN,
                    inlier_ratio: f64::NAN,
                    error: None,
                },
                None => PairResult::failed(i, 0.0, &Error::DegenerateInput("no estimate".into())),
            })
            .collect();
        Self::from_pairs(pairs, thresholds)
    }

    pub fn median_rte(&self) -> f64 {
        median(self.pairs.iter().map(|p| p.rte_m))
    }

    pub fn median_rre(&self) -> f64 {
        median(self.pairs.iter().map(|p| p.rre_deg))
    }

    /// Recall with the translation threshold swept and rotation at its default.
    pub fn recall_vs_rte(&self, thresholds: &[f64]) -> Vec<(f64, f64)> {
        self.sweep(thresholds, |p, t| p.rte_m < t && p.rre_deg < self.thresholds.eps_rot)
    }

    /// Recall with the rotation threshold swept and translation at its default.
    pub fn recall_vs_rre(&self, thresholds: &[f64]) -> Vec<(f64, f64)> {
        self.sweep(thresholds, |p, t| p.rre_deg < t && p.rte_m < self.thresholds.eps_trans)
    }

    fn sweep(&self, thresholds: &[f64], ok: impl Fn(&PairResult, f64) -> bool) -> Vec<(f64, f64)> {
        let n = self.pairs.len() as f64;
        thresholds
            .iter()
            .map(|&t| (t, self.pairs.iter().filter(|p| ok(p, t)).count() as f64 / n))
            .collect()
    }

    /// Per-pair CSV `pair_id,rte_m,rre_deg,success,ms`; `ms` is written as 0
    /// when `timing` is off so repeated runs compare byte for byte.
    pub fn write_pairs_csv(&self, w: impl Write, timing: bool) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["pair_id", "rte_m", "rre_deg", "success", "ms"]).map_err(csv_err)?;
        for p in &self.pairs {
            out.write_record([
                p.pair_id.to_string(),
                p.rte_m.to_string(),
                p.rre_deg.to_string(),
                p.success.to_string(),
                if timing { format!("{:.3}", p.ms) } else { "0".into() },
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Curve CSV `threshold,recall`.
pub fn write_curve_csv(w: impl Write, curve: &[(f64, f64)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["threshold", "recall"]).map_err(csv_err)?;
    for (t, r) in curve {
        out.write_record([t.to_string(), r.to_string()]).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Median of the values, with `NaN` (failed pairs) ordered last.
pub fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.map(|x| if x.is_nan() { f64::INFINITY } else { x }).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A dataset of registration pairs with ground truth.
pub trait PairSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Source cloud, target cloud and the transform mapping source onto target.
    fn load(&self, index: usize) -> Result<(PointCloud, PointCloud, RigidTransform)>;
}

fn evaluate_pyramids(
    pair_id: usize,
    pyramids: &(Pyramid, Pyramid),
    gt: &RigidTransform,
    cfg: &PipelineConfig,
    model: Option<&Model>,
    thresholds: &EvalThresholds,
    pyramid_ms: f64,
) -> PairResult {
    let t = Instant::now();
    match register_pyramids(&pyramids.0, &pyramids.1, cfg, model) {
        Ok(reg) => {
            let ms = pyramid_ms + t.elapsed().as_secs_f64() * 1e3;
            let coarse = reg.stage("coarse").map(|s| s.transform).unwrap_or_default();
            let inliers = classify_inliers(&reg.coarse, gt, thresholds.eps_d);
            let (e_t, e_r) = (rte(&reg.transform, gt), rre(&reg.transform, gt));
            PairResult {
                pair_id,
                rte_m: e_t,
                rre_deg: e_r,
                success: thresholds.is_success(e_t, e_r),
                ms,
                estimate: Some(reg.transform),
                coarse_rte_m: rte(&coarse, gt),
                coarse_rre_deg: rre(&coarse, gt),
                inlier_ratio: inliers.iter().filter(|&&b| b).count() as f64 / inliers.len().max(1) as f64,
                error: None,
            }
        }
        Err(e) => PairResult::failed(pair_id, pyramid_ms, &e),
    }
}

fn prepare(
    source: &dyn PairSource,
    i: usize,
    cfg: &PipelineConfig,
    model: Option<&Model>,
) -> Result<((Pyramid, Pyramid), RigidTransform, f64)> {
    let t = Instant::now();
    let (src, tgt, gt) = source.load(i)?;
    let pyr = build_pyramids(&src, &tgt, cfg, model)?;
    Ok((pyr, gt, t.elapsed().as_secs_f64() * 1e3))
}

/// Registers every pair and aggregates the report. Pair failures count as
/// unsuccessful; an empty dataset is an error.
pub fn benchmark(
    source: &dyn PairSource,
    cfg: &PipelineConfig,
    model: Option<&Model>,
    thresholds: &EvalThresholds,
) -> Result<BenchmarkReport> {
    Ok(ablation_suite(source, cfg, model, thresholds, &[("full", cfg.flags)])?
        .remove(0)
        .1)
}

/// Ablation variants: the full model and each single-feature removal.
pub fn ablation_variants() -> Vec<(&'static str, AblationFlags)> {
    let full = AblationFlags::full();
    vec![
        ("full", full),
        (
            "w/o STD",
            AblationFlags {
                sparse_to_denser: false,
                ..full
            },
        ),
        (
            "w/o f_s",
            AblationFlags {
                feature_consistency: false,
                ..full
            },
        ),
        (
            "w/o{DM,STD,f_s}",
            AblationFlags {
                double_soft: false,
                sparse_to_denser: false,
                feature_consistency: false,
                ..full
            },
        ),
        (
            "w/o mask",
            AblationFlags {
                mask: false,
                ..full
            },
        ),
    ]
}

/// Benchmarks each flag variant on the same pairs. Pyramids do not depend on
/// the flags, so each pair's pyramids are built once and shared.
pub fn ablation_suite(
    source: &dyn PairSource,
    base: &PipelineConfig,
    model: Option<&Model>,
    thresholds: &EvalThresholds,
    variants: &[(&'static str, AblationFlags)],
) -> Result<Vec<(&'static str, BenchmarkReport)>> {
    base.validate()?;
    thresholds.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_pair: Vec<Vec<PairResult>> = (0..source.len())
        .into_par_iter()
        .map(|i| match prepare(source, i, base, model) {
            Ok((pyr, gt, ms)) => variants
                .iter()
                .map(|(_, flags)| {
                    let cfg = PipelineConfig {
                        flags: *flags,
                        ..base.clone()
                    };
                    evaluate_pyramids(i, &pyr, &gt, &cfg, model, thresholds, ms)
                })
                .collect(),
            Err(e) => variants.iter().map(|_| PairResult::failed(i, 0.0, &e)).collect(),
        })
        .collect();
    variants
        .iter()
        .enumerate()
        .map(|(v, (name, _))| {
            let pairs = per_pair.iter().map(|r| r[v].clone()).collect();
            Ok((*name, BenchmarkReport::from_pairs(pairs, *thresholds)?))
        })
        .collect()
}

/// Ablation CSV `variant,rte_mean,rte_std,rre_mean,rre_std,recall,ms_mean`.
pub fn write_ablation_csv(w: impl Write, rows: &[(&str, BenchmarkReport)], timing: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["variant", "rte_mean", "rte_std", "rre_mean", "rre_std", "recall", "ms_mean"])
        .map_err(csv_err)?;
    for (name, r) in rows {
        out.write_record([
            name.to_string(),
            r.rte_mean.to_string(),
            r.rte_std.to_string(),
            r.rre_mean.to_string(),
            r.rre_std.to_string(),
            r.recall.to_string(),
            if timing { format!("{:.3}", r.ms_mean) } else { "0".into() },
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Point3, Vector3};

    #[test]
    fn metric_examples() {
        let gt = RigidTransform::from_axis_angle(Vector3::new(1.0, 2.0, 0.5), 0.7, Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(rte(&gt, &gt), 0.0);
        assert!(rre(&gt, &gt) < 1e-6);
        let mut est = gt;
        est.translation += Vector3::new(1.0, 2.0, 2.0);
        assert!((rte(&est, &gt) - 3.0).abs() < 1e-12);
        let rot = |deg: f64| RigidTransform::new(gt.rotation * RigidTransform::rot_z_deg(deg).rotation.transpose(), gt.translation);
        assert!((rre(&rot(90.0), &gt) - 90.0).abs() < 1e-9);
        assert!((rre(&rot(180.0), &gt) - 180.0).abs() < 1e-9);
        assert!((rre(&rot(30.0), &gt) - rre(&gt, &rot(30.0))).abs() < 1e-9);
    }

    #[test]
    fn inlier_boundary_is_strict() {
        let corr = CorrespondenceSet {
            source: vec![Point3::origin(); 3],
            virtual_targets: vec![Point3::origin(), Point3::new(1.5, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)],
            confidences: vec![1.0; 3],
            descriptors: crate::cloud::Descriptors::zeros(3, 1),
        };
        let flags = classify_inliers(&corr, &RigidTransform::identity(), 1.0);
        assert_eq!(flags, vec![true, false, false]);
    }

    fn fake(id: usize, rte_m: f64, rre_deg: f64) -> PairResult {
        PairResult {
            pair_id: id,
            rte_m,
            rre_deg,
            success: false,
            ms: 1.0,
            estimate: None,
            coarse_rte_m: f64::NAN,
            coarse_rre_deg: f64::NAN,
            inlier_ratio: f64::NAN,
            error: None,
        }
    }

    #[test]
    fn report_aggregates_successes_only() {
        let r = BenchmarkReport::from_pairs(vec![fake(0, 1.0, 1.0), fake(1, 3.0, 1.0)], EvalThresholds::default()).unwrap();
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.rte_mean, 1.0);
        assert!(matches!(
            BenchmarkReport::from_pairs(Vec::new(), EvalThresholds::default()),
            Err(Error::EmptyDataset)
        ));
        let edge = BenchmarkReport::from_pairs(vec![fake(0, 2.0, 1.0), fake(1, 1.0, 5.0)], EvalThresholds::default()).unwrap();
        assert_eq!(edge.recall, 0.0);
    }

    #[test]
    fn curves_are_monotone() {
        let pairs = (0..30).map(|i| fake(i, (i as f64 * 0.37) % 3.0, (i as f64 * 1.3) % 7.0)).collect();
        let r = BenchmarkReport::from_pairs(pairs, EvalThresholds::default()).unwrap();
        let ts: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
        for curve in [r.recall_vs_rte(&ts), r.recall_vs_rre(&ts)] {
            assert!(curve.windows(2).all(|w| w[0].1 <= w[1].1));
        }
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &r.recall_vs_rre(&[1.0])).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("threshold,recall\n"));
    }

    #[test]
    fn ablation_wiring() {
        let v = ablation_variants();
        let get = |n: &str| v.iter().find(|(name, _)| *name == n).unwrap().1;
        let single = get("w/o{DM,STD,f_s}");
        assert!(!single.double_soft && !single.sparse_to_denser && !single.feature_consistency && single.mask);
        let mask = get("w/o mask");
        assert_eq!(AblationFlags { mask: true, ..mask }, get("full"));
        assert!(!mask.mask);
    }

    #[test]
    fn median_handles_failures() {
        assert_eq!(median([3.0, 1.0, 2.0].into_iter()), 2.0);
        assert_eq!(median([1.0, f64::NAN].into_iter()), f64::INFINITY);
    }
}
