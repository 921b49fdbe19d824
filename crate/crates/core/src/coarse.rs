//! Soft matching passes and the double-soft coarse matcher on the sparsest
//! pyramid level.

use nalgebra::{Point3, Vector3};

use crate::cloud::Descriptors;
use crate::config::{Mode, PipelineConfig};
use crate::error::{Error, Result};
use crate::geom::{weighted_kabsch, RigidTransform, WeightedCorrespondences};
use crate::learned::{BoundSoftMatchNet, SoftMatchNet};
use crate::neural::{softmax, Matrix, Tape, Var};
use crate::pyramid::{normalize_or_uniform, PyramidLevel};
use crate::sampling::{knn_descriptors, knn_points, NeighborIndex};

/// Floor of the consistency-score denominator.
pub const CONSISTENCY_DENOM_FLOOR: f64 = 1e-12;

/// Points with descriptors taking part in a soft-matching pass.
#[derive(Debug, Clone, Copy)]
pub struct MatchSet<'a> {
    pub points: &'a [Point3<f64>],
    pub descriptors: &'a Descriptors,
}

impl<'a> MatchSet<'a> {
    pub fn new(points: &'a [Point3<f64>], descriptors: &'a Descriptors) -> Result<Self> {
        if points.len() != descriptors.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} points but {} descriptors",
                points.len(),
                descriptors.len()
            )));
        }
        Ok(Self {
            points,
            descriptors,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchSpace {
    Descriptor,
    Euclidean,
}

/// Pool members of each center with their similarity features, flattened
/// center-major (`center · k + member`).
#[derive(Debug, Clone, PartialEq)]
pub struct MemberClusters {
    pub k: usize,
    pub neighbors: NeighborIndex,
    /// Normalized consistency scores.
    pub consistency: Vec<f64>,
    /// Mutual-nearest indicator, all zero when consensus is not computed.
    pub consensus: Vec<f64>,
}

impl MemberClusters {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn flat_indices(&self) -> Vec<usize> {
        self.neighbors
            .iter()
            .flat_map(|n| n.indices.iter().copied())
            .collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("zero-norm descriptor".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Cosine similarity of each member to the center, divided by the cluster
/// maximum (floored at [`CONSISTENCY_DENOM_FLOOR`]).
pub fn feature_consistency(center: &[f64], members: &[&[f64]]) -> Result<Vec<f64>> {
    let raw = members
        .iter()
        .map(|m| cosine(center, m))
        .collect::<Result<Vec<_>>>()?;
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom = max.max(CONSISTENCY_DENOM_FLOOR);
    Ok(raw.into_iter().map(|s| s / denom).collect())
}

/// Whether source `s` and target `t` are each other's nearest neighbor.
pub fn bilateral_consensus(s: usize, t: usize, nn_s2t: &[usize], nn_t2s: &[usize]) -> bool {
    nn_s2t.get(s) == Some(&t) && nn_t2s.get(t) == Some(&s)
}

/// Nearest pool item of each center and nearest center of each pool item.
pub fn mutual_nearest(
    centers: MatchSet<'_>,
    pool: MatchSet<'_>,
    space: SearchSpace,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let first = |nb: NeighborIndex| nb.into_iter().map(|n| n.indices[0]).collect();
    Ok(match space {
        SearchSpace::Descriptor => (
            first(knn_descriptors(pool.descriptors, centers.descriptors, 1)?),
            first(knn_descriptors(centers.descriptors, pool.descriptors, 1)?),
        ),
        SearchSpace::Euclidean => (
            first(knn_points(pool.points, centers.points, 1)?),
            first(knn_points(centers.points, pool.points, 1)?),
        ),
    })
}

/// kNN clusters of pool members around each center plus similarity features.
pub fn build_clusters(
    centers: MatchSet<'_>,
    pool: MatchSet<'_>,
    k: usize,
    space: SearchSpace,
    with_consensus: bool,
) -> Result<MemberClusters> {
    if centers.descriptors.dim() != pool.descriptors.dim() {
        return Err(Error::DimensionMismatch(format!(
            "center descriptors {} vs pool descriptors {}",
            centers.descriptors.dim(),
            pool.descriptors.dim()
        )));
    }
    let neighbors = match space {
        SearchSpace::Descriptor => knn_descriptors(pool.descriptors, centers.descriptors, k)?,
        SearchSpace::Euclidean => knn_points(pool.points, centers.points, k)?,
    };
    let mutual = if with_consensus {
        Some(mutual_nearest(centers, pool, space)?)
    } else {
        None
    };
    let mut consistency = Vec::with_capacity(centers.len() * k);
    let mut consensus = Vec::with_capacity(centers.len() * k);
    for (i, nb) in neighbors.iter().enumerate() {
        let members: Vec<&[f64]> = nb.indices.iter().map(|&j| pool.descriptors.row(j)).collect();
        consistency.extend(feature_consistency(centers.descriptors.row(i), &members)?);
        for &j in &nb.indices {
            let b = mutual
                .as_ref()
                .is_some_and(|(s2t, t2s)| bilateral_consensus(i, j, s2t, t2s));
            consensus.push(if b { 1.0 } else { 0.0 });
        }
    }
    Ok(MemberClusters {
        k,
        neighbors,
        consistency,
        consensus,
    })
}

/// Closed-form member scoring used in deterministic mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeterministicScorer {
    /// Divides the search-space distance.
    pub temperature: f64,
    pub consensus_bonus: f64,
    pub use_consistency: bool,
    pub use_consensus: bool,
}

impl DeterministicScorer {
    pub fn score(&self, clusters: &MemberClusters, center: usize, member: usize) -> f64 {
        let r = center * clusters.k + member;
        let mut s = -clusters.neighbors[center].distances[member] / self.temperature;
        if self.use_consistency {
            s += clusters.consistency[r];
        }
        if self.use_consensus {
            s += self.consensus_bonus * clusters.consensus[r];
        }
        s
    }
}

/// Output of one soft-matching pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMatch {
    pub points: Vec<Point3<f64>>,
    pub descriptors: Descriptors,
    /// Softmax weights per center, aligned with the cluster members.
    pub weights: Vec<Vec<f64>>,
    pub confidences: Option<Vec<f64>>,
}

fn aggregate_descriptors(pool: MatchSet<'_>, clusters: &MemberClusters, weights: &[Vec<f64>]) -> Descriptors {
    let dim = pool.descriptors.dim();
    let mut out = Descriptors::zeros(clusters.len(), dim);
    for (i, (nb, w)) in clusters.neighbors.iter().zip(weights).enumerate() {
        let row = out.row_mut(i);
        for (&j, wj) in nb.indices.iter().zip(w) {
            for (o, x) in row.iter_mut().zip(pool.descriptors.row(j)) {
                *o += wj * x;
            }
        }
        normalize_or_uniform(row);
    }
    out
}

/// Deterministic soft-matching pass: softmax over scores (each multiplied by
/// the center's mask value when given); confidence = largest member weight.
pub fn soft_match_deterministic(
    pool: MatchSet<'_>,
    clusters: &MemberClusters,
    scorer: &DeterministicScorer,
    mask: Option<&[f64]>,
    with_confidence: bool,
) -> SoftMatch {
    let mut points = Vec::with_capacity(clusters.len());
    let mut weights = Vec::with_capacity(clusters.len());
    for (i, nb) in clusters.neighbors.iter().enumerate() {
        let m = mask.map_or(1.0, |m| m[i]);
        let scores: Vec<f64> = (0..nb.len()).map(|j| m * scorer.score(clusters, i, j)).collect();
        let w = softmax(&scores);
        let p = nb
            .indices
            .iter()
            .zip(&w)
            .fold(Vector3::zeros(), |acc, (&j, wj)| acc + *wj * pool.points[j].coords);
        points.push(Point3::from(p));
        weights.push(w);
    }
    let confidences = with_confidence.then(|| {
        weights
            .iter()
            .map(|w| w.iter().copied().fold(0.0, f64::max))
            .collect()
    });
    SoftMatch {
        descriptors: aggregate_descriptors(pool, clusters, &weights),
        points,
        weights,
        confidences,
    }
}

/// Learned-mode pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct LearnedMatch {
    pub matched: SoftMatch,
    /// `N × 3` aggregated coordinates.
    pub points_var: Var,
    /// `N × 1` confidences.
    pub confidence_var: Option<Var>,
}

/// Inputs of a learned pass beyond the clusters.
#[derive(Debug, Clone, Copy)]
pub struct LearnedPass<'a> {
    pub net: &'a SoftMatchNet,
    pub bound: &'a BoundSoftMatchNet,
    /// Geometric features are divided by this length (m).
    pub geometry_scale: f64,
    pub use_consistency: bool,
    pub use_consensus: bool,
    /// Initial per-center mask; `None` leaves the feature map unmasked.
    pub mask: Option<&'a [f64]>,
    pub with_confidence: bool,
}

/// Per-member feature rows `[s, b, offset/scale, dist/scale, d_center, d_member]`.
pub fn member_features(
    centers: MatchSet<'_>,
    pool: MatchSet<'_>,
    clusters: &MemberClusters,
    geometry_scale: f64,
    use_consistency: bool,
    use_consensus: bool,
) -> Matrix {
    let c = pool.descriptors.dim();
    let k = clusters.k;
    let mut x = Matrix::zeros(clusters.len() * k, crate::learned::member_feature_dim(c));
    for (i, nb) in clusters.neighbors.iter().enumerate() {
        for (m, &j) in nb.indices.iter().enumerate() {
            let r = i * k + m;
            let row = x.row_mut(r);
            if use_consistency {
                row[0] = clusters.consistency[r];
            }
            if use_consensus {
                row[1] = clusters.consensus[r];
            }
            let off = (pool.points[j] - centers.points[i]) / geometry_scale;
            row[2..5].copy_from_slice(off.as_slice());
            row[5] = off.norm();
            row[6..6 + c].copy_from_slice(centers.descriptors.row(i));
            row[6 + c..].copy_from_slice(pool.descriptors.row(j));
        }
    }
    x
}

/// Learned soft-matching pass. `pool_var` holds the pool coordinates
/// (`|pool| × 3`) so gradients reach whatever produced them; member features
/// enter the tape as constants.
pub fn soft_match_learned(
    tape: &mut Tape,
    centers: MatchSet<'_>,
    pool: MatchSet<'_>,
    pool_var: Var,
    clusters: &MemberClusters,
    pass: &LearnedPass<'_>,
) -> Result<LearnedMatch> {
    let k = clusters.k;
    let x = member_features(
        centers,
        pool,
        clusters,
        pass.geometry_scale,
        pass.use_consistency,
        pass.use_consensus,
    );
    if x.cols() != pass.net.mlp.in_dim() {
        return Err(Error::DimensionMismatch(format!(
            "member features {} wide, network expects {}",
            x.cols(),
            pass.net.mlp.in_dim()
        )));
    }
    let xv = tape.leaf(x);
    let mut f = pass.net.mlp.forward_tape(tape, &pass.bound.mlp, xv);
    if let (Some(mask), Some(mask_net), Some(mask_bound)) =
        (pass.mask, &pass.net.mask, &pass.bound.mask)
    {
        let init = tape.leaf(Matrix::from_vec(mask.len(), 1, mask.to_vec())?);
        let channel = mask_net.forward_tape(tape, mask_bound, init);
        let per_member = tape.group_broadcast(channel, k);
        f = tape.mul(f, per_member);
    }
    let pooled = tape.group_max(f, k);
    let spread = tape.group_broadcast(pooled, k);
    let joint = tape.concat_cols(f, spread);
    let scores = pass.net.score.forward_tape(tape, &pass.bound.score, joint);
    let w = tape.group_softmax(scores, k);
    let members = tape.gather(pool_var, clusters.flat_indices());
    let points_var = tape.group_weighted_sum(w, members, k);
    let confidence_var = pass
        .with_confidence
        .then(|| pass.net.confidence.forward_tape(tape, &pass.bound.confidence, pooled));

    let wv = tape.value(w).as_slice();
    let weights: Vec<Vec<f64>> = wv.chunks_exact(k).map(<[f64]>::to_vec).collect();
    let pv = tape.value(points_var);
    let points = (0..pv.rows())
        .map(|i| Point3::new(pv[(i, 0)], pv[(i, 1)], pv[(i, 2)]))
        .collect();
    let confidences = confidence_var.map(|v| tape.value(v).as_slice().to_vec());
    Ok(LearnedMatch {
        matched: SoftMatch {
            descriptors: aggregate_descriptors(pool, clusters, &weights),
            points,
            weights,
            confidences,
        },
        points_var,
        confidence_var,
    })
}

/// Matched source keypoints, their virtual targets and confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub source: Vec<Point3<f64>>,
    pub virtual_targets: Vec<Point3<f64>>,
    pub confidences: Vec<f64>,
    pub descriptors: Descriptors,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Tape handles of a learned coarse match.
#[derive(Debug, Clone, Copy)]
pub struct CoarseVars {
    pub targets: Var,
    pub confidences: Var,
}

#[derive(Debug, Clone)]
pub struct CoarseMatch {
    pub correspondences: CorrespondenceSet,
    /// Pool cardinality of the final matching stage.
    pub final_pool_size: usize,
    pub vars: Option<CoarseVars>,
}

/// Learned-mode context threaded through the matching stages.
pub struct LearnedContext<'a> {
    pub tape: &'a mut Tape,
    pub net: &'a crate::learned::MatchingNet,
    pub bound: &'a crate::learned::BoundMatchingNet,
}

fn points_matrix(points: &[Point3<f64>]) -> Matrix {
    Matrix::from_vec(
        points.len(),
        3,
        points.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
    )
    .expect("three columns")
}

/// Double-soft matching of the level-3 source against the level-3 target.
///
/// Stage 1 aggregates `k2` target neighbors of every source keypoint in
/// descriptor space; stage 2 matches against the aggregated points (plus the
/// original target with sparse-to-denser) using `k1` neighbors, adds the
/// consensus feature and predicts confidences. With `double_soft` off a single
/// stage matches directly against the original target.
pub fn double_soft_match(
    src: &PyramidLevel,
    tgt: &PyramidLevel,
    cfg: &PipelineConfig,
    mut learned: Option<LearnedContext<'_>>,
) -> Result<CoarseMatch> {
    if cfg.mode == Mode::Learned && learned.is_none() {
        return Err(Error::Config("learned mode needs matching parameters".into()));
    }
    let flags = cfg.flags;
    let src_set = MatchSet::new(&src.keypoints, &src.descriptors)?;
    let tgt_set = MatchSet::new(&tgt.keypoints, &tgt.descriptors)?;
    let scale = cfg.level(3).descriptor_radius;
    let fs = flags.feature_consistency;
    let tgt_var = learned.as_mut().map(|l| l.tape.leaf(points_matrix(&tgt.keypoints)));

    // Pool of the final stage: coordinates, descriptors and tape handle.
    let (pool_points, pool_desc, pool_var) = if flags.double_soft {
        let clusters = build_clusters(src_set, tgt_set, cfg.k2, SearchSpace::Descriptor, false)?;
        let (stage1, var1) = match learned.as_mut() {
            None => (
                soft_match_deterministic(
                    tgt_set,
                    &clusters,
                    &DeterministicScorer {
                        temperature: cfg.coarse_temperature,
                        consensus_bonus: cfg.consensus_bonus,
                        use_consistency: fs,
                        use_consensus: false,
                    },
                    None,
                    false,
                ),
                None,
            ),
            Some(l) => {
                let pass = LearnedPass {
                    net: &l.net.coarse1,
                    bound: &l.bound.coarse1,
                    geometry_scale: scale,
                    use_consistency: fs,
                    use_consensus: false,
                    mask: None,
                    with_confidence: false,
                };
                let m = soft_match_learned(l.tape, src_set, tgt_set, tgt_var.unwrap(), &clusters, &pass)?;
                (m.matched, Some(m.points_var))
            }
        };
        if flags.sparse_to_denser {
            let mut pts = stage1.points.clone();
            pts.extend_from_slice(&tgt.keypoints);
            let desc = stage1.descriptors.concat(&tgt.descriptors)?;
            let var = match (learned.as_mut(), var1) {
                (Some(l), Some(v)) => Some(l.tape.concat_rows(v, tgt_var.unwrap())),
                _ => None,
            };
            (pts, desc, var)
        } else {
            (stage1.points, stage1.descriptors, var1)
        }
    } else {
        (tgt.keypoints.clone(), tgt.descriptors.clone(), tgt_var)
    };

    let pool = MatchSet::new(&pool_points, &pool_desc)?;
    let clusters = build_clusters(src_set, pool, cfg.k1, SearchSpace::Descriptor, true)?;
    let (matched, vars) = match learned.as_mut() {
        None => {
            let mut m = soft_match_deterministic(
                pool,
                &clusters,
                &DeterministicScorer {
                    temperature: cfg.coarse_temperature,
                    consensus_bonus: cfg.consensus_bonus,
                    use_consistency: fs,
                    use_consensus: true,
                },
                None,
                true,
            );
            let geo = verified_consistency(&src.keypoints, &m.points, cfg.consistency_tolerance);
            if let Some(c) = m.confidences.as_mut() {
                for (ci, gi) in c.iter_mut().zip(&geo) {
                    *ci = (*ci * gi).clamp(CONFIDENCE_FLOOR, 1.0 - CONFIDENCE_FLOOR);
                }
            }
            (m, None)
        }
        Some(l) => {
            let pass = LearnedPass {
                net: &l.net.coarse2,
                bound: &l.bound.coarse2,
                geometry_scale: scale,
                use_consistency: fs,
                use_consensus: true,
                mask: None,
                with_confidence: true,
            };
            let m = soft_match_learned(l.tape, src_set, pool, pool_var.unwrap(), &clusters, &pass)?;
            let vars = CoarseVars {
                targets: m.points_var,
                confidences: m.confidence_var.unwrap(),
            };
            (m.matched, Some(vars))
        }
    };
    Ok(CoarseMatch {
        correspondences: CorrespondenceSet {
            source: src.keypoints.clone(),
            virtual_targets: matched.points,
            confidences: matched.confidences.unwrap_or_default(),
            descriptors: matched.descriptors,
        },
        final_pool_size: pool_points.len(),
        vars,
    })
}

/// Deterministic confidences are kept inside `(0, 1)` by this margin.
pub const CONFIDENCE_FLOOR: f64 = 1e-6;

/// Spectral pairwise-length consistency of correspondences, scaled to a
/// maximum of 1.
///
/// Pair compatibility is `max(0, 1 − (Δ/τ)²)` with `Δ` the difference of the
/// source and target pairwise distances; the leading eigenvector of the
/// compatibility matrix comes from power iteration.
pub fn spatial_consistency(source: &[Point3<f64>], target: &[Point3<f64>], tolerance: f64) -> Vec<f64> {
    let compat = pair_compatibility(source, target, tolerance);
    leading_eigenvector(&compat, source.len())
}

/// Power iteration on a symmetric non-negative matrix, scaled to a maximum of 1.
fn leading_eigenvector(compat: &[f64], n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut next = vec![0.0; n];
    for _ in 0..50 {
        for (i, o) in next.iter_mut().enumerate() {
            *o = compat[i * n..(i + 1) * n].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return vec![1.0; n];
        }
        for (a, b) in v.iter_mut().zip(&next) {
            *a = b / norm;
        }
    }
    let max = v.iter().copied().fold(0.0, f64::max);
    v.iter().map(|x| x / max).collect()
}

/// Residual kernel width of the verification as a multiple of the pairwise tolerance.
pub const RESIDUAL_SCALE: f64 = 2.0;

/// Reweighted refits of the winning verification pose.
pub const VERIFICATION_REFITS: usize = 5;

/// Number of top spectral correspondences tried as verification seeds.
pub const VERIFICATION_SEEDS: usize = 16;

fn pair_compatibility(source: &[Point3<f64>], target: &[Point3<f64>], tolerance: f64) -> Vec<f64> {
    let n = source.len();
    let mut compat = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = ((source[i] - source[j]).norm() - (target[i] - target[j]).norm()) / tolerance;
            let c = (1.0 - d * d).max(0.0);
            compat[i * n + j] = c;
            compat[j * n + i] = c;
        }
    }
    compat
}

fn residual_scores(source: &[Point3<f64>], target: &[Point3<f64>], pose: &RigidTransform, tolerance: f64) -> Vec<f64> {
    source
        .iter()
        .zip(target)
        .map(|(s, t)| {
            let r = (pose.transform_point(s) - t).norm() / tolerance;
            (1.0 - r * r).max(0.0)
        })
        .collect()
}

/// Spectral consistency followed by pose verification.
///
/// Each of the [`VERIFICATION_SEEDS`] best spectral correspondences proposes a
/// pose fitted to itself and its compatible partners; the proposal whose
/// residuals `r` collect the largest `Σ max(0, 1 − (r/τ)²)` scores every
/// correspondence with that kernel, after [`VERIFICATION_REFITS`] refits of the
/// pose to its own kernel weights. Falls back to the spectral scores when no
/// proposal is solvable.
pub fn verified_consistency(source: &[Point3<f64>], target: &[Point3<f64>], tolerance: f64) -> Vec<f64> {
    let n = source.len();
    let compat = pair_compatibility(source, target, tolerance);
    let spectral = leading_eigenvector(&compat, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| spectral[b].total_cmp(&spectral[a]).then(a.cmp(&b)));
    let mut best: Option<(f64, Vec<f64>)> = None;
    for &seed in order.iter().take(VERIFICATION_SEEDS) {
        let mut w = compat[seed * n..(seed + 1) * n].to_vec();
        w[seed] = 1.0;
        let Ok(pose) = WeightedCorrespondences::new(source, target, &w).and_then(|c| weighted_kabsch(&c)) else {
            continue;
        };
        let scores = residual_scores(source, target, &pose, RESIDUAL_SCALE * tolerance);
        let total: f64 = scores.iter().sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, scores));
        }
    }
    let Some((_, mut scores)) = best.filter(|(t, _)| *t > 0.0) else {
        return spectral;
    };
    for _ in 0..VERIFICATION_REFITS {
        let Ok(pose) = WeightedCorrespondences::new(source, target, &scores).and_then(|c| weighted_kabsch(&c)) else {
            break;
        };
        let next = residual_scores(source, target, &pose, RESIDUAL_SCALE * tolerance);
        if next.iter().all(|&v| v == 0.0) {
            break;
        }
        scores = next;
    }
    scores
}

/// Weighted Kabsch over the correspondences and their confidences.
pub fn coarse_pose(corr: &CorrespondenceSet) -> Result<RigidTransform> {
    weighted_kabsch(&WeightedCorrespondences::new(
        &corr.source,
        &corr.virtual_targets,
        &corr.confidences,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AblationFlags;

    #[test]
    fn consistency_examples() {
        let s = 0.5f64.sqrt();
        let r = feature_consistency(&[1.0, 0.0], &[&[s, s]]).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12, "single member normalizes to 1");
        assert!((cosine(&[1.0, 0.0], &[s, s]).unwrap() - s).abs() < 1e-12);
        assert!((cosine(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-12);
        // Members with cosines 0.5 and 0.25 against the center (1, 0).
        let a = [0.5, 0.75f64.sqrt()];
        let b = [0.25, (1.0 - 0.0625f64).sqrt()];
        let r = feature_consistency(&[1.0, 0.0], &[&a, &b]).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12 && (r[1] - 0.5).abs() < 1e-12);
        assert!(feature_consistency(&[0.0, 0.0], &[&a]).is_err());
    }

    #[test]
    fn consensus_examples() {
        assert!(bilateral_consensus(0, 0, &[0], &[0]));
        // Source 0 picks target 1, but target 1 prefers source 2.
        assert!(!bilateral_consensus(0, 1, &[1, 0, 1], &[1, 2]));
        let p = [Point3::new(0.0, 0.0, 0.0), Point3::new(5.0, 0.0, 0.0)];
        let d = Descriptors::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let set = MatchSet::new(&p, &d).unwrap();
        let (s2t, t2s) = mutual_nearest(set, set, SearchSpace::Descriptor).unwrap();
        assert!(bilateral_consensus(0, 0, &s2t, &t2s) && bilateral_consensus(1, 1, &s2t, &t2s));
        assert!(!bilateral_consensus(0, 1, &s2t, &t2s));
    }

    fn orthogonal_level(n: usize) -> PyramidLevel {
        let keypoints: Vec<_> = (0..n)
            .map(|i| Point3::new((i % 4) as f64 * 3.0, (i / 4) as f64 * 3.0, (i % 3) as f64))
            .collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                v
            })
            .collect();
        PyramidLevel {
            level: 3,
            keypoints,
            descriptors: Descriptors::from_rows(&rows).unwrap(),
            uncertainties: vec![0.1; n],
            clusters: Vec::new(),
            weights: Vec::new(),
        }
    }

    #[test]
    fn self_match_with_orthogonal_descriptors() {
        let lvl = orthogonal_level(16);
        let set = MatchSet::new(&lvl.keypoints, &lvl.descriptors).unwrap();
        let clusters = build_clusters(set, set, 4, SearchSpace::Descriptor, false).unwrap();
        let scorer = DeterministicScorer {
            temperature: 0.05,
            consensus_bonus: 1.0,
            use_consistency: true,
            use_consensus: false,
        };
        let m = soft_match_deterministic(set, &clusters, &scorer, None, true);
        for (p, q) in m.points.iter().zip(&lvl.keypoints) {
            assert!((p - q).norm() < 1e-9);
        }
        for w in &m.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let one = build_clusters(set, set, 1, SearchSpace::Euclidean, false).unwrap();
        let m = soft_match_deterministic(set, &one, &scorer, None, false);
        assert_eq!(m.points, lvl.keypoints);
    }

    fn small_cfg(n: usize) -> PipelineConfig {
        let mut cfg = PipelineConfig::toy();
        cfg.levels[2].keypoints = n;
        cfg.levels[2].channels = n;
        cfg.k1 = 2;
        cfg.k2 = 2;
        cfg
    }

    #[test]
    fn pool_size_follows_sparse_to_denser() {
        let lvl = orthogonal_level(16);
        let mut cfg = small_cfg(16);
        let m = double_soft_match(&lvl, &lvl, &cfg, None).unwrap();
        assert_eq!(m.final_pool_size, 32);
        assert!(m.correspondences.confidences.iter().all(|&c| c > 0.0 && c < 1.0));
        cfg.flags.sparse_to_denser = false;
        assert_eq!(double_soft_match(&lvl, &lvl, &cfg, None).unwrap().final_pool_size, 16);
        cfg.flags = AblationFlags::all_off();
        assert_eq!(double_soft_match(&lvl, &lvl, &cfg, None).unwrap().final_pool_size, 16);
    }

    #[test]
    fn self_registration_is_identity() {
        let lvl = orthogonal_level(16);
        let cfg = small_cfg(16);
        let m = double_soft_match(&lvl, &lvl, &cfg, None).unwrap();
        let t = coarse_pose(&m.correspondences).unwrap();
        assert!((t.rotation - nalgebra::Matrix3::identity()).norm() < 1e-9);
        assert!(t.translation.norm() < 1e-9);
    }

    #[test]
    fn coarse_pose_ignores_zero_confidence_outlier() {
        let gt = RigidTransform::from_axis_angle(Vector3::z(), 0.3, Vector3::new(1.0, -2.0, 0.5));
        let source: Vec<_> = (0..12)
            .map(|i| Point3::new(i as f64, (i * i % 7) as f64, (i % 3) as f64))
            .collect();
        let mut targets: Vec<_> = source.iter().map(|p| gt.transform_point(p)).collect();
        targets[5] += Vector3::new(40.0, -30.0, 8.0);
        let mut conf = vec![0.9; 12];
        conf[5] = 0.0;
        let corr = |c: &[f64]| CorrespondenceSet {
            source: source.clone(),
            virtual_targets: targets.clone(),
            confidences: c.to_vec(),
            descriptors: Descriptors::zeros(12, 1),
        };
        let exact = coarse_pose(&corr(&conf)).unwrap();
        conf[5] = 1e-9;
        let near = coarse_pose(&corr(&conf)).unwrap();
        assert!((exact.translation - gt.translation).norm() < 1e-9);
        assert!((near.translation - exact.translation).norm() < 1e-6);
        assert!((near.rotation - exact.rotation).norm() < 1e-6);
    }

    #[test]
    fn spatial_consistency_flags_outliers() {
        let src: Vec<_> = (0..20)
            .map(|i| Point3::new((i % 5) as f64 * 4.0, (i / 5) as f64 * 4.0, 0.0))
            .collect();
        let mut tgt = src.clone();
        tgt[3] = Point3::new(60.0, -20.0, 5.0);
        let g = spatial_consistency(&src, &tgt, 1.0);
        assert!(g[3] < 0.2);
        assert!(g.iter().enumerate().filter(|(i, _)| *i != 3).all(|(_, &v)| v > 0.8));
    }

    #[test]
    fn learned_pass_shapes() {
        use crate::learned::MatchingNet;
        let lvl = orthogonal_level(16);
        let mut cfg = small_cfg(16);
        cfg.mode = Mode::Learned;
        let net = MatchingNet::new(&cfg, 5);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let m = double_soft_match(
            &lvl,
            &lvl,
            &cfg,
            Some(LearnedContext {
                tape: &mut tape,
                net: &net,
                bound: &bound,
            }),
        )
        .unwrap();
        let vars = m.vars.unwrap();
        assert_eq!(tape.value(vars.targets).shape(), (16, 3));
        assert!(m.correspondences.confidences.iter().all(|&c| c > 0.0 && c < 1.0));
    }
}
