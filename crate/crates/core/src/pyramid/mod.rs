//! Three-level keypoint pyramid: WFPS candidates, cluster aggregation into
//! virtual keypoints, descriptors and uncertainties.

pub mod descriptor;

use nalgebra::Point3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{Descriptors, PointCloud};
use crate::config::{Mode, PipelineConfig};
use crate::error::{Error, Result};
use crate::neural::{softmax, Activation, DenseStack, Matrix};
use crate::sampling::{knn_points, random_subsample, voxel_downsample, wfps, NeighborIndex};

pub use descriptor::{finalize_descriptors, handcrafted_features, normalize_or_uniform, SupportCloud};

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    /// 1-based depth; 3 is the sparsest.
    pub level: usize,
    pub keypoints: Vec<Point3<f64>>,
    pub descriptors: Descriptors,
    pub uncertainties: Vec<f64>,
    /// Input-point members of each keypoint's cluster.
    pub clusters: NeighborIndex,
    /// Aggregation weights, aligned with `clusters`.
    pub weights: Vec<Vec<f64>>,
}

impl PyramidLevel {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    /// Levels 1, 2, 3 in order.
    pub levels: Vec<PyramidLevel>,
}

impl Pyramid {
    pub fn level(&self, l: usize) -> &PyramidLevel {
        &self.levels[l - 1]
    }
}

/// Frozen parameters of the learned detector for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorLevelNet {
    /// Per-member geometry `[offset/r, dist/r]` → C.
    pub attention: DenseStack,
    /// `[member, cluster max]` (2C) → score.
    pub attention_score: DenseStack,
    /// `[offset/r, dist/r, handcrafted]` → C, max-pooled into the descriptor.
    pub descriptor: DenseStack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorNet {
    pub levels: Vec<DetectorLevelNet>,
}

impl DetectorNet {
    pub fn new(cfg: &PipelineConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = cfg
            .levels
            .iter()
            .map(|l| {
                let c = l.channels;
                DetectorLevelNet {
                    attention: DenseStack::new(&[4, c, c], &[Activation::Relu; 2], &mut rng),
                    attention_score: DenseStack::new(&[2 * c, 1], &[Activation::None], &mut rng),
                    descriptor: DenseStack::new(
                        &[4 + descriptor::RAW_DIM, c, c],
                        &[Activation::Relu; 2],
                        &mut rng,
                    ),
                }
            })
            .collect();
        Self { levels }
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, net) in self.levels.iter().enumerate() {
            for (part, stack) in [
                ("attention", &net.attention),
                ("attention_score", &net.attention_score),
                ("descriptor", &net.descriptor),
            ] {
                for (i, p) in stack.params().into_iter().enumerate() {
                    out.push((format!("detector.l{}.{part}.{i}", l + 1), p));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.levels
            .iter_mut()
            .flat_map(|n| {
                let mut v = n.attention.params_mut();
                v.extend(n.attention_score.params_mut());
                v.extend(n.descriptor.params_mut());
                v
            })
            .collect()
    }
}

/// Softmax of `−d/τ` over one cluster, the convex combination it induces, and
/// the weighted mean member distance to that combination.
///
/// A zero temperature (all members coincident with the candidate) falls back
/// to uniform weights.
pub fn aggregate_cluster(
    members: &[Point3<f64>],
    distances: &[f64],
    tau: f64,
) -> (Point3<f64>, Vec<f64>, f64) {
    let weights = if tau > 0.0 {
        softmax(&distances.iter().map(|d| -d / tau).collect::<Vec<_>>())
    } else {
        vec![1.0 / members.len() as f64; members.len()]
    };
    let (kp, sigma) = weighted_center(members, &weights);
    (kp, weights, sigma)
}

fn weighted_center(members: &[Point3<f64>], weights: &[f64]) -> (Point3<f64>, f64) {
    let kp = Point3::from(
        members
            .iter()
            .zip(weights)
            .fold(nalgebra::Vector3::zeros(), |a, (p, w)| a + *w * p.coords),
    );
    let sigma = members
        .iter()
        .zip(weights)
        .map(|(p, w)| w * (p - kp).norm())
        .sum();
    (kp, sigma)
}

fn level_seed(seed: u64, level: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((level as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Builds one pyramid level from the previous level's points and uncertainties.
pub fn build_level(
    input_points: &[Point3<f64>],
    input_uncertainties: &[f64],
    support: &SupportCloud<'_>,
    cfg: &PipelineConfig,
    level: usize,
    detector: Option<&DetectorLevelNet>,
) -> Result<PyramidLevel> {
    let lc = cfg.level(level);
    let n = lc.keypoints;
    if n > input_points.len() {
        return Err(Error::DegenerateInput(format!(
            "level {level} needs {n} keypoints but only {} inputs",
            input_points.len()
        )));
    }
    let k = cfg.k1.min(input_points.len());
    let candidates = wfps(input_points, input_uncertainties, n, level_seed(cfg.seed, level))?;
    let centers: Vec<Point3<f64>> = candidates.iter().map(|&i| input_points[i]).collect();
    let clusters = knn_points(input_points, &centers, k)?;

    let net = match cfg.mode {
        Mode::Learned => Some(detector.ok_or_else(|| {
            Error::Config("learned mode needs detector parameters".into())
        })?),
        Mode::Deterministic => None,
    };

    let mut keypoints = Vec::with_capacity(n);
    let mut uncertainties = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut radii = Vec::with_capacity(n);
    for (center, nb) in centers.iter().zip(&clusters) {
        let members: Vec<Point3<f64>> = nb.indices.iter().map(|&i| input_points[i]).collect();
        let tau = nb.distances.iter().sum::<f64>() / nb.len() as f64;
        let (kp, w, sigma) = match net {
            None => aggregate_cluster(&members, &nb.distances, tau),
            Some(net) => {
                let feats = member_geometry(center, &members, &nb.distances, tau);
                let w = learned_attention(net, &feats, k)?;
                let (kp, sigma) = weighted_center(&members, &w);
                (kp, w, sigma)
            }
        };
        keypoints.push(kp);
        uncertainties.push(sigma);
        weights.push(w);
        radii.push(if tau > 0.0 { tau } else { 1.0 });
    }

    let raw = descriptor::raw_features(&keypoints, support, lc.descriptor_radius);
    let descriptors = match net {
        None => finalize_descriptors(&raw.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), lc.channels),
        Some(net) => {
            let mut rows = Vec::with_capacity(n);
            // Standardized handcrafted features feed the descriptor MLP.
            let std = finalize_descriptors(&raw.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), descriptor::RAW_DIM);
            for (i, nb) in clusters.iter().enumerate() {
                let members: Vec<Point3<f64>> = nb.indices.iter().map(|&j| input_points[j]).collect();
                let dists: Vec<f64> = members.iter().map(|p| (p - keypoints[i]).norm()).collect();
                let geo = member_geometry(&keypoints[i], &members, &dists, radii[i]);
                let mut feats = Matrix::zeros(k, 4 + descriptor::RAW_DIM);
                for r in 0..k {
                    let row = feats.row_mut(r);
                    row[..4].copy_from_slice(geo.row(r));
                    row[4..].copy_from_slice(std.row(i));
                }
                let f = net.descriptor.forward(&feats)?;
                let mut d = crate::neural::maxpool(&f)?;
                normalize_or_uniform(&mut d);
                rows.push(d);
            }
            Descriptors::from_rows(&rows)?
        }
    };

    Ok(PyramidLevel {
        level,
        keypoints,
        descriptors,
        uncertainties,
        clusters,
        weights,
    })
}

fn member_geometry(
    center: &Point3<f64>,
    members: &[Point3<f64>],
    distances: &[f64],
    radius: f64,
) -> Matrix {
    let r = if radius > 0.0 { radius } else { 1.0 };
    let mut m = Matrix::zeros(members.len(), 4);
    for (i, (p, d)) in members.iter().zip(distances).enumerate() {
        let off = (p - center) / r;
        m.row_mut(i).copy_from_slice(&[off.x, off.y, off.z, d / r]);
    }
    m
}

fn learned_attention(net: &DetectorLevelNet, geometry: &Matrix, k: usize) -> Result<Vec<f64>> {
    let f = net.attention.forward(geometry)?;
    let g = crate::neural::maxpool(&f)?;
    let mut joint = Matrix::zeros(k, 2 * f.cols());
    for r in 0..k {
        let row = joint.row_mut(r);
        row[..f.cols()].copy_from_slice(f.row(r));
        row[f.cols()..].copy_from_slice(&g);
    }
    let scores = net.attention_score.forward(&joint)?;
    Ok(softmax(scores.as_slice()))
}

/// Voxel grid followed by a seeded random subsample to `cfg.input_points`.
pub fn preprocess(raw: &PointCloud, cfg: &PipelineConfig, seed: u64) -> Result<PointCloud> {
    raw.validate()?;
    let voxels = voxel_downsample(raw, cfg.voxel_size)?;
    Ok(random_subsample(&voxels, cfg.input_points, seed))
}

/// Builds all three levels from an already preprocessed cloud.
pub fn build_pyramid_from_points(
    points: &[Point3<f64>],
    cfg: &PipelineConfig,
    detector: Option<&DetectorNet>,
) -> Result<Pyramid> {
    let support = SupportCloud::new(points);
    let mut levels: Vec<PyramidLevel> = Vec::with_capacity(3);
    for l in 1..=3 {
        let net = detector.map(|d| &d.levels[l - 1]);
        let next = match levels.last() {
            None => build_level(points, &vec![0.0; points.len()], &support, cfg, l, net)?,
            Some(prev) => build_level(&prev.keypoints, &prev.uncertainties, &support, cfg, l, net)?,
        };
        levels.push(next);
    }
    Ok(Pyramid { levels })
}

/// Preprocesses `raw` and builds its pyramid; fails if fewer than
/// `cfg.input_points` points survive preprocessing.
pub fn build_pyramid(
    raw: &PointCloud,
    cfg: &PipelineConfig,
    detector: Option<&DetectorNet>,
    subsample_seed: u64,
) -> Result<Pyramid> {
    let cloud = preprocess(raw, cfg, subsample_seed)?;
    if cloud.len() < cfg.input_points {
        return Err(Error::DegenerateInput(format!(
            "{} points after preprocessing, {} required",
            cloud.len(),
            cfg.input_points
        )));
    }
    build_pyramid_from_points(&cloud.points, cfg, detector)
}
