//! Preprocessing, keypoint-candidate sampling and exact nearest-neighbor search.

mod kdtree;

use std::collections::BTreeMap;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use kdtree::KdTree;

use crate::cloud::{Descriptors, PointCloud};
use crate::error::{Error, Result};

/// Added to uncertainties before inverting them into sampling weights.
pub const WFPS_EPSILON: f64 = 1e-6;

/// Neighbors of one query, ascending by distance with ties broken by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Neighbors {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl Neighbors {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// kNN results for a batch of queries.
pub type NeighborIndex = Vec<Neighbors>;

/// One centroid per occupied voxel, ordered by voxel coordinate.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(voxel_size > 0.0) {
        return Err(Error::DegenerateInput(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    // (coordinate sum, intensity sum, count)
    let mut cells: BTreeMap<[i64; 3], (Vector3<f64>, f64, usize)> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = [
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        ];
        let e = cells.entry(key).or_insert((Vector3::zeros(), 0.0, 0));
        e.0 += p.coords;
        e.1 += cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        e.2 += 1;
    }
    let mut points = Vec::with_capacity(cells.len());
    let mut intensity = Vec::with_capacity(cells.len());
    for (sum, isum, n) in cells.into_values() {
        points.push(Point3::from(sum / n as f64));
        intensity.push(isum / n as f64);
    }
    Ok(PointCloud {
        points,
        intensity: cloud.intensity.as_ref().map(|_| intensity),
    })
}

/// `min(n, |cloud|)` points without replacement, kept in their original order.
pub fn random_subsample(cloud: &PointCloud, n: usize, seed: u64) -> PointCloud {
    if n >= cloud.len() {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, cloud.len(), n).into_vec();
    idx.sort_unstable();
    cloud.select(&idx)
}

/// Weighted farthest point sampling.
///
/// The first index is drawn uniformly from `seed`; each following pick maximizes
/// `d_min(i) / (σ_i + ε)`, lowest index on ties.
pub fn wfps(
    points: &[Point3<f64>],
    uncertainties: &[f64],
    m: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if points.is_empty() {
        return if m == 0 { Ok(Vec::new()) } else { Err(Error::EmptyCloud) };
    }
    let first = rng.random_range(0..points.len());
    wfps_from(points, uncertainties, m, first)
}

/// [`wfps`] with an explicit starting index.
pub fn wfps_from(
    points: &[Point3<f64>],
    uncertainties: &[f64],
    m: usize,
    first: usize,
) -> Result<Vec<usize>> {
    if m > points.len() {
        return Err(Error::DegenerateInput(format!(
            "cannot sample {m} of {} points",
            points.len()
        )));
    }
    if uncertainties.len() != points.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} uncertainties for {} points",
            uncertainties.len(),
            points.len()
        )));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let weights: Vec<f64> = uncertainties
        .iter()
        .map(|s| 1.0 / (s + WFPS_EPSILON))
        .collect();
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; points.len()];
    let mut d_min = vec![f64::INFINITY; points.len()];
    let mut current = first;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == m {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_score = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = (p - c).norm();
            if d < d_min[i] {
                d_min[i] = d;
            }
            if taken[i] {
                continue;
            }
            let mut score = weights[i] * d_min[i];
            if score.is_nan() {
                score = 0.0;
            }
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Exact kNN of 3-D `queries` among `items`.
pub fn knn_points(items: &[Point3<f64>], queries: &[Point3<f64>], k: usize) -> Result<NeighborIndex> {
    check_k(k, items.len())?;
    let tree = KdTree::build(items);
    Ok(queries.iter().map(|q| knn_with_tree(&tree, q, k)).collect())
}

pub fn knn_with_tree(tree: &KdTree<'_>, query: &Point3<f64>, k: usize) -> Neighbors {
    let (indices, distances) = tree
        .nearest(query, k)
        .into_iter()
        .map(|(i, d2)| (i, d2.sqrt()))
        .unzip();
    Neighbors { indices, distances }
}

/// Exact kNN in descriptor space (Euclidean distance between descriptor vectors).
pub fn knn_descriptors(items: &Descriptors, queries: &Descriptors, k: usize) -> Result<NeighborIndex> {
    check_k(k, items.len())?;
    if items.dim() != queries.dim() && !queries.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "item width {} vs query width {}",
            items.dim(),
            queries.dim()
        )));
    }
    Ok(queries
        .rows()
        .map(|q| {
            brute_force(items.len(), k, |i| {
                items
                    .row(i)
                    .iter()
                    .zip(q)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
        })
        .collect())
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        return Err(Error::DegenerateInput(format!(
            "k = {k} exceeds {n} searchable items"
        )));
    }
    Ok(())
}

/// Selects the `k` smallest squared distances by `(distance, index)`.
pub(crate) fn brute_force(n: usize, k: usize, dist2: impl Fn(usize) -> f64) -> Neighbors {
    let mut all: Vec<(f64, usize)> = (0..n).map(|i| (dist2(i), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < n && k > 0 {
        all.select_nth_unstable_by(k - 1, cmp);
    }
    all.truncate(k);
    all.sort_by(cmp);
    Neighbors {
        indices: all.iter().map(|x| x.1).collect(),
        distances: all.iter().map(|x| x.0.sqrt()).collect(),
    }
}
