//! Pipeline hyperparameters and ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Handcrafted descriptors and closed-form scoring; no parameters.
    Deterministic,
    /// Shared-MLP scoring, confidence and mask networks.
    Learned,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Mode::Deterministic),
            "learned" => Ok(Mode::Learned),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Deterministic => "deterministic",
            Mode::Learned => "learned",
        })
    }
}

/// Switches for the matching components that the ablation study removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Two chained soft-matching stages instead of one.
    pub double_soft: bool,
    /// Second stage matches against updated ∪ original target keypoints.
    pub sparse_to_denser: bool,
    /// Cluster-normalized cosine similarity as a similarity feature.
    pub feature_consistency: bool,
    /// Confidence mask carried from deeper to shallower layers.
    pub mask: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        Self {
            double_soft: true,
            sparse_to_denser: true,
            feature_consistency: true,
            mask: true,
        }
    }

    pub fn all_off() -> Self {
        Self {
            double_soft: false,
            sparse_to_denser: false,
            feature_consistency: false,
            mask: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub keypoints: usize,
    pub channels: usize,
    /// Support radius (m) of the handcrafted descriptor.
    pub descriptor_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub voxel_size: f64,
    pub input_points: usize,
    pub levels: [LevelConfig; 3],
    /// Cluster size for keypoint aggregation and for the second matching stage.
    pub k1: usize,
    /// Cluster size of the first matching stage.
    pub k2: usize,
    /// Euclidean neighbors per keypoint in fine registration.
    pub k_fine: usize,
    /// Deeper-layer neighbors used when upsampling confidences.
    pub k_upsample: usize,
    pub alpha: f64,
    pub flags: AblationFlags,
    pub mode: Mode,
    pub seed: u64,
    /// Descriptor-distance temperature of the deterministic coarse scorer.
    pub coarse_temperature: f64,
    /// Euclidean temperature (m) of the deterministic fine scorer.
    pub fine_temperature: f64,
    /// Residual radius (m) at level 1 beyond which deterministic fine
    /// correspondences get zero confidence; it doubles per level.
    pub fine_inlier_radius: f64,
    /// Upper bound on refinement passes per fine layer.
    pub fine_iterations: usize,
    /// A fine layer stops early once its increment moves by less than this (m or rad).
    pub fine_tolerance: f64,
    /// Score bonus for mutual nearest neighbors in the deterministic scorer.
    pub consensus_bonus: f64,
    /// Pairwise-length tolerance (m) of the coarse geometric-consistency weight.
    pub consistency_tolerance: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.3,
            input_points: 16384,
            levels: [
                LevelConfig {
                    keypoints: 1024,
                    channels: 64,
                    descriptor_radius: 1.5,
                },
                LevelConfig {
                    keypoints: 512,
                    channels: 128,
                    descriptor_radius: 3.0,
                },
                LevelConfig {
                    keypoints: 256,
                    channels: 256,
                    descriptor_radius: 6.0,
                },
            ],
            k1: 8,
            k2: 8,
            k_fine: 8,
            k_upsample: 8,
            alpha: 1.8,
            flags: AblationFlags::full(),
            mode: Mode::Deterministic,
            seed: 0,
            coarse_temperature: 0.01,
            fine_temperature: 0.5,
            fine_inlier_radius: 1.0,
            fine_iterations: 10,
            fine_tolerance: 1e-5,
            consensus_bonus: 1.0,
            consistency_tolerance: 1.0,
        }
    }
}

impl PipelineConfig {
    /// Reduced sizes for training runs: 2048 points, 256/128/64 keypoints, 16/32/64 channels.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.input_points = 2048;
        for (l, (n, c)) in cfg.levels.iter_mut().zip([(256, 16), (128, 32), (64, 64)]) {
            l.keypoints = n;
            l.channels = c;
        }
        cfg
    }

    /// Deterministic fine inlier radius at `level` (1 or 2).
    pub fn fine_inlier_radius(&self, level: usize) -> f64 {
        self.fine_inlier_radius * (1u32 << (level - 1)) as f64
    }

    pub fn level(&self, level: usize) -> &LevelConfig {
        &self.levels[level - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("voxel_size", self.voxel_size),
            ("alpha", self.alpha),
            ("coarse_temperature", self.coarse_temperature),
            ("fine_temperature", self.fine_temperature),
            ("fine_inlier_radius", self.fine_inlier_radius),
            ("fine_tolerance", self.fine_tolerance),
            ("consistency_tolerance", self.consistency_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("input_points", self.input_points),
            ("k1", self.k1),
            ("k2", self.k2),
            ("k_fine", self.k_fine),
            ("k_upsample", self.k_upsample),
            ("fine_iterations", self.fine_iterations),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.keypoints == 0 || l.channels == 0 || !(l.descriptor_radius > 0.0) {
                return Err(Error::Config(format!("level {} has a zero size", i + 1)));
            }
        }
        if self.levels[0].keypoints > self.input_points
            || self.levels[1].keypoints > self.levels[0].keypoints
            || self.levels[2].keypoints > self.levels[1].keypoints
        {
            return Err(Error::Config("keypoint counts must shrink level by level".into()));
        }
        let n3 = self.levels[2].keypoints;
        if self.k1 * self.k2 > n3 {
            return Err(Error::Config(format!(
                "k1·k2 = {} exceeds the {n3} deepest keypoints",
                self.k1 * self.k2
            )));
        }
        if self.k_fine > self.levels[2].keypoints || self.k_upsample > n3 {
            return Err(Error::Config("fine neighbor counts exceed keypoint counts".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_halving_and_doubling() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let sizes: Vec<_> = cfg.levels.iter().map(|l| (l.keypoints, l.channels)).collect();
        assert_eq!(sizes, vec![(1024, 64), (512, 128), (256, 256)]);
        assert_eq!((cfg.k1, cfg.k2), (8, 8));
        PipelineConfig::toy().validate().unwrap();
    }

    #[test]
    fn infeasible_cluster_sizes_are_rejected() {
        let mut cfg = PipelineConfig::toy();
        cfg.k2 = 9;
        assert!(cfg.validate().is_err());
        assert!("fast".parse::<Mode>().is_err());
    }
}
