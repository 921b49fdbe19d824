//! Trainable matching networks and the full parameter set of learned mode.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::neural::{load_params, save_params, Activation, BoundStack, DenseStack, Matrix, Tape};
use crate::pyramid::DetectorNet;

/// Width of the per-member feature vector: similarity (2), geometry (4) and
/// center ⊕ member descriptors.
pub fn member_feature_dim(channels: usize) -> usize {
    6 + 2 * channels
}

/// Networks of one soft-matching pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMatchNet {
    /// Shared 3-layer MLP over member features.
    pub mlp: DenseStack,
    /// Member feature ⊕ cluster max-pool → score.
    pub score: DenseStack,
    /// Max-pooled feature map → C/2 → 1, sigmoid.
    pub confidence: DenseStack,
    /// Initial scalar mask → C → C, sigmoid (fine passes only).
    pub mask: Option<DenseStack>,
}

impl SoftMatchNet {
    pub fn new(channels: usize, with_mask: bool, rng: &mut ChaCha8Rng) -> Self {
        let c = channels;
        let f = member_feature_dim(c);
        Self {
            mlp: DenseStack::new(&[f, c, c, c], &[Activation::Relu; 3], rng),
            score: DenseStack::new(&[2 * c, 1], &[Activation::None], rng),
            confidence: DenseStack::new(
                &[c, (c / 2).max(1), 1],
                &[Activation::Relu, Activation::Sigmoid],
                rng,
            ),
            mask: with_mask.then(|| {
                DenseStack::new(&[1, c, c], &[Activation::Relu, Activation::Sigmoid], rng)
            }),
        }
    }

    fn stacks(&self) -> Vec<(&'static str, &DenseStack)> {
        let mut v = vec![
            ("mlp", &self.mlp),
            ("score", &self.score),
            ("confidence", &self.confidence),
        ];
        if let Some(m) = &self.mask {
            v.push(("mask", m));
        }
        v
    }

    fn stacks_mut(&mut self) -> Vec<&mut DenseStack> {
        let mut v = vec![&mut self.mlp, &mut self.score, &mut self.confidence];
        if let Some(m) = &mut self.mask {
            v.push(m);
        }
        v
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundSoftMatchNet {
        BoundSoftMatchNet {
            mlp: self.mlp.bind(tape),
            score: self.score.bind(tape),
            confidence: self.confidence.bind(tape),
            mask: self.mask.as_ref().map(|m| m.bind(tape)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundSoftMatchNet {
    pub mlp: BoundStack,
    pub score: BoundStack,
    pub confidence: BoundStack,
    pub mask: Option<BoundStack>,
}

impl BoundSoftMatchNet {
    pub fn grads(&self, net: &SoftMatchNet, g: &crate::neural::Gradients) -> Vec<Matrix> {
        let mut out = self.mlp.grads(&net.mlp, g);
        out.extend(self.score.grads(&net.score, g));
        out.extend(self.confidence.grads(&net.confidence, g));
        if let (Some(b), Some(m)) = (&self.mask, &net.mask) {
            out.extend(b.grads(m, g));
        }
        out
    }
}

/// The four matching passes: coarse stages 1 and 2, fine levels 2 and 1.
///
/// The single-soft variant reuses `coarse2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingNet {
    pub coarse1: SoftMatchNet,
    pub coarse2: SoftMatchNet,
    pub fine2: SoftMatchNet,
    pub fine1: SoftMatchNet,
}

impl MatchingNet {
    pub fn new(cfg: &PipelineConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = |l: usize| cfg.level(l).channels;
        Self {
            coarse1: SoftMatchNet::new(c(3), false, &mut rng),
            coarse2: SoftMatchNet::new(c(3), false, &mut rng),
            fine2: SoftMatchNet::new(c(2), true, &mut rng),
            fine1: SoftMatchNet::new(c(1), true, &mut rng),
        }
    }

    fn nets(&self) -> [(&'static str, &SoftMatchNet); 4] {
        [
            ("coarse1", &self.coarse1),
            ("coarse2", &self.coarse2),
            ("fine2", &self.fine2),
            ("fine1", &self.fine1),
        ]
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (net_name, net) in self.nets() {
            for (part, stack) in net.stacks() {
                for (i, p) in stack.params().into_iter().enumerate() {
                    out.push((format!("matching.{net_name}.{part}.{i}"), p));
                }
            }
        }
        out
    }

    /// Mutable parameters in [`MatchingNet::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        [
            &mut self.coarse1,
            &mut self.coarse2,
            &mut self.fine2,
            &mut self.fine1,
        ]
        .into_iter()
        .flat_map(|n| n.stacks_mut())
        .flat_map(|s| s.params_mut())
        .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMatchingNet {
        BoundMatchingNet {
            coarse1: self.coarse1.bind(tape),
            coarse2: self.coarse2.bind(tape),
            fine2: self.fine2.bind(tape),
            fine1: self.fine1.bind(tape),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (_, net) in self.nets() {
            for (_, s) in net.stacks() {
                s.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BoundMatchingNet {
    pub coarse1: BoundSoftMatchNet,
    pub coarse2: BoundSoftMatchNet,
    pub fine2: BoundSoftMatchNet,
    pub fine1: BoundSoftMatchNet,
}

impl BoundMatchingNet {
    /// Gradients in [`MatchingNet::params_mut`] order.
    pub fn grads(&self, net: &MatchingNet, g: &crate::neural::Gradients) -> Vec<Matrix> {
        let mut out = self.coarse1.grads(&net.coarse1, g);
        out.extend(self.coarse2.grads(&net.coarse2, g));
        out.extend(self.fine2.grads(&net.fine2, g));
        out.extend(self.fine1.grads(&net.fine1, g));
        out
    }
}

/// Frozen detector plus trainable matching networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub detector: DetectorNet,
    pub matching: MatchingNet,
}

impl Model {
    pub fn new(cfg: &PipelineConfig, seed: u64) -> Self {
        Self {
            detector: DetectorNet::new(cfg, seed ^ 0x5EED_DE7E),
            matching: MatchingNet::new(cfg, seed),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut v = self.detector.named_params();
        v.extend(self.matching.named_params());
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, &self.named_params())
    }

    /// Loads tensors into a model shaped by `cfg`; names and shapes must match.
    pub fn load(path: &Path, cfg: &PipelineConfig) -> Result<Self> {
        let tensors = load_params(path)?;
        let mut model = Self::new(cfg, 0);
        let expected: Vec<(String, (usize, usize))> = model
            .named_params()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::malformed(
                path,
                format!("{} tensors, expected {}", tensors.len(), expected.len()),
            ));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(&tensors) {
            if name != got_name || *shape != got.shape() {
                return Err(Error::malformed(
                    path,
                    format!("tensor {got_name} {:?} does not match {name} {shape:?}", got.shape()),
                ));
            }
        }
        let mut slots = model.detector.params_mut();
        slots.extend(model.matching.params_mut());
        for (slot, (_, value)) in slots.into_iter().zip(tensors) {
            *slot = value;
        }
        if !model.named_params().iter().all(|(_, m)| m.is_finite()) {
            return Err(Error::MalformedFile {
                path: path.to_path_buf(),
                msg: "non-finite parameter".into(),
            });
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let cfg = PipelineConfig::toy();
        let model = Model::new(&cfg, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        model.save(&path).unwrap();
        assert_eq!(Model::load(&path, &cfg).unwrap(), model);
        assert!(Model::load(&path, &PipelineConfig::default()).is_err());
    }

    #[test]
    fn param_order_matches_names() {
        let cfg = PipelineConfig::toy();
        let mut net = MatchingNet::new(&cfg, 1);
        let shapes: Vec<_> = net.named_params().iter().map(|(_, m)| m.shape()).collect();
        let shapes_mut: Vec<_> = net.params_mut().iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, shapes_mut);
        net.validate().unwrap();
    }
}
