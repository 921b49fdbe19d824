//! Toy-scale training of the matching networks with the detector frozen.

use std::io::Write;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Mode, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::PairSource;
use crate::geom::RigidTransform;
use crate::learned::Model;
use crate::neural::{kabsch_backward, loss_total, loss_total_grad, Adam, LossConfig, Matrix, DEFAULT_FD_STEP};
use crate::pipeline::{build_pyramids, register_pyramids, StageTrace};
use crate::pyramid::Pyramid;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Relative finite-difference step of the Kabsch backward pass.
    pub fd_step: f64,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            learning_rate: 0.0095,
            fd_step: DEFAULT_FD_STEP,
            seed: 0,
        }
    }
}

/// Pyramids of one pair, built once because the detector is frozen.
pub struct TrainingPair {
    pub src: Pyramid,
    pub tgt: Pyramid,
    pub gt: RigidTransform,
}

/// Mean training loss of one epoch; epoch 0 is the untrained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub curve: Vec<EpochRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn prepare_pairs(source: &dyn PairSource, cfg: &PipelineConfig, model: &Model) -> Result<Vec<TrainingPair>> {
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    (0..source.len())
        .map(|i| {
            let (src, tgt, gt) = source.load(i)?;
            let (src, tgt) = build_pyramids(&src, &tgt, cfg, Some(model))?;
            Ok(TrainingPair { src, tgt, gt })
        })
        .collect()
}

/// Gradient of a solve's composed estimate with respect to its increment.
fn increment_grad(
    prev: &RigidTransform,
    g_rotation: &Matrix3<f64>,
    g_translation: &Vector3<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    (
        g_rotation * prev.rotation.transpose() + g_translation * prev.translation.transpose(),
        *g_translation,
    )
}

/// Each layer (coarse, fine-2, fine-1) contributes the mean loss of its passes.
fn layer_weights(stages: &[StageTrace]) -> Vec<f64> {
    stages
        .iter()
        .map(|s| 1.0 / stages.iter().filter(|o| o.stage == s.stage).count() as f64)
        .collect()
}

/// Loss of one pair and, when `with_grads`, the gradient of every matching
/// parameter in `MatchingNet::params_mut` order.
pub fn pair_loss(
    pair: &TrainingPair,
    cfg: &PipelineConfig,
    model: &Model,
    fd_step: f64,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Matrix>>)> {
    let reg = register_pyramids(&pair.src, &pair.tgt, cfg, Some(model))?;
    let trace = reg
        .trace
        .ok_or_else(|| Error::Config("training needs learned mode".into()))?;
    let loss_cfg = LossConfig::new(cfg.alpha)?;
    let weights = layer_weights(&trace.stages);
    let mut loss = 0.0;
    let mut seeds = Vec::new();
    for (stage, &w) in trace.stages.iter().zip(&weights) {
        let est = stage.estimate();
        loss += w * loss_total(&est, &pair.gt, &loss_cfg);
        if !with_grads {
            continue;
        }
        let (g_r, g_t) = loss_total_grad(&est, &pair.gt, &loss_cfg);
        let (g_dr, g_dt) = increment_grad(&stage.prev, &(g_r * w), &(g_t * w));
        let targets: Vec<Point3<f64>> = trace
            .tape
            .value(stage.targets)
            .as_slice()
            .chunks_exact(3)
            .map(|c| Point3::new(c[0], c[1], c[2]))
            .collect();
        let confidences = trace.tape.value(stage.confidences).as_slice().to_vec();
        let g = kabsch_backward(&stage.source, &targets, &confidences, &g_dr, &g_dt, fd_step)?;
        let g_targets = Matrix::from_vec(targets.len(), 3, g.target.iter().flat_map(|v| [v.x, v.y, v.z]).collect())?;
        let g_conf = Matrix::from_vec(confidences.len(), 1, g.weights)?;
        seeds.push((stage.targets, g_targets));
        seeds.push((stage.confidences, g_conf));
    }
    if !with_grads {
        return Ok((loss, None));
    }
    let grads = trace.tape.backward(&seeds);
    Ok((loss, Some(trace.bound.grads(&model.matching, &grads))))
}

/// Mean loss over `pairs` without updating anything.
pub fn evaluate_loss(pairs: &[TrainingPair], cfg: &PipelineConfig, model: &Model) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let losses: Vec<f64> = pairs
        .par_iter()
        .map(|p| Ok(pair_loss(p, cfg, model, DEFAULT_FD_STEP, false)?.0))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / pairs.len() as f64)
}

/// Trains the matching networks of `model` with Adam on shuffled minibatches.
/// The detector stays fixed. `on_epoch` sees every curve point as it is produced.
pub fn train(
    pairs: &[TrainingPair],
    cfg: &PipelineConfig,
    model: &mut Model,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingRun> {
    if cfg.mode != Mode::Learned {
        return Err(Error::Config("training needs learned mode".into()));
    }
    if tc.batch_size == 0 || !(tc.learning_rate > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    let initial_loss = evaluate_loss(pairs, cfg, model)?;
    let mut adam = Adam::new(tc.learning_rate);
    let mut curve = vec![EpochRecord {
        epoch: 0,
        loss: initial_loss,
        learning_rate: adam.learning_rate(0),
    }];
    on_epoch(&curve[0]);

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| pair_loss(&pairs[i], cfg, model, tc.fd_step, true))
                .collect::<Result<_>>()?;
            let mut sum: Option<Vec<Matrix>> = None;
            for (loss, grads) in results {
                epoch_loss += loss;
                let grads = grads.expect("requested gradients");
                match sum.as_mut() {
                    None => sum = Some(grads),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mean: Vec<Matrix> = sum
                .expect("non-empty batch")
                .iter()
                .map(|g| g.scale(1.0 / batch.len() as f64))
                .collect();
            if mean.iter().any(|g| !g.is_finite()) {
                log::warn!("skipping a non-finite gradient step in epoch {}", epoch + 1);
                continue;
            }
            adam.step(&mut model.matching.params_mut(), &mean, epoch);
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: epoch_loss / pairs.len() as f64,
            learning_rate: adam.learning_rate(epoch),
        };
        on_epoch(&record);
        curve.push(record);
    }
    let final_loss = evaluate_loss(pairs, cfg, model)?;
    Ok(TrainingRun {
        curve,
        initial_loss,
        final_loss,
    })
}

/// Loss curve as `epoch,loss,lr`.
pub fn write_curve_csv(w: impl Write, curve: &[EpochRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "loss", "lr"]).map_err(csv_err)?;
    for r in curve {
        out.write_record([r.epoch.to_string(), format!("{:.9}", r.loss), format!("{:e}", r.learning_rate)])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
