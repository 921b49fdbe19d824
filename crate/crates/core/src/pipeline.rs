//! End-to-end registration: preprocessing, pyramids, coarse pose and two fine layers.

use std::time::Instant;

use serde::Serialize;

use crate::cloud::PointCloud;
use crate::coarse::{coarse_pose, double_soft_match, CoarseVars, CorrespondenceSet, LearnedContext};
use crate::config::{Mode, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{rre, rte};
use crate::fine::{refine_layer, upsample_confidence};
use crate::geom::RigidTransform;
use crate::learned::{BoundMatchingNet, Model};
use crate::neural::{Tape, Var};
use crate::pyramid::{build_pyramid_from_points, preprocess, Pyramid};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageDiagnostics {
    pub stage: &'static str,
    pub transform: RigidTransform,
    pub ms: f64,
    pub rte_m: Option<f64>,
    pub rre_deg: Option<f64>,
}

/// Everything a learned-mode run recorded for backpropagation.
pub struct LearnedTrace {
    pub tape: Tape,
    pub bound: BoundMatchingNet,
    pub stages: Vec<StageTrace>,
}

/// One weighted-Kabsch solve inside the learned pipeline.
#[derive(Debug, Clone)]
pub struct StageTrace {
    pub stage: &'static str,
    /// Source points handed to the solver (already moved by `prev`).
    pub source: Vec<nalgebra::Point3<f64>>,
    pub targets: Var,
    pub confidences: Var,
    pub prev: RigidTransform,
    pub delta: RigidTransform,
}

impl StageTrace {
    pub fn estimate(&self) -> RigidTransform {
        crate::geom::compose(&self.delta, &self.prev)
    }
}

pub struct Registration {
    pub transform: RigidTransform,
    /// Per-stage transforms in execution order: `coarse`, `fine-2`, `fine-1`.
    pub stages: Vec<StageDiagnostics>,
    pub coarse: CorrespondenceSet,
    /// Stage-2 pool cardinality of the coarse matcher.
    pub coarse_pool_size: usize,
    /// Preprocessing and pyramid construction time of both clouds.
    pub pyramid_ms: f64,
    pub trace: Option<LearnedTrace>,
}

impl Registration {
    /// Fills the RTE/RRE of every stage against `gt`.
    pub fn score_against(&mut self, gt: &RigidTransform) {
        for s in &mut self.stages {
            s.rte_m = Some(rte(&s.transform, gt));
            s.rre_deg = Some(rre(&s.transform, gt));
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageDiagnostics> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn diag(stage: &'static str, transform: RigidTransform, ms: f64) -> StageDiagnostics {
    StageDiagnostics {
        stage,
        transform,
        ms,
        rte_m: None,
        rre_deg: None,
    }
}

/// Coarse matching and both refinement layers on prebuilt pyramids.
pub fn register_pyramids(
    src: &Pyramid,
    tgt: &Pyramid,
    cfg: &PipelineConfig,
    model: Option<&Model>,
) -> Result<Registration> {
    let learned = match cfg.mode {
        Mode::Learned => Some(model.ok_or_else(|| Error::Config("learned mode needs a model".into()))?),
        Mode::Deterministic => None,
    };
    let mut tape = Tape::new();
    let bound = learned.map(|m| m.matching.bind(&mut tape));
    let mut stages = Vec::with_capacity(3);
    let mut traces = Vec::new();

    let t0 = Instant::now();
    let coarse = double_soft_match(src.level(3), tgt.level(3), cfg, tape_ctx(&mut tape, learned, bound.as_ref()))
        .map_err(|e| e.at_stage("coarse"))?;
    let pose = coarse_pose(&coarse.correspondences).map_err(|e| e.at_stage("coarse"))?;
    stages.push(diag("coarse", pose, elapsed_ms(t0)));
    if let Some(CoarseVars { targets, confidences }) = coarse.vars {
        traces.push(StageTrace {
            stage: "coarse",
            source: coarse.correspondences.source.clone(),
            targets,
            confidences,
            prev: RigidTransform::identity(),
            delta: pose,
        });
    }

    let mut transform = pose;
    let mut deep_points = &src.level(3).keypoints;
    let mut deep_conf = coarse.correspondences.confidences.clone();
    for (level, name) in [(2, "fine-2"), (1, "fine-1")] {
        let t = Instant::now();
        let shallow = src.level(level);
        let mask = upsample_confidence(&shallow.keypoints, deep_points, &deep_conf, cfg.k_upsample)
            .map_err(|e| e.at_stage(name))?;
        let mut last = None;
        for _ in 0..cfg.fine_iterations {
            let ctx = tape_ctx(&mut tape, learned, bound.as_ref());
            let r = refine_layer(shallow, tgt.level(level), &transform, &mask, cfg, ctx).map_err(|e| e.at_stage(name))?;
            if let Some((targets, confidences)) = r.vars {
                traces.push(StageTrace {
                    stage: name,
                    source: r.moved_source.clone(),
                    targets,
                    confidences,
                    prev: transform,
                    delta: r.delta,
                });
            }
            transform = r.transform;
            let settled = r.delta.translation.norm() < cfg.fine_tolerance
                && r.delta.rotation_angle() < cfg.fine_tolerance;
            last = Some(r);
            if settled {
                break;
            }
        }
        let r = last.expect("fine_iterations is positive");
        stages.push(diag(name, transform, elapsed_ms(t)));
        deep_points = &shallow.keypoints;
        deep_conf = r.confidences;
    }

    let trace = bound.map(|bound| LearnedTrace {
        tape,
        bound,
        stages: traces,
    });
    Ok(Registration {
        transform,
        stages,
        coarse: coarse.correspondences,
        coarse_pool_size: coarse.final_pool_size,
        pyramid_ms: 0.0,
        trace,
    })
}

fn tape_ctx<'a>(
    tape: &'a mut Tape,
    model: Option<&'a Model>,
    bound: Option<&'a BoundMatchingNet>,
) -> Option<LearnedContext<'a>> {
    Some(LearnedContext {
        tape,
        net: &model?.matching,
        bound: bound?,
    })
}

/// Seeds of the two preprocessing subsamples.
pub fn subsample_seeds(seed: u64) -> (u64, u64) {
    (seed.wrapping_mul(2).wrapping_add(1), seed.wrapping_mul(2).wrapping_add(2))
}

/// Preprocesses both clouds and builds their pyramids.
pub fn build_pyramids(
    src_raw: &PointCloud,
    tgt_raw: &PointCloud,
    cfg: &PipelineConfig,
    model: Option<&Model>,
) -> Result<(Pyramid, Pyramid)> {
    let (s_seed, t_seed) = subsample_seeds(cfg.seed);
    let detector = model.map(|m| &m.detector);
    let build = |raw: &PointCloud, seed: u64| -> Result<Pyramid> {
        let cloud = preprocess(raw, cfg, seed).map_err(|e| e.at_stage("preprocess"))?;
        build_pyramid_from_points(&cloud.points, cfg, detector).map_err(|e| e.at_stage("pyramid"))
    };
    Ok((build(src_raw, s_seed)?, build(tgt_raw, t_seed)?))
}

/// Full registration of `src_raw` onto `tgt_raw`.
pub fn run_pipeline(
    src_raw: &PointCloud,
    tgt_raw: &PointCloud,
    cfg: &PipelineConfig,
    model: Option<&Model>,
) -> Result<Registration> {
    cfg.validate()?;
    let t = Instant::now();
    let (src, tgt) = build_pyramids(src_raw, tgt_raw, cfg, model)?;
    let pyramid_ms = elapsed_ms(t);
    let mut reg = register_pyramids(&src, &tgt, cfg, model)?;
    reg.pyramid_ms = pyramid_ms;
    Ok(reg)
}
