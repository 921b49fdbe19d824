//! Flat `key = value` run configuration files.
//!
//! Keys are dotted paths such as `level2.channels` or `flags.mask`; `#` starts
//! a comment. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::EvalThresholds;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub thresholds: EvalThresholds,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = parse_config(&text).map_err(|m| Error::malformed(path, m))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: Option<PathBuf>| p.map(|p| if p.is_relative() { base.join(p) } else { p });
        let cfg = RunConfig {
            dataset: resolve(cfg.dataset),
            output: resolve(cfg.output),
            model: resolve(cfg.model),
            ..cfg
        };
        for p in [&cfg.dataset, &cfg.model].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::malformed(path, format!("{} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("line {line}: invalid value {v:?} for {key}"))
}

/// Parses configuration text over the defaults and validates the result.
pub fn parse_config(text: &str) -> std::result::Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| format!("line {line}: expected key = value"))?;
        let (key, value) = (key.trim(), value.trim());
        let p = &mut cfg.pipeline;
        macro_rules! set {
            ($slot:expr) => {
                $slot = parse_value(key, value, line)?
            };
        }
        match key {
            "voxel_size" => set!(p.voxel_size),
            "input_points" => set!(p.input_points),
            "k1" => set!(p.k1),
            "k2" => set!(p.k2),
            "k_fine" => set!(p.k_fine),
            "k_upsample" => set!(p.k_upsample),
            "alpha" => set!(p.alpha),
            "mode" => p.mode = value.parse().map_err(|e: Error| format!("line {line}: {e}"))?,
            "seed" => set!(p.seed),
            "coarse_temperature" => set!(p.coarse_temperature),
            "fine_temperature" => set!(p.fine_temperature),
            "fine_inlier_radius" => set!(p.fine_inlier_radius),
            "fine_iterations" => set!(p.fine_iterations),
            "fine_tolerance" => set!(p.fine_tolerance),
            "consensus_bonus" => set!(p.consensus_bonus),
            "consistency_tolerance" => set!(p.consistency_tolerance),
            "flags.double_soft" => set!(p.flags.double_soft),
            "flags.sparse_to_denser" => set!(p.flags.sparse_to_denser),
            "flags.feature_consistency" => set!(p.flags.feature_consistency),
            "flags.mask" => set!(p.flags.mask),
            "eval.eps_trans" => set!(cfg.thresholds.eps_trans),
            "eval.eps_rot" => set!(cfg.thresholds.eps_rot),
            "eval.eps_d" => set!(cfg.thresholds.eps_d),
            "paths.dataset" => cfg.dataset = Some(PathBuf::from(value)),
            "paths.output" => cfg.output = Some(PathBuf::from(value)),
            "paths.model" => cfg.model = Some(PathBuf::from(value)),
            _ => {
                let level = key
                    .strip_prefix("level")
                    .and_then(|rest| rest.split_once('.'))
                    .and_then(|(l, field)| Some((l.parse::<usize>().ok()?, field)))
                    .filter(|(l, _)| (1..=3).contains(l));
                match level {
                    Some((l, "keypoints")) => set!(p.levels[l - 1].keypoints),
                    Some((l, "channels")) => set!(p.levels[l - 1].channels),
                    Some((l, "descriptor_radius")) => set!(p.levels[l - 1].descriptor_radius),
                    _ => return Err(format!("line {line}: unknown key {key:?}")),
                }
            }
        }
    }
    cfg.pipeline.validate().map_err(|e| e.to_string())?;
    cfg.thresholds.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}
