use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use softreg::eval::{
    ablation_suite, ablation_variants, benchmark, classify_inliers, rre, rte, write_ablation_csv, write_curve_csv,
    PairSource,
};
use softreg::io::{
    format_pose_line, parse_pose_line, read_cloud, write_kitti_bin, write_pairs_csv, write_ply, PairEntry, PairList,
    RunConfig, ScenePairSpec, SyntheticPairs,
};
use softreg::pipeline::{build_pyramids, register_pyramids, StageDiagnostics};
use softreg::train::{prepare_pairs, train, write_curve_csv as write_loss_csv, TrainConfig};
use softreg::{BenchmarkReport, Mode, Model, PipelineConfig, RigidTransform};

use crate::{Cli, Command, Global};

const RTE_SWEEP_STEP: f64 = 0.1;
const RTE_SWEEP_STEPS: usize = 30;
const RRE_SWEEP_STEP: f64 = 0.25;
const RRE_SWEEP_STEPS: usize = 40;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] softreg::Error),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for data errors.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(softreg::Error::Config(_)) => 1,
            CliError::Core(_) => 2,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => format!("{} ({})", e, e.kind()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Config file (or defaults) with the command-line overrides applied.
fn run_config(g: &Global, base: PipelineConfig) -> Result<RunConfig> {
    let mut rc = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig {
            pipeline: base,
            ..RunConfig::default()
        },
    };
    let p = &mut rc.pipeline;
    if let Some(s) = g.seed {
        p.seed = s;
    }
    if let Some(m) = g.mode {
        p.mode = m;
    }
    p.flags.double_soft &= !g.no_double_soft;
    p.flags.sparse_to_denser &= !g.no_std;
    p.flags.feature_consistency &= !g.no_fs;
    p.flags.mask &= !g.no_mask;
    p.validate()?;
    Ok(rc)
}

fn pick(flag: Option<PathBuf>, from_config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| usage(format!("missing --{what} (or paths.{what} in the config)")))
}

fn out_dir(flag: Option<PathBuf>, rc: &RunConfig) -> Result<PathBuf> {
    let dir = flag.or_else(|| rc.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// The model for learned mode: loaded from disk, or freshly initialized from the seed.
fn load_model(rc: &RunConfig, flag: Option<PathBuf>) -> Result<Option<Model>> {
    if rc.pipeline.mode != Mode::Learned {
        return Ok(None);
    }
    Ok(Some(match flag.or_else(|| rc.model.clone()) {
        Some(p) => Model::load(&p, &rc.pipeline)?,
        None => {
            log::warn!("no model given; using untrained weights from seed {}", rc.pipeline.seed);
            Model::new(&rc.pipeline, rc.pipeline.seed)
        }
    }))
}

fn dataset(path: &Path) -> Result<PairList> {
    Ok(PairList::open(path)?)
}

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Synth {
            out,
            count,
            hard,
            overlap,
            noise,
        } => {
            let rc = run_config(&g, PipelineConfig::default())?;
            let mut spec = if hard { ScenePairSpec::hard() } else { ScenePairSpec::default() };
            if let Some(o) = overlap {
                spec.overlap = o;
            }
            if let Some(n) = noise {
                spec.noise = n;
            }
            spec.validate()?;
            synth(&out, &spec, rc.pipeline.seed, count)
        }
        Command::Register {
            dataset: ds,
            index,
            src,
            tgt,
            gt,
            model,
            dump,
        } => {
            let rc = run_config(&g, PipelineConfig::default())?;
            let (src, tgt, gt) = match (ds, src, tgt) {
                (Some(d), _, _) => {
                    let list = dataset(&d)?;
                    if index >= list.len() {
                        return Err(usage(format!("--index {index} out of range ({} pairs)", list.len())));
                    }
                    let (s, t, g) = list.load(index)?;
                    (s, t, Some(g))
                }
                (None, Some(s), Some(t)) => {
                    let g = gt.as_deref().map(|l| parse_pose_line(l, 1)).transpose().map_err(usage)?;
                    (read_cloud(&s)?, read_cloud(&t)?, g)
                }
                _ => return Err(usage("register needs --dataset or both --src and --tgt")),
            };
            let model = load_model(&rc, model)?;
            let report = register(&src, &tgt, gt.as_ref(), &rc, model.as_ref(), dump.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable report"));
            Ok(())
        }
        Command::Benchmark { dataset: ds, out, model } => {
            let rc = run_config(&g, PipelineConfig::default())?;
            let list = dataset(&pick(ds, &rc.dataset, "dataset")?)?;
            let model = load_model(&rc, model)?;
            let report = benchmark(&list, &rc.pipeline, model.as_ref(), &rc.thresholds)?;
            let out = out_dir(out, &rc)?;
            write_report(&out, &report, !g.no_timing)?;
            write_estimates(&out.join("estimates.csv"), &report)?;
            print_summary("full", &report);
            Ok(())
        }
        Command::Ablate { dataset: ds, out, model } => {
            let rc = run_config(&g, PipelineConfig::default())?;
            let list = dataset(&pick(ds, &rc.dataset, "dataset")?)?;
            let model = load_model(&rc, model)?;
            let rows = ablation_suite(&list, &rc.pipeline, model.as_ref(), &rc.thresholds, &ablation_variants())?;
            let out = out_dir(out, &rc)?;
            write_ablation_csv(fs::File::create(out.join("ablation.csv"))?, &rows, !g.no_timing)?;
            for (name, r) in &rows {
                print_summary(name, r);
            }
            Ok(())
        }
        Command::Train {
            dataset: ds,
            out,
            epochs,
            batch_size,
            lr,
        } => {
            let mut rc = run_config(&g, PipelineConfig::toy())?;
            rc.pipeline.mode = Mode::Learned;
            let list = dataset(&pick(ds, &rc.dataset, "dataset")?)?;
            let mut model = match &rc.model {
                Some(p) => Model::load(p, &rc.pipeline)?,
                None => Model::new(&rc.pipeline, rc.pipeline.seed),
            };
            let pairs = prepare_pairs(&list, &rc.pipeline, &model)?;
            let tc = TrainConfig {
                epochs,
                batch_size,
                learning_rate: lr,
                seed: rc.pipeline.seed,
                ..TrainConfig::default()
            };
            let run = train(&pairs, &rc.pipeline, &mut model, &tc, |r| {
                log::info!("epoch {} loss {:.6} lr {:.3e}", r.epoch, r.loss, r.learning_rate)
            })?;
            let out = out_dir(out, &rc)?;
            write_loss_csv(fs::File::create(out.join("loss_curve.csv"))?, &run.curve)?;
            model.save(&out.join("model.hdmn"))?;
            println!(
                "initial loss {:.6}, final loss {:.6}, ratio {:.3}",
                run.initial_loss,
                run.final_loss,
                run.final_loss / run.initial_loss
            );
            Ok(())
        }
        Command::EvalOnly {
            dataset: ds,
            estimates,
            out,
        } => {
            let rc = run_config(&g, PipelineConfig::default())?;
            let list = dataset(&pick(ds, &rc.dataset, "dataset")?)?;
            let est = read_estimates(&estimates, list.len())?;
            let pairs: Vec<_> = est.into_iter().zip(list.entries.iter().map(|e| e.gt)).collect();
            let report = BenchmarkReport::from_estimates(&pairs, rc.thresholds)?;
            let out = out_dir(out, &rc)?;
            write_report(&out, &report, false)?;
            print_summary("stored", &report);
            Ok(())
        }
    }
}

fn synth(out: &Path, spec: &ScenePairSpec, first_seed: u64, count: usize) -> Result<()> {
    fs::create_dir_all(out)?;
    let source = SyntheticPairs {
        spec: spec.clone(),
        first_seed,
        count,
    };
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let (src, tgt, gt) = source.load(i)?;
        let entry = PairEntry {
            src: out.join(format!("{i:04}_src.bin")),
            tgt: out.join(format!("{i:04}_tgt.bin")),
            gt,
        };
        write_kitti_bin(&entry.src, &src)?;
        write_kitti_bin(&entry.tgt, &tgt)?;
        entries.push(entry);
    }
    write_pairs_csv(&out.join(softreg::io::PAIRS_FILE), out, &entries)?;
    println!("wrote {count} pairs to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct RegisterReport {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    pose: String,
    rte_m: Option<f64>,
    rre_deg: Option<f64>,
    success: Option<bool>,
    stages: Vec<StageDiagnostics>,
    coarse_correspondences: usize,
    coarse_pool_size: usize,
    coarse_inlier_ratio: Option<f64>,
    ms: f64,
}

fn register(
    src: &softreg::PointCloud,
    tgt: &softreg::PointCloud,
    gt: Option<&RigidTransform>,
    rc: &RunConfig,
    model: Option<&Model>,
    dump: Option<&Path>,
) -> Result<RegisterReport> {
    let t = std::time::Instant::now();
    let (sp, tp) = build_pyramids(src, tgt, &rc.pipeline, model)?;
    let mut reg = register_pyramids(&sp, &tp, &rc.pipeline, model)?;
    let ms = t.elapsed().as_secs_f64() * 1e3;
    if let Some(dir) = dump {
        fs::create_dir_all(dir)?;
        for (name, pyr) in [("src", &sp), ("tgt", &tp)] {
            for lvl in &pyr.levels {
                let cloud = softreg::PointCloud::from_points(lvl.keypoints.clone());
                write_ply(
                    &dir.join(format!("{name}_level{}.ply", lvl.level)),
                    &cloud,
                    Some(&lvl.uncertainties),
                )?;
            }
        }
    }
    if let Some(gt) = gt {
        reg.score_against(gt);
    }
    let r = reg.transform.rotation;
    let inliers = gt.map(|g| classify_inliers(&reg.coarse, g, rc.thresholds.eps_d));
    Ok(RegisterReport {
        rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
        translation: reg.transform.translation.into(),
        pose: format_pose_line(&reg.transform),
        rte_m: gt.map(|g| rte(&reg.transform, g)),
        rre_deg: gt.map(|g| rre(&reg.transform, g)),
        success: gt.map(|g| {
            rc.thresholds
                .is_success(rte(&reg.transform, g), rre(&reg.transform, g))
        }),
        stages: reg.stages,
        coarse_correspondences: reg.coarse.len(),
        coarse_pool_size: reg.coarse_pool_size,
        coarse_inlier_ratio: inliers.map(|v| v.iter().filter(|&&b| b).count() as f64 / v.len().max(1) as f64),
        ms,
    })
}

fn sweep(step: f64, steps: usize) -> Vec<f64> {
    (1..=steps).map(|i| i as f64 * step).collect()
}

/// Per-pair results, both recall curves and a JSON summary.
fn write_report(out: &Path, report: &BenchmarkReport, timing: bool) -> Result<()> {
    report.write_pairs_csv(fs::File::create(out.join("results.csv"))?, timing)?;
    write_curve_csv(
        fs::File::create(out.join("recall_rte.csv"))?,
        &report.recall_vs_rte(&sweep(RTE_SWEEP_STEP, RTE_SWEEP_STEPS)),
    )?;
    write_curve_csv(
        fs::File::create(out.join("recall_rre.csv"))?,
        &report.recall_vs_rre(&sweep(RRE_SWEEP_STEP, RRE_SWEEP_STEPS)),
    )?;
    let summary = serde_json::json!({
        "pairs": report.pairs.len(),
        "recall": report.recall,
        "rte_mean": report.rte_mean,
        "rte_std": report.rte_std,
        "rre_mean": report.rre_mean,
        "rre_std": report.rre_std,
        "rte_median": report.median_rte(),
        "rre_median": report.median_rre(),
        "thresholds": report.thresholds,
    });
    let mut f = fs::File::create(out.join("summary.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&summary).expect("serializable summary"))?;
    Ok(())
}

/// `pair_id,pose` with an empty pose for failed pairs.
fn write_estimates(path: &Path, report: &BenchmarkReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["pair_id", "pose"]).map_err(csv_err)?;
    for p in &report.pairs {
        let pose = p.estimate.as_ref().map(format_pose_line).unwrap_or_default();
        w.write_record([p.pair_id.to_string(), pose]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn read_estimates(path: &Path, expected: usize) -> Result<Vec<Option<RigidTransform>>> {
    let malformed = |msg: String| {
        CliError::Core(softreg::Error::MalformedFile {
            path: path.to_path_buf(),
            msg,
        })
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| malformed(e.to_string()))?;
    let mut out = vec![None; expected];
    let mut seen = vec![false; expected];
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| malformed(format!("line {line}: {e}")))?;
        let id: usize = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .filter(|&id| id < expected)
            .ok_or_else(|| malformed(format!("line {line}: bad pair id")))?;
        let pose = rec.get(1).unwrap_or("").trim();
        if !pose.is_empty() {
            out[id] = Some(parse_pose_line(pose, line).map_err(malformed)?);
        }
        seen[id] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(malformed(format!("no estimate for pair {missing}")));
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Core(softreg::Error::Io(std::io::Error::other(e)))
}

fn print_summary(name: &str, r: &BenchmarkReport) {
    println!(
        "{name}: recall {:.3}, median RTE {:.3} m, median RRE {:.3} deg over {} pairs",
        r.recall,
        r.median_rte(),
        r.median_rre(),
        r.pairs.len()
    );
}
