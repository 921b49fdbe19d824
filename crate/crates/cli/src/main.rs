mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use softreg::Mode;

#[derive(Parser, Debug)]
#[command(name = "softreg", version, about = "Coarse-to-fine rigid registration of point clouds")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the pipeline seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Single soft-matching stage in the coarse layer.
    #[arg(long, global = true)]
    pub no_double_soft: bool,
    /// Second coarse stage matches only the updated targets.
    #[arg(long, global = true)]
    pub no_std: bool,
    /// Drop the feature-consistency score.
    #[arg(long, global = true)]
    pub no_fs: bool,
    /// Do not carry confidences from deeper layers.
    #[arg(long, global = true)]
    pub no_mask: bool,
    /// Write 0 in timing columns so reruns compare byte for byte.
    #[arg(long, global = true)]
    pub no_timing: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic pairs with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Noise 0.1 m and overlap 0.5.
        #[arg(long)]
        hard: bool,
        #[arg(long)]
        overlap: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Register one pair and print the transform as JSON.
    Register {
        /// Pair list directory (with `--index`) instead of `--src/--tgt`.
        #[arg(long, conflicts_with_all = ["src", "tgt"])]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0, requires = "dataset")]
        index: usize,
        #[arg(long, requires = "tgt")]
        src: Option<PathBuf>,
        #[arg(long, requires = "src")]
        tgt: Option<PathBuf>,
        /// Ground truth as 12 row-major `[R|t]` values.
        #[arg(long, allow_hyphen_values = true)]
        gt: Option<String>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Write one PLY per pyramid level of both clouds.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Register every pair of a dataset and write report CSVs.
    Benchmark {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Benchmark the ablation variants on one dataset.
    Ablate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train the matching networks with the detector frozen. Without
    /// `--config` the toy sizes are used.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.0095)]
        lr: f64,
    },
    /// Recompute metrics from stored estimates.
    EvalOnly {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// `estimates.csv` written by `benchmark`.
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: softreg::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.describe());
            ExitCode::from(e.exit_code())
        }
    }
}
