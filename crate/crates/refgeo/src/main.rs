//! `refgeo` — the experiment pipeline driver.
//!
//! One command per pipeline stage; every stage writes its artifacts plus a
//! manifest recording the seed, the config echo, and the SHA-256 of every
//! input and output. Config errors (bad flags, missing files, invalid
//! fields) exit with status 2 and name the offending field; runtime
//! failures exit with status 1.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;

/// Exit status for configuration errors.
pub const CONFIG_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "refgeo", version, about = "Refusal-geometry toy laboratory")]
struct Cli {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts and manifests.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate balanced train/val/test prompt datasets (JSONL).
    GenData,
    /// Train the toy transformer on the synthetic task.
    TrainToy,
    /// Extract the difference-in-means direction from a dataset.
    ExtractDim {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Trace point to read activations from (defaults to the middle).
        #[arg(long)]
        layer: Option<usize>,
        /// Token position: "last" or an index.
        #[arg(long, default_value = "last")]
        position: String,
    },
    /// Fill compliance/refusal/retain targets for dataset rows.
    GenTargets {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        direction: PathBuf,
        /// Dataset files to process (each gets a targets file).
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
    },
    /// Optimize a single refusal direction.
    TrainRdo {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Seed direction supplying the addition scale and layer.
        #[arg(long)]
        dim: PathBuf,
    },
    /// Optimize a refusal cone basis.
    TrainCone {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        dim: PathBuf,
        /// Cone dimension (overrides the config).
        #[arg(long)]
        cone_dim: Option<usize>,
    },
    /// Train a direction representationally independent of the constraints.
    TrainRepind {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        dim: PathBuf,
        /// Constraint direction files (repeatable).
        #[arg(long, required = true)]
        constraint: Vec<PathBuf>,
    },
    /// Check representational independence of two directions.
    VerifyIndependence {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        direction_a: PathBuf,
        #[arg(long)]
        direction_b: PathBuf,
        /// Dataset whose harmful prompts are profiled.
        #[arg(long)]
        data: PathBuf,
    },
    /// Per-prompt adversarial suffix search against a direction.
    AttackSuffix {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        direction: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a direction (ASR, scaling curve, side-effect KL) or a cone
    /// (per-sample ASR distribution).
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "cone")]
        direction: Option<PathBuf>,
        #[arg(long)]
        cone: Option<PathBuf>,
        /// Dataset with targets (test split).
        #[arg(long)]
        data: PathBuf,
    },
    /// Best-of-N sampling: cone draws vs temperature sampling.
    BestOfN {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "cone")]
        direction: Option<PathBuf>,
        #[arg(long)]
        cone: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Temperature for the single-direction baseline.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let cfg = match ExperimentConfig::load(cli.config.as_deref())
        .and_then(|c| c.finalize(cli.seed))
    {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(CONFIG_ERROR);
        }
    };

    match commands::dispatch(cli.command, &cfg, &cli.out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CommandError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(CONFIG_ERROR)
        }
        Err(commands::CommandError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
