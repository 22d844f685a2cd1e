//! Command-line front end: argument parsing, layered configuration and the
//! subcommand implementations.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use bgseg::fixtures::PlantedSpec;
use bgseg::{Error, ErrorKind};
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::Overrides;

pub const JOBS_ENV: &str = "BGSEG_JOBS";

#[derive(Debug, Parser)]
#[command(name = "bgseg", version, about = "Unsupervised object localization from ViT patch features")]
pub struct Cli {
    /// TOML config file; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-image parallelism
    #[arg(long, global = true, env = JOBS_ENV)]
    pub jobs: Option<usize>,
    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FixtureSize {
    Small,
    Medium,
    Full,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Coarse foreground masks from attention and features
    Discover {
        #[arg(long)]
        shards: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write an upsampled overlay on the image
        #[arg(long)]
        overlay: bool,
    },
    /// Self-train the segmentation head
    Train {
        #[arg(long)]
        shards: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Patch-level coarse masks named <sample_id>.png instead of discovery
        #[arg(long)]
        coarse_dir: Option<PathBuf>,
    },
    /// Predict masks and boxes with a trained head
    Infer {
        #[arg(long)]
        shards: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against ground truth
    Eval {
        /// Directory of <sample_id>.png masks (and optional _soft.png maps)
        #[arg(long)]
        pred: PathBuf,
        /// Shard directory holding the ground truth
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Semantic segmentation by nearest-prototype retrieval
    Retrieve {
        #[arg(long)]
        train_shards: PathBuf,
        #[arg(long)]
        train_masks: PathBuf,
        #[arg(long)]
        train_labels: PathBuf,
        #[arg(long)]
        val_shards: PathBuf,
        #[arg(long)]
        val_masks: PathBuf,
        #[arg(long)]
        val_labels: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic planted dataset
    MakeFixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long = "fixture-seed", default_value_t = 0)]
        fixture_seed: u64,
        #[arg(long, value_enum, default_value_t = FixtureSize::Medium)]
        size: FixtureSize,
        /// Comma-separated object classes, e.g. 1,15
        #[arg(long, value_delimiter = ',')]
        classes: Vec<u8>,
        #[arg(long)]
        labels_dir: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML with its hash
    PrintConfig,
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Numerical) => 4,
        _ => 3,
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()).into());
        }
        // fails only if a pool already exists, e.g. when called twice in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let cfg = config::resolve(cli.config.as_deref(), &cli.overrides)?;
    log::debug!("config hash {}", cfg.hash());
    match cli.command {
        Command::Discover {
            shards,
            out,
            overlay,
        } => commands::discover(&cfg, &shards, &out, overlay),
        Command::Train {
            shards,
            out,
            coarse_dir,
        } => commands::train(&cfg, &shards, &out, coarse_dir.as_deref()),
        Command::Infer {
            shards,
            checkpoint,
            out,
        } => commands::infer(&cfg, &shards, &checkpoint, &out),
        Command::Eval { pred, gt, report } => commands::eval(&cfg, &pred, &gt, report.as_deref()).map(|_| ()),
        Command::Retrieve {
            train_shards,
            train_masks,
            train_labels,
            val_shards,
            val_masks,
            val_labels,
            report,
        } => {
            let paths = commands::RetrievePaths {
                train_shards: &train_shards,
                train_masks: &train_masks,
                train_labels: &train_labels,
                val_shards: &val_shards,
                val_masks: &val_masks,
                val_labels: &val_labels,
            };
            commands::retrieve(&cfg, &paths, report.as_deref()).map(|_| ())
        }
        Command::MakeFixtures {
            out,
            count,
            fixture_seed,
            size,
            classes,
            labels_dir,
        } => {
            let base = match size {
                FixtureSize::Small => PlantedSpec::small(),
                FixtureSize::Medium => PlantedSpec::medium(),
                FixtureSize::Full => PlantedSpec::full(),
            };
            let spec = PlantedSpec { classes, ..base };
            spec.validate()?;
            commands::make_fixtures(&out, count, fixture_seed, &spec, labels_dir.as_deref())
        }
        Command::PrintConfig => {
            print!("# config hash {}\n{}", cfg.hash(), cfg.to_toml());
            Ok(())
        }
    }
}
