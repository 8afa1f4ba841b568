//! `tif` — train and study drift-robust detectors on sparse binary features.
//!
//! Subcommands: `generate` a synthetic drifting dataset, `train` an
//! invariant or control model, `evaluate` it over time windows, `analyze`
//! feature stability and attribution, run the `continual` update loop, and
//! `report` a summary of any output directory.
//!
//! Every command writes a `manifest.json` into its output directory and is
//! deterministic given its config and seed. `TIF_THREADS` caps worker
//! parallelism for metric windows and attribution.

mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "tif", version, about = "temporal-invariant training workbench")]
struct Cli {
    /// Suppress informational output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a synthetic drifting dataset from a generator spec.
    Generate {
        /// Generator spec (JSON). Required unless --write-default-config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the built-in default benchmark spec to this path and exit.
        #[arg(long)]
        write_default_config: Option<PathBuf>,
    },
    /// Train a model on the dataset's training months.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Training config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// `invariant` (two-stage) or `control` (plain training).
        #[arg(long, default_value = "invariant")]
        trainer: String,
        /// Terms to disable, overriding the config: `none`, `all`, or a
        /// comma list of mpc1,mpc2,iga.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Evaluate a checkpoint over temporal windows of the test period.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Window granularity: monthly, quarterly or equal:<n>.
        #[arg(long, default_value = "monthly")]
        windows: String,
        #[arg(long)]
        out: PathBuf,
        /// Attribution path steps for the contribution-score column.
        #[arg(long, default_value_t = 64)]
        ig_steps: usize,
        /// Noisy attribution repetitions.
        #[arg(long, default_value_t = 5)]
        ig_runs: usize,
        /// Per-bit flip probability for attribution noise.
        #[arg(long, default_value_t = 0.01)]
        ig_flip_prob: f64,
    },
    /// Feature stability, discriminability and contribution diagnostics.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stability tolerance on active-ratio deviation.
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        /// Smallest subset size quantified over (default: min(500, smallest
        /// monthly window)).
        #[arg(long)]
        n0: Option<usize>,
        /// Monte-Carlo subsets for the stability check.
        #[arg(long, default_value_t = 200)]
        subsets: usize,
        /// Class-gap threshold for discriminability.
        #[arg(long, default_value_t = 0.3)]
        delta: f64,
        /// Random 50% class subsamples probing gap robustness.
        #[arg(long, default_value_t = 100)]
        class_subsamples: usize,
        /// Cap on malware samples attributed for the contribution scores
        /// (0 = all).
        #[arg(long, default_value_t = 200)]
        ig_samples: usize,
        #[arg(long, default_value_t = 64)]
        ig_steps: usize,
        #[arg(long, default_value_t = 5)]
        ig_runs: usize,
        #[arg(long, default_value_t = 0.01)]
        ig_flip_prob: f64,
    },
    /// Drift-triggered update loop over the post-training stream.
    Continual {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Loop config (JSON): {"trainer": ..., "train": ..., "continual": ...}.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize the artifacts in an output directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Error carrying the process exit code: 2 for config problems, 3 for
/// dataset/schema problems, 4 for numerical failures, 1 otherwise.
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(msg: impl std::fmt::Display) -> Self {
        CliError {
            code: 2,
            msg: msg.to_string(),
        }
    }

    pub fn data(msg: impl std::fmt::Display) -> Self {
        CliError {
            code: 3,
            msg: msg.to_string(),
        }
    }
}

/// Classifies a library error by its nature (used where the failing input is
/// not known from context).
pub fn run_err(e: tif_core::Error) -> CliError {
    let code = match &e {
        tif_core::Error::Spec(_) => 2,
        tif_core::Error::Schema(_) | tif_core::Error::Parse { .. } => 3,
        tif_core::Error::Numerical { .. } => 4,
        _ => 1,
    };
    CliError {
        code,
        msg: e.to_string(),
    }
}

fn main() {
    let cli = Cli::parse();
    let quiet = cli.quiet;
    let result = match cli.cmd {
        Cmd::Generate {
            config,
            out,
            seed,
            write_default_config,
        } => commands::generate(config, out, seed, write_default_config, quiet),
        Cmd::Train {
            dataset,
            config,
            out,
            seed,
            trainer,
            ablation,
        } => commands::train(&dataset, &config, &out, seed, &trainer, ablation.as_deref(), quiet),
        Cmd::Evaluate {
            checkpoint,
            dataset,
            windows,
            out,
            ig_steps,
            ig_runs,
            ig_flip_prob,
        } => commands::evaluate(
            &checkpoint,
            &dataset,
            &windows,
            &out,
            ig_steps,
            ig_runs,
            ig_flip_prob,
            quiet,
        ),
        Cmd::Analyze {
            checkpoint,
            dataset,
            out,
            epsilon,
            n0,
            subsets,
            delta,
            class_subsamples,
            ig_samples,
            ig_steps,
            ig_runs,
            ig_flip_prob,
        } => commands::analyze(commands::AnalyzeArgs {
            checkpoint,
            dataset,
            out,
            epsilon,
            n0,
            subsets,
            delta,
            class_subsamples,
            ig_samples,
            ig_steps,
            ig_runs,
            ig_flip_prob,
            quiet,
        }),
        Cmd::Continual {
            checkpoint,
            dataset,
            config,
            out,
            seed,
        } => commands::continual(&checkpoint, &dataset, &config, &out, seed, quiet),
        Cmd::Report { dir } => commands::report(&dir),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.msg.replace('\n', " "));
            std::process::exit(e.code);
        }
    }
}
