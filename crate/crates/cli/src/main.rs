//! Command-line pipeline for calibrated root-cause confidence: ingest an
//! incident corpus, split it, retrieve reference incidents under a token
//! budget, score predictions through a chat backend, derive labels, fit a
//! calibration model, and evaluate it against uncalibrated baselines. Every
//! run appends a manifest entry recording inputs, config, and seeds.
//!
//! Exit codes: 0 on success, 1 on an operational failure (with a diagnostic
//! on stderr), 2 on unknown subcommands or flags (with usage).

mod config;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rootgauge_core::scoring::Mode;
use rootgauge_core::simbench::BenchMode;

use crate::stages::{Ablation, Baseline, SplitChoice, SplitSizes};

#[derive(Parser)]
#[command(
    name = "rootgauge",
    version,
    about = "Calibrated confidence for incident root-cause predictions"
)]
struct Cli {
    /// Config file (TOML); relative paths inside it resolve against its
    /// directory.
    #[arg(long, global = true, default_value = "rootgauge.toml")]
    config: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a raw incident file and write the canonical corpus.
    Ingest {
        /// Raw JSON-Lines incident file.
        #[arg(long)]
        input: PathBuf,
    },
    /// Shuffle the corpus into retrieval/validation/test splits.
    Split {
        /// Retrieval-corpus size (default: everything the other splits leave).
        #[arg(long)]
        retrieval: Option<usize>,
        /// Validation size (default: 20% of the corpus).
        #[arg(long)]
        validation: Option<usize>,
        /// Test size (default: 20% of the corpus).
        #[arg(long)]
        test: Option<usize>,
        /// Shuffle seed (default: `seeds.split` from the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank and select reference incidents for each query under the token
    /// budget.
    Retrieve {
        #[arg(long, default_value = "all")]
        split: SplitChoice,
    },
    /// Score (incident, predicted root cause) pairs through the backend.
    Score {
        #[arg(long, default_value = "full")]
        mode: Mode,
        #[arg(long, default_value = "all")]
        split: SplitChoice,
        /// JSON-Lines file of {"id", "predicted_root_cause", "predictor_id"}.
        #[arg(long, default_value = "predictions.jsonl")]
        predictions: PathBuf,
    },
    /// Rate predictions against ground-truth root causes and derive binary
    /// correctness labels.
    PseudoLabel {
        #[arg(long, default_value = "all")]
        split: SplitChoice,
        /// Rating cutoff override (default: fitted threshold.json, else 2.3).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 1)]
        n_queries: usize,
        #[arg(long, default_value_t = 5)]
        n_per_query: usize,
        #[arg(long, default_value = "predictions.jsonl")]
        predictions: PathBuf,
    },
    /// Fit the rating-to-correctness cutoff on human-annotated cases.
    FitThreshold {
        /// JSON-Lines file of {"case_id", "score", "n_labelers", "consensus"}.
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Fit the calibration model on the validation split.
    Calibrate {
        #[arg(long, default_value = "full")]
        ablation: Ablation,
    },
    /// Assign confidence on the test split and compute calibration error.
    Evaluate {
        /// Evaluate an uncalibrated baseline instead of a fitted model.
        #[arg(long)]
        baseline: Option<Baseline>,
        /// Model file (default: model_full.json in the output directory).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Render reliability tables, diagrams, and score histograms for every
    /// evaluation in the output directory.
    Report,
    /// Run the seeded simulator benchmark end to end, offline.
    Simbench {
        /// Benchmark seed(s); repeat or comma-separate for several.
        #[arg(long = "seed", value_delimiter = ',')]
        seed: Vec<u64>,
        /// Modes to benchmark (comma-separated; default: all).
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<BenchMode>>,
        /// Report directory (default: <output_dir>/simbench).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Split { .. } => "split",
            Command::Retrieve { .. } => "retrieve",
            Command::Score { .. } => "score",
            Command::PseudoLabel { .. } => "pseudo-label",
            Command::FitThreshold { .. } => "fit-threshold",
            Command::Calibrate { .. } => "calibrate",
            Command::Evaluate { .. } => "evaluate",
            Command::Report => "report",
            Command::Simbench { .. } => "simbench",
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (cfg, warnings) = config::load_config(&cli.config)?;
    for warning in &warnings {
        eprintln!("warning: {warning}");
    }

    let command_name = cli.command.name();
    let outcome = match cli.command {
        Command::Ingest { input } => stages::ingest(&cfg, &input)?,
        Command::Split {
            retrieval,
            validation,
            test,
            seed,
        } => stages::split(
            &cfg,
            SplitSizes {
                retrieval,
                validation,
                test,
                seed,
            },
        )?,
        Command::Retrieve { split } => stages::retrieve(&cfg, split)?,
        Command::Score {
            mode,
            split,
            predictions,
        } => stages::score(&cfg, split, mode, &predictions)?,
        Command::PseudoLabel {
            split,
            threshold,
            n_queries,
            n_per_query,
            predictions,
        } => stages::pseudo_label(&cfg, split, threshold, n_queries, n_per_query, &predictions)?,
        Command::FitThreshold { annotations } => stages::fit_threshold(&cfg, &annotations)?,
        Command::Calibrate { ablation } => stages::calibrate(&cfg, ablation)?,
        Command::Evaluate { baseline, model } => {
            stages::evaluate(&cfg, baseline, model.as_deref())?
        }
        Command::Report => stages::report(&cfg)?,
        Command::Simbench { seed, modes, out } => {
            stages::simbench(&cfg, seed, modes, out.as_deref())?
        }
    };

    manifest::append_entry(&cfg, command_name, &outcome)?;
    Ok(())
}

fn main() -> ExitCode {
    // Clap handles unknown subcommands/flags itself: usage on stderr, exit 2.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
