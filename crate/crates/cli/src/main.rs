//! `foodspace`: one entry point for vocabulary building, data preparation,
//! association and generator training, evaluation and full experiment runs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use foodspace_core::ErrorKind;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_CONFIG: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;

/// Ingredient/image association, conditional meal-image synthesis and their
/// evaluation.
///
/// Settings resolve from defaults, then the --config file, then
/// FOODSPACE_<SECTION>__<KEY> environment variables, then flags.
#[derive(Debug, Parser)]
#[command(name = "foodspace", version, propagate_version = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Log filter: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info", value_name = "LEVEL")]
    pub log_level: String,
    /// Override one configuration key, e.g. `--set gan.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Canonical ingredient vocabulary.
    #[command(subcommand)]
    Vocab(VocabCommand),
    /// Synthetic datasets and corpus splits.
    #[command(subcommand)]
    Data(DataCommand),
    /// Ingredient/image association model.
    #[command(subcommand)]
    Assoc(AssocCommand),
    /// Cross-modal retrieval evaluation.
    #[command(subcommand)]
    Retrieval(RetrievalCommand),
    /// Conditional image generator.
    #[command(subcommand)]
    Gan(GanCommand),
    /// Inception Score, Frechet distance and the feature extractor.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// End-to-end experiment runs.
    #[command(subcommand)]
    Exp(ExpCommand),
    /// Check the environment, configuration and an optional dataset.
    Doctor {
        /// Dataset directory holding manifest.jsonl.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum VocabCommand {
    /// Build the vocabulary from a corpus and reviewed merge decisions.
    Build {
        /// Raw corpus (JSON lines).
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Decision file: source, target, accept|reject|proposed.
        #[arg(long, value_name = "FILE")]
        decisions: Option<PathBuf>,
        /// Keep the most frequent raw strings.
        #[arg(long, value_name = "N")]
        top_k: Option<usize>,
    },
    /// Train ingredient embeddings and write merge proposals for review.
    Propose {
        /// Raw corpus (JSON lines).
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Minimum cosine similarity of a proposal.
        #[arg(long, value_name = "T")]
        threshold: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Generate the synthetic glyph-meal dataset.
    Synth,
    /// Filter a corpus, encode it and split it into partitions.
    Split {
        /// Raw corpus (JSON lines).
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Vocabulary directory written by `vocab build`.
        #[arg(long, value_name = "DIR")]
        vocab: PathBuf,
        /// Directory image paths are relative to [default: corpus directory].
        #[arg(long, value_name = "DIR")]
        images_root: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AssocCommand {
    /// Train the association model.
    Train {
        /// Dataset directory holding manifest.jsonl.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Training epochs.
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
    },
    /// Embed every recipe and its images.
    Embed {
        /// Association checkpoint directory.
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        /// Dataset directory holding manifest.jsonl.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum RetrievalCommand {
    /// Median rank and recall@K in both directions, with a random baseline.
    Eval {
        /// Embeddings written by `assoc embed`.
        #[arg(long, value_name = "FILE")]
        embeddings: PathBuf,
        /// Partition to evaluate: train, val or test.
        #[arg(long, default_value = "test")]
        partition: String,
        /// Candidates per pool.
        #[arg(long, value_name = "N")]
        pool_size: Option<usize>,
        /// Pools to sample.
        #[arg(long, value_name = "N")]
        repeats: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum GanCommand {
    /// Train the generator against a frozen association model.
    Train {
        /// Dataset directory holding manifest.jsonl.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Association checkpoint directory.
        #[arg(long, value_name = "DIR")]
        assoc: PathBuf,
        /// Training steps.
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
        /// Use +log D for fake and mismatched terms (unstable).
        #[arg(long)]
        literal_paper_loss: bool,
    },
    /// Fixed-noise and fixed-recipe grids plus one image per recipe.
    Sample {
        /// Generator checkpoint directory.
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        /// Dataset directory holding manifest.jsonl.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Partition to draw recipes from.
        #[arg(long, default_value = "test")]
        partition: String,
        /// Recipe for the fixed-recipe grid [default: first in partition].
        #[arg(long, value_name = "ID")]
        recipe: Option<String>,
    },
    /// Images along the line between two recipes' encodings.
    Interpolate {
        /// Generator checkpoint directory.
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        /// Dataset directory holding manifest.jsonl.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Source recipe id.
        #[arg(long, value_name = "ID")]
        from: String,
        /// Target recipe id.
        #[arg(long, value_name = "ID")]
        to: String,
        /// Images in the strip, endpoints included.
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum MetricsCommand {
    /// Inception Score of a directory of images.
    Is {
        /// Directory of PNG images.
        #[arg(long, value_name = "DIR")]
        images: PathBuf,
        /// Extractor directory written by `metrics train-extractor`.
        #[arg(long, value_name = "DIR")]
        extractor: PathBuf,
        /// Number of splits.
        #[arg(long, value_name = "N")]
        splits: Option<usize>,
    },
    /// Frechet distance between two directories of images.
    Fid {
        /// Directory of real PNG images.
        #[arg(long, value_name = "DIR")]
        real: PathBuf,
        /// Directory of generated PNG images.
        #[arg(long, value_name = "DIR")]
        fake: PathBuf,
        /// Extractor directory written by `metrics train-extractor`.
        #[arg(long, value_name = "DIR")]
        extractor: PathBuf,
    },
    /// Train the glyph classifier used as the feature extractor.
    TrainExtractor {
        /// Synthetic dataset whose glyphs define the classes.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExpCommand {
    /// Run every stage and write the tables, figures and report.
    Run {
        /// Existing dataset directory [default: generate a synthetic one].
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Print the report of a finished run.
    Report {
        /// Run directory.
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Numeric => EXIT_NUMERIC,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.global.log_level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match commands::dispatch(&cli) {
        Ok(result) => {
            println!("{}", result.summary);
            for a in &result.artifacts {
                log::info!("wrote {}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
