//! `acrodis` command-line driver.
//!
//! Exit codes: 0 success, 1 validation error, 2 I/O error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use acrodis::model::PathMode;

#[derive(Debug, Parser)]
#[command(name = "acrodis", version, about = "Dual-path acronym disambiguation")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration (JSON); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replicate positive pairs (2k−1 pairs per sentence).
    #[arg(long, global = true)]
    pub upsample: bool,
    #[arg(long, global = true, value_enum)]
    pub upsample_mode: Option<UpsampleMode>,
    /// Training preset.
    #[arg(long, global = true, value_parser = ["toy", "paper"])]
    pub preset: Option<String>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Encoder paths feeding the head.
    #[arg(long, global = true, value_enum)]
    pub paths: Option<Paths>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum UpsampleMode {
    ToCandidateCount,
    Balanced,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Paths {
    Dual,
    A,
    B,
}

impl From<Paths> for PathMode {
    fn from(p: Paths) -> Self {
        match p {
            Paths::Dual => PathMode::Dual,
            Paths::A => PathMode::AOnly,
            Paths::B => PathMode::BOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub fn file(self) -> &'static str {
        match self {
            SplitName::Train => "train.json",
            SplitName::Dev => "dev.json",
            SplitName::Test => "test.json",
        }
    }
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Dictionary JSON (acronym → long forms).
    #[arg(long)]
    pub dict: PathBuf,
    /// Sample files (JSON arrays of sentences).
    #[arg(required = true)]
    pub samples: Vec<PathBuf>,
    /// Field mapping for sample files with non-canonical keys.
    #[arg(long)]
    pub field_map: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Gen,
    /// Corpus statistics over one or more sample files.
    Stats(Inputs),
    /// Build (sentence, candidate) classification pairs.
    Pairs(Inputs),
    /// Train a byte-level BPE vocabulary.
    TokTrainBpe {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        merges: Option<usize>,
    },
    /// Build a WordPiece vocabulary.
    TokTrainWp {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a model on a corpus directory (dictionary.json, train.json, dev.json).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Reuse a trained BPE vocabulary instead of training one.
        #[arg(long, requires = "wordpiece")]
        bpe: Option<PathBuf>,
        #[arg(long, requires = "bpe")]
        wordpiece: Option<PathBuf>,
    },
    /// Evaluate models, cached predictions and/or the MF baseline on a split
    /// and write a comparison table.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "dev")]
        split: SplitName,
        /// Model directory, optionally as NAME=DIR. Repeatable.
        #[arg(long = "model")]
        models: Vec<String>,
        /// Cached predictions JSON, optionally as NAME=FILE. Repeatable.
        #[arg(long = "predictions")]
        predictions: Vec<String>,
        /// Include the most-frequent baseline.
        #[arg(long)]
        mf: bool,
        /// Use best-dev instead of final weights.
        #[arg(long)]
        best: bool,
        /// Macro-average over every dictionary long form.
        #[arg(long)]
        dictionary_classes: bool,
    },
    /// Predict long forms for samples (gold labels optional).
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        best: bool,
    },
    /// Fit and evaluate the most-frequent baseline.
    BaselineMf {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        dictionary_classes: bool,
    },
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("AD_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
