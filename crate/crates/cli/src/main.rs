//! `clinalign` command-line frontend.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<clinalign::Error> for CliError {
    fn from(e: clinalign::Error) -> Self {
        use clinalign::Error as E;
        match e {
            E::Config(_) | E::InvalidInput(_) | E::Parse { .. } | E::VersionMismatch { .. } | E::Checksum { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "clinalign", version, about = "Soft-label contrastive image-report alignment toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML file with [corpus] [loss] [train] [encoder] [paths] [eval] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set loss.tau_t=0.85`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seeds corpus generation, training, encoder init and evaluation sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// File for data-generating commands, directory for train/eval commands.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub triplets: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic image-feature/report corpus.
    SynthData {
        #[arg(long)]
        n: Option<usize>,
    },
    /// One hard negative per corpus report.
    GenNegatives,
    /// Build CXR-Align triplets from a corpus.
    CxrAlignGen,
    /// Train encoders; writes checkpoint, metrics log and config.
    Train {
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Per-entity zero-shot AUC with prompt pairs.
    EvalZeroshot,
    /// Image-to-report retrieval with clinical macro scores.
    EvalRetrieval,
    /// Triplet task A (negation) and task B (completeness) accuracy.
    EvalCxrAlign,
    /// Joint present/absent prompt correctness.
    EvalAdversarial,
    /// Rank of the single normal report in an abnormal pool.
    EvalNormalDetect,
    /// Finite-difference check of loss and encoder gradients.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::GenNegatives => "gen-negatives",
            Command::CxrAlignGen => "cxr-align-gen",
            Command::Train { .. } => "train",
            Command::EvalZeroshot => "eval-zeroshot",
            Command::EvalRetrieval => "eval-retrieval",
            Command::EvalCxrAlign => "eval-cxr-align",
            Command::EvalAdversarial => "eval-adversarial",
            Command::EvalNormalDetect => "eval-normal-detect",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("run `clinalign --help` for usage");
            }
            ExitCode::from(e.code())
        }
    }
}
