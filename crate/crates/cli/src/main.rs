//! `symn`: train, sample, probe and compare embedding-noise fine-tuning runs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure (non-finite loss).

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use symn_core::data::Template;
use symn_core::noise::NoiseKind;
use symn_core::probe::DirectionKind;
use symn_core::ErrorClass;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] symn_core::Error),
}

macro_rules! core_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

core_error!(
    symn_core::trainer::TrainError,
    symn_core::probe::ProbeError,
    symn_core::textmetrics::MetricsError,
    symn_core::data::DataError,
    symn_core::checkpoint::CheckpointError,
    symn_core::model::ModelError,
    symn_core::noise::NoiseError
);

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io { .. } => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "symn", version, about = "Fine-tune a small byte-level transformer with embedding noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Sample responses for a prompts file.
    Generate(GenerateArgs),
    /// Central-difference curvature probe of a checkpoint.
    Probe(ProbeArgs),
    /// Length, repetition and diversity of a response corpus.
    Metrics(MetricsArgs),
    /// Train and compare several noise settings.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Default)]
pub struct DataFlags {
    /// Instruction JSONL ("instruction", optional "input", "output").
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Separate evaluation JSONL.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Hold out the last N records of --data for evaluation.
    #[arg(long)]
    pub eval_holdout: Option<usize>,
    #[arg(long)]
    pub template: Option<Template>,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub context_len: Option<usize>,
    /// Initialization seed (defaults to --seed).
    #[arg(long)]
    pub model_seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct OptFlags {
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip_norm: Option<f64>,
    /// Seed for batch order (and, by default, init and noise).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Noise stream seed (defaults to --seed).
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Token budget per example (defaults to the context length).
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub opt: OptFlags,
    /// none, uniform, gaussian, bernoulli or symnoise.
    #[arg(long)]
    pub noise: Option<NoiseKind>,
    /// Noise scale before the 1/sqrt(L*d) normalization.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Halve the symnoise batch to match the additive schemes' throughput.
    #[arg(long)]
    pub compute_matched: bool,
    /// Start from this checkpoint instead of a fresh init.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// key = value defaults, overridden by flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Repeat the run recorded in this manifest.
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    /// Root directory for run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSONL of {"prompt"} or {"instruction", "input"} objects.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Output JSONL of {"prompt", "response"}.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_new: Option<usize>,
    /// 0 means greedy.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub template: Option<Template>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Instruction JSONL to probe.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Probe only the last N records of --data.
    #[arg(long)]
    pub holdout: Option<usize>,
    #[arg(long)]
    pub directions: Option<usize>,
    /// One or more step sizes; each gets its own report.
    #[arg(long, value_delimiter = ',')]
    pub delta: Vec<f64>,
    #[arg(long)]
    pub direction_kind: Option<DirectionKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub template: Option<Template>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// JSON report file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct MetricsArgs {
    /// Response JSONL of {"prompt", "response"}.
    #[arg(long)]
    pub responses: Option<PathBuf>,
    /// Word budget per response: 50 for Alpaca-style data, 100 or 150 for
    /// longer-form datasets.
    #[arg(long)]
    pub k_words: Option<usize>,
    /// Writes PREFIX.json and PREFIX.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub opt: OptFlags,
    /// Comma-separated settings such as none,uniform:5,symnoise:5.
    #[arg(long)]
    pub settings: Option<String>,
    #[arg(long)]
    pub compute_matched: bool,
    /// Tokens generated per eval prompt.
    #[arg(long)]
    pub max_new: Option<usize>,
    /// Word budget for the repetition column.
    #[arg(long)]
    pub k_words: Option<usize>,
    #[arg(long)]
    pub probe_directions: Option<usize>,
    #[arg(long)]
    pub probe_delta: Option<f64>,
    /// Run settings on separate threads.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Probe(a) => commands::probe(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
