//! The `lincir` command line: benchmark export, encoder pre-training, φ
//! training, evaluation, ablation sweeps and noise analysis.
//!
//! Every command writes its outputs and a `config.json` echo under `--out`.
//! Wall-clock timings go to `run.log` only, so all other outputs are
//! byte-identical for identical arguments.

mod commands;
mod data;
mod options;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

pub use commands::{ABLATION_HEADER, NOISE_HEADER};
pub use options::{Baseline, Options, Settings, Split};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] lincir_core::Error),

    #[error("cli: {0}")]
    Usage(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io: csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "lincir", version, about = "Zero-shot composed image retrieval at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub options: Options,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum Command {
    /// Write the synthetic gallery, query splits and caption corpus.
    Synth,
    /// Contrastively pre-train and freeze the dual encoder.
    Pretrain,
    /// Train the projection φ with self-masking.
    Train,
    /// Score a split with the composed query or a baseline.
    Eval,
    /// Train one φ per row of an ablation table.
    Ablate {
        #[arg(value_enum)]
        table: Table,
    },
    /// Norm statistics of every noise distribution.
    AnalyzeNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Table {
    Masking,
    Noise,
    Supervision,
    Prompts,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate { .. } => "ablate",
            Command::AnalyzeNoise => "analyze-noise",
        }
    }
}

/// Caps the worker pool from `LINCIR_THREADS`.
pub fn init_threads_from_env() {
    let threads = std::env::var("LINCIR_THREADS").ok().and_then(|v| v.parse().ok());
    lincir_core::par::init_threads(threads);
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<PathBuf, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    execute(cli)
}

/// Runs a parsed command and returns its output directory.
pub fn execute(cli: Cli) -> Result<PathBuf, CliError> {
    init_threads_from_env();
    let settings = cli.options.resolve(cli.command.name())?;
    create_dir(&settings.out)?;
    commands::dispatch(cli.command, &settings)?;
    Ok(settings.out)
}

pub(crate) fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
