//! Command-line entry point.
//!
//! Every command reads an optional JSON config; flags given on the command
//! line override the file. Exit codes: 0 success, 2 usage or configuration
//! error, 3 data error, 4 tolerance failure.

mod commands;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::cv::{CvError, GalleryMode, UnifiedTest};
use crate::embed::EmbedError;
use crate::ensemble::MissingVariantPolicy;
use crate::eval::EvalError;
use crate::losses::LossError;
use crate::synth::SynthError;
use crate::trainsim::TrainError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_TOLERANCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "phenomatch", version, about = "Disorder matching over facial embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic long-tail dataset.
    Gen(CommonArgs),
    /// Evaluate a gallery configuration.
    Eval(EvalArgs),
    /// Cross-validate over rare-disorder folds.
    Cv(EvalArgs),
    /// Run the fine-tuning simulator.
    Trainsim(TrainArgs),
    /// Check loss gradients against finite differences.
    Checkgrad(CheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Declared channels as `model:tag` pairs.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long)]
    pub policy: Option<MissingVariantPolicy>,
    /// Cut-offs for top-k accuracy.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Embedding files, one per model.
    #[arg(long, value_delimiter = ',')]
    pub embeddings: Option<Vec<PathBuf>>,
    /// Split file (`image_id,split`).
    #[arg(long)]
    pub splits: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<GalleryMode>,
    #[arg(long)]
    pub held_fold: Option<usize>,
    #[arg(long)]
    pub n_folds: Option<usize>,
    #[arg(long)]
    pub unified_test: Option<UnifiedTest>,
    /// Keep gallery images of the probe's own subject.
    #[arg(long)]
    pub no_exclusion: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Random configurations per loss.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
}

impl CommonArgs {
    fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.threads {
            if n == 0 {
                return Err(CliError::usage("--threads must be at least 1"));
            }
            builder = builder.num_threads(n);
        }
        builder.build().map_err(|e| CliError::usage(e.to_string()))
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::DimensionMismatch { .. } => Self::usage(e.to_string()),
            EmbedError::Io(_) => Self::usage(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidK(_) | EvalError::DimensionMismatch { .. } => Self::usage(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<CvError> for CliError {
    fn from(e: CvError) -> Self {
        match e {
            CvError::Embed(inner) => inner.into(),
            CvError::Eval(inner) => inner.into(),
            CvError::ConfigInvalid(_) | CvError::HeldFoldOutOfRange { .. } | CvError::InvalidFoldCount(_) => {
                Self::usage(e.to_string())
            }
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::SpecInvalid(_) => Self::usage(e.to_string()),
            SynthError::Io(_) => Self::usage(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::ConfigInvalid(_) => Self::usage(e.to_string()),
            TrainError::Eval(inner) => inner.into(),
            TrainError::Cv(inner) => inner.into(),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(format!("io failure: {e}"))
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
