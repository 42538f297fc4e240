//! Command-line front end: configuration, subcommands and run manifests.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure (divergence, degenerate geometry), 1 anything else.

// `!(x > 0.0)` is deliberate: it rejects NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fisherjscc::Error;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_) | Error::ArchitectureMismatch(_) => CliError::Config(msg),
            Error::Data { .. } | Error::LabelMismatch { .. } | Error::Csv(_) | Error::ClassOutOfRange { .. } => {
                CliError::Data(msg)
            }
            Error::Diverged { .. }
            | Error::NonFinite { .. }
            | Error::DegenerateCovariance(_)
            | Error::PowerViolation { .. }
            | Error::NotNormalized { .. } => CliError::Numerical(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "fisherjscc", version, about = "Fisher-regularized JSCC classification experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults are used for anything missing.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or import) the train and test splits into <out>/data.
    GenData {
        /// Check the files in <out>/data against the recorded digests instead.
        #[arg(long)]
        verify: bool,
    },
    /// Train an encoder/decoder pair on <out>/data/train.csv.
    Train,
    /// Run an experiment on the test split with a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Experiment kind, overriding the config.
        #[arg(long, value_parser = parse_kind)]
        kind: Option<config::ExperimentKind>,
    },
    /// Paired error sweep of two checkpoints under shared channel draws.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Monte-Carlo check of the quadratic KL approximation.
    ValidateApprox {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Negative log-posterior on a 2-D slice of representation space.
    PosteriorMap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> Result<config::ExperimentKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown experiment kind {s:?} (sweep, taylor, track, grid)"))
}

/// Resolves the configuration and runs one subcommand.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    if g.threads == 0 {
        return Err(CliError::Config("--threads must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(g.threads)
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;
    let force = g.force;
    pool.install(|| match &cli.command {
        Command::GenData { verify: false } => commands::gen_data(&cfg, force),
        Command::GenData { verify: true } => commands::verify_data(&cfg),
        Command::Train => commands::train(&cfg, force),
        Command::Eval { checkpoint, kind } => {
            commands::eval(&cfg, checkpoint.as_deref(), kind.unwrap_or(cfg.experiment.kind), force)
        }
        Command::Compare { a, b } => commands::compare(&cfg, a, b, force),
        Command::ValidateApprox { checkpoint } => {
            commands::eval(&cfg, checkpoint.as_deref(), config::ExperimentKind::Taylor, force)
        }
        Command::PosteriorMap { checkpoint } => {
            commands::eval(&cfg, checkpoint.as_deref(), config::ExperimentKind::Grid, force)
        }
    })
}
