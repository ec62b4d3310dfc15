//! `afci`: the pipeline as subcommands.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{RunConfig, CONFIG_ENV};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    MissingFile(PathBuf),
    Format(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 3,
            CliError::MissingFile(_) => 4,
            CliError::Format(_) => 5,
        }
    }

    pub fn from_io(path: &Path, e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::Runtime(format!("{}: {e}", path.display()))
        }
    }

    /// Classifies a core error raised while reading `path`.
    pub fn reading(path: &Path, e: afci_core::Error) -> Self {
        match e {
            afci_core::Error::Io(io) => CliError::from_io(path, io),
            afci_core::Error::Format(_) | afci_core::Error::Json(_) | afci_core::Error::ShapeMismatch { .. } | afci_core::Error::InvalidLabel(_) => {
                CliError::Format(format!("{}: {e}", path.display()))
            }
            other => CliError::from(other),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::MissingFile(p) => write!(f, "missing file: {}", p.display()),
            CliError::Format(m) => write!(f, "bad input format: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<afci_core::Error> for CliError {
    fn from(e: afci_core::Error) -> Self {
        match e {
            afci_core::Error::InvalidConfig { .. } => CliError::Config(e.to_string()),
            afci_core::Error::Format(_) => CliError::Format(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "afci", version, about = "Spectral DC arc-fault detection pipeline")]
struct Cli {
    /// JSON run config; keys left out keep their defaults.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the labeled synthetic trace suite.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a suite into a feature file and its JSON sidecar.
    Featurize {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only traces of these profiles.
        #[arg(long = "profile")]
        profiles: Vec<String>,
    },
    /// Cross-validated training; writes the best fold's model and held-out rows.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frame-level metrics of a model on a feature file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream one trace file through the alarm counter.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// First arcing sample, for latency reporting.
        #[arg(long)]
        onset: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Source-fraction and target-fraction transfer sweeps.
    Transfer {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a model to a drifted field regime from its own false alarms.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        /// Lab feature file used as the archive.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fleet simulation.
    Fleet {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Data-scaling sweep and power-law fit.
    Scale {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cfg, raw) = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let ctx = commands::Ctx { cfg: &cfg, raw: &raw };
    match cli.cmd {
        Cmd::Synth { out } => commands::synth(&ctx, &out),
        Cmd::Featurize { suite, out, profiles } => commands::featurize(&ctx, &suite, &out, &profiles),
        Cmd::Train { features, out } => commands::train(&ctx, &features, &out),
        Cmd::Eval { model, features, out } => commands::eval(&ctx, &model, &features, &out),
        Cmd::Detect { model, trace, onset, out } => commands::detect(&ctx, &model, &trace, onset, &out),
        Cmd::Transfer { source, target, out } => commands::transfer(&ctx, &source, &target, &out),
        Cmd::Adapt { model, features, out } => commands::adapt(&ctx, &model, &features, &out),
        Cmd::Fleet { model, features, out } => commands::fleet(&ctx, &model, &features, &out),
        Cmd::Scale { features, out } => commands::scale(&ctx, &features, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("afci: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
