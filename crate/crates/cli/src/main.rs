//! `tsgo`: train MPS Born machines with TSGO or Adam, scan chain lengths,
//! draw samples and check model invariants.
//!
//! Exit status: 0 success, 1 runtime failure, 2 usage error, 3 failed check.

mod commands;
mod config;
mod input;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::input::Size;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<tsgo::Error> for Failure {
    fn from(e: tsgo::Error) -> Self {
        Self::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "tsgo",
    version,
    about = "Tangent-space gradient optimization for MPS Born machines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write the model file, trace CSV and manifest.
    Train(TrainArgs),
    /// Compare converged TSGO and Adam losses across chain lengths.
    ScanLength(ScanArgs),
    /// Draw configurations from a trained model.
    Sample(SampleArgs),
    /// Report canonical, gradient and normalization invariants of a model.
    Check(CheckArgs),
    /// Write a synthetic sparse binary dataset.
    Synth(SynthArgs),
}

/// Options shared by the training commands. Every value may also come from
/// `--config`; flags take precedence.
#[derive(Args, Debug, Clone)]
pub struct TrainingOptions {
    /// key = value file with defaults for any of these options
    #[arg(long)]
    config: Option<PathBuf>,
    /// IDX image file (optionally gzipped) or dataset written by `synth`
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    theta0: Option<f64>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Maximum bond dimension
    #[arg(long)]
    bond: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of images drawn (seeded, without replacement)
    #[arg(long)]
    subset: Option<usize>,
    /// Binarize pixels above this value in [0, 1]
    #[arg(long)]
    binarize: Option<f64>,
    /// Adam minibatch size (default: full batch)
    #[arg(long)]
    batch_size: Option<usize>,
    /// Angle shrink factor applied when the loss rises
    #[arg(long)]
    shrink: Option<f64>,
    #[arg(long)]
    min_theta: Option<f64>,
    /// Hold theta constant instead of shrinking it
    #[arg(long)]
    fixed_angle: Option<f64>,
    /// Step along the raw gradient instead of its unit direction
    #[arg(long)]
    raw_gradient: bool,
    /// Undo an epoch whose loss went up
    #[arg(long)]
    rollback: bool,
    /// Write 0 in the elapsed-time column (byte-stable traces)
    #[arg(long)]
    no_timing: bool,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: TrainingOptions,
    /// tsgo or adam
    #[arg(long)]
    optimizer: Option<tsgo::OptimizerKind>,
    /// Resize images to <H>x<W> before training
    #[arg(long)]
    resize: Option<Size>,
    /// Run Adam for this many epochs, then switch to TSGO
    #[arg(long)]
    switch_epoch: Option<usize>,
    /// Trace file stem (default: the optimizer protocol)
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args, Debug)]
pub struct ScanArgs {
    #[command(flatten)]
    common: TrainingOptions,
    /// Comma-separated square chain lengths, e.g. 49,100,196
    #[arg(long)]
    lengths: Option<String>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for PGM files or samples.txt; rows go to stdout without it
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write 0/1 text rows even for square lengths
    #[arg(long)]
    text: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    resize: Option<Size>,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    binarize: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Chain length (at most 14)
    #[arg(long)]
    sites: usize,
    #[arg(long)]
    support: usize,
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use equal weights on the support instead of random ones
    #[arg(long)]
    equal_weights: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn configure_threads() -> Result<(), Failure> {
    let Some(raw) = std::env::var_os("TSGO_THREADS") else {
        return Ok(());
    };
    let threads = raw
        .to_str()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Failure::Usage(format!(
                "TSGO_THREADS must be a positive integer, got {raw:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::ScanLength(a) => commands::scan_length(a),
        Command::Sample(a) => commands::sample(a),
        Command::Check(a) => commands::check(a),
        Command::Synth(a) => commands::synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(3)
        }
    }
}
