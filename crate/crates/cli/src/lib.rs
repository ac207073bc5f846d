//! Command-line front end.
//!
//! Exit codes: 0 success, 1 gradient check failure, 2 usage, configuration
//! or malformed input, 3 I/O failure or negative input, 4 divergence.

// Negated comparisons also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deconver_core::{Error, Precision};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "deconver", version, about = "Nonnegative deconvolution and Deconver segmentation")]
pub struct Cli {
    /// Overrides every seed (data, initialisation, sampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::Double)]
    pub precision: PrecisionArg,
    /// Worker threads for data-parallel kernels.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs multiplicative updates on a nonnegative deconvolution problem.
    Solve(SolveArgs),
    /// Compares analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Trains a network from a run configuration.
    Train(TrainArgs),
    /// Sliding-window inference with a checkpoint.
    Predict(PredictArgs),
    /// Scores predicted masks against ground truth.
    Eval(EvalArgs),
    /// Prints parameter count and FLOPs per voxel.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Observation X (DCT1, `C × spatial`).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Filter V (DCT1, `C × E × kernel`).
    #[arg(long)]
    pub filter: PathBuf,
    /// Initial sources; all ones when omitted.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f64,
    /// Final sources (DCT1).
    #[arg(long)]
    pub out: PathBuf,
    /// Error trace CSV (`iter,error`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Primitives,
    Mixer,
    Block,
    Network,
    /// Negative control with a deliberately wrong backward rule.
    #[value(hide = true)]
    Faulty,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scope::Primitives)]
    pub scope: Scope,
    /// Maximum relative error; 1e-6 for primitives and 1e-5 otherwise.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Coordinates sampled per input (all when 0).
    #[arg(long)]
    pub max_coords: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (DCT1, `C_in × spatial`).
    #[arg(long)]
    pub image: PathBuf,
    /// Probability map (DCT1).
    #[arg(long)]
    pub out: PathBuf,
    /// Binarized mask (DCT1).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// 8-bit grayscale PNG of the probabilities (rank-2 images only).
    #[arg(long)]
    pub png: Option<PathBuf>,
    /// Window extent per axis; the whole image when omitted.
    #[arg(long, value_delimiter = ',')]
    pub patch: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted binary mask (DCT1, `C × spatial`).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth binary mask (DCT1).
    #[arg(long)]
    pub gt: PathBuf,
    /// Metrics CSV (`sample,class,dsc,hd95`).
    #[arg(long)]
    pub out: PathBuf,
    /// Voxel spacing per axis; unit spacing when omitted.
    #[arg(long, value_delimiter = ',')]
    pub spacing: Option<Vec<f64>>,
    /// Sample label in the CSV.
    #[arg(long, default_value = "0")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Run configuration (TOML); overrides `--preset`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "isles")]
    pub preset: String,
}

/// Maps a library error to a process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Negative { .. } => EXIT_IO,
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

/// Runs a parsed command line and returns the exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return EXIT_USAGE;
        }
    }
    let precision = cli.precision.into();
    let result = match &cli.command {
        Command::Solve(a) => commands::solve(a, precision),
        Command::Gradcheck(a) => commands::gradcheck(a, cli.seed.unwrap_or(0)),
        Command::Train(a) => commands::train(a, cli.seed, precision),
        Command::Predict(a) => commands::predict(a, precision),
        Command::Eval(a) => commands::eval(a),
        Command::Params(a) => commands::params(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
