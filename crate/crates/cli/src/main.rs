//! `octangle`: synthetic data, corneal boundaries, spur localisation,
//! angle-closure classification and evaluation from the command line.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid or missing options (exit code 2).
    #[error("{0}")]
    Usage(String),
    /// Failure while running (exit code 1).
    #[error(transparent)]
    Runtime(#[from] octangle::Error),
}

#[derive(Debug, Parser)]
#[command(name = "octangle", version, about = "Angle-closure detection for anterior-segment OCT images")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "OCTANGLE_THREADS")]
    threads: Option<usize>,
    /// JSON file with option defaults; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic image set with ground truth and a manifest.
    Synth(SynthArgs),
    /// Fit both corneal boundaries of every manifest image.
    DetectBoundary(DetectBoundaryArgs),
    /// Train the window regressor used to localise the scleral spur.
    TrainSvr(TrainSvrArgs),
    /// Localise the scleral spur in every manifest image.
    DetectAca(DetectAcaArgs),
    /// Train the three-branch classifier.
    TrainMldn(TrainMldnArgs),
    /// Predict the closure probability of every manifest image.
    Infer(InferArgs),
    /// Score predictions against manifest labels.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct BoundaryOpts {
    /// Gaussian smoothing sigma in pixels.
    #[arg(long)]
    sigma: Option<f64>,
    /// Minimum gradient magnitude relative to the image maximum.
    #[arg(long)]
    rel_threshold: Option<f64>,
    /// Outlier-rejection refits of the boundary curves.
    #[arg(long)]
    outlier_passes: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of closure samples.
    #[arg(long)]
    balance: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DetectBoundaryArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// JSON-Lines output, `-` for standard output.
    #[arg(long)]
    out: Option<String>,
    /// Write boundary overlays as PGM images here.
    #[arg(long)]
    debug_dir: Option<PathBuf>,
    #[command(flatten)]
    boundary: BoundaryOpts,
}

#[derive(Debug, Args)]
struct TrainSvrArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Model output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Regularisation weight C.
    #[arg(long)]
    c: Option<f64>,
    /// Insensitivity margin epsilon.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Column step between windows.
    #[arg(long)]
    stride: Option<usize>,
    /// Use at most this many images.
    #[arg(long)]
    max_images: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[command(flatten)]
    boundary: BoundaryOpts,
}

#[derive(Debug, Args)]
struct DetectAcaArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    svr_model: Option<PathBuf>,
    /// JSON-Lines output, `-` for standard output.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    stride: Option<usize>,
    #[command(flatten)]
    boundary: BoundaryOpts,
}

#[derive(Debug, Args)]
struct TrainMldnArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    svr_model: Option<PathBuf>,
    /// Model output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Head fine-tuning epochs (default: same as --epochs).
    #[arg(long)]
    phase2_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Head fine-tuning learning rate (default: same as --lr).
    #[arg(long)]
    phase2_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Network input size in pixels.
    #[arg(long)]
    input_size: Option<usize>,
    /// Training augmentation: on or off.
    #[arg(long)]
    augment: Option<String>,
    /// Comma-separated intensity factors.
    #[arg(long)]
    factors: Option<String>,
    /// Patch shift magnitude; offsets are {0, ±s}².
    #[arg(long)]
    shifts: Option<i64>,
    /// Also fine-tune the sub-networks in the second phase.
    #[arg(long)]
    end_to_end: bool,
    /// Weight the loss by inverse class frequency.
    #[arg(long)]
    balance_classes: bool,
    #[arg(long)]
    stride: Option<usize>,
    #[command(flatten)]
    boundary: BoundaryOpts,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    svr_model: Option<PathBuf>,
    #[arg(long)]
    mldn_model: Option<PathBuf>,
    /// JSON-Lines output, `-` for standard output.
    #[arg(long)]
    out: Option<String>,
    /// Probability at or above which a sample is labelled closure.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,
    #[command(flatten)]
    boundary: BoundaryOpts,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// JSON-Lines predictions from `infer`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Manifest holding the true labels.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// JSON report output, `-` for standard output.
    #[arg(long)]
    out: Option<String>,
    /// Also write the ROC curve as CSV.
    #[arg(long)]
    roc_csv: Option<PathBuf>,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))?;
    }
    let config = cli.config.as_deref();
    match cli.command {
        Command::Synth(a) => commands::synth(a, config),
        Command::DetectBoundary(a) => commands::detect_boundary(a, config),
        Command::TrainSvr(a) => commands::train_svr(a, config),
        Command::DetectAca(a) => commands::detect_aca(a, config),
        Command::TrainMldn(a) => commands::train_mldn(a, config),
        Command::Infer(a) => commands::infer(a, config),
        Command::Eval(a) => commands::eval(a, config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
