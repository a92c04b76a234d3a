//! `naturalize`: synthesize corpora, train detectors and H-Net, transform
//! images and evaluate detection before and after transformation.
//!
//! Exit codes: 0 success, 1 undefined metric or failed run, 2 usage error or
//! missing input. Diagnostics go to stderr; stdout carries output paths and
//! JSON summaries only.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "naturalize", version, about = "Make computer-generated images read as natural to a detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus of one class.
    Synth(SynthArgs),
    /// Train a differential-histogram detector on labeled corpora.
    TrainDetector(TrainDetectorArgs),
    /// Train H-Net against a fixed detector.
    Train(TrainArgs),
    /// Transform CG images with a trained H-Net.
    Transform(TransformArgs),
    /// Score a corpus before and after transformation, or run a whole scenario.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// `natural` or `cg`.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generator profile, 1 to 3.
    #[arg(long)]
    pub dataset: Option<u32>,
    /// Image file format: `png` or `ppm`.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainDetectorArgs {
    /// Corpus directory with a manifest; may be repeated.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    /// `mlp` or `flda`.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct HyperArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub iterations_per_epoch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub size: Option<usize>,
    /// Save every this many iterations; 0 saves only at the end.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub perceptual_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub detector: PathBuf,
    /// Perceptual network weights; a seeded network is used when absent.
    #[arg(long)]
    pub perceptual: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log; defaults to `<out>.metrics.ndjson`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from a checkpoint and the `.state` file saved beside it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many iterations have completed.
    #[arg(long)]
    pub stop_after: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TransformArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file, or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// A PNG file in single-image mode, a directory otherwise.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Run the full pipeline for scenario `1`, `2.1` or `2.2`.
    #[arg(long, conflicts_with_all = ["detector", "corpus", "checkpoint"])]
    pub scenario: Option<String>,
    #[arg(long, required_unless_present = "scenario")]
    pub detector: Option<PathBuf>,
    /// Evaluation corpus directory; may be repeated, together holding natural and CG images.
    #[arg(long, required_unless_present = "scenario")]
    pub corpus: Vec<PathBuf>,
    /// H-Net checkpoint; adds the after-transformation report.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub detector_per_class: Option<usize>,
    #[arg(long)]
    pub eval_per_class: Option<usize>,
    #[arg(long)]
    pub corpus_seed: Option<u64>,
    #[arg(long)]
    pub detector_seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(msg: impl std::fmt::Display) -> Self {
        Failure { code: 2, error: anyhow::anyhow!("{msg}") }
    }

    pub fn undefined(msg: impl std::fmt::Display) -> Self {
        Failure { code: 1, error: anyhow::anyhow!("{msg}") }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: 1, error: e.into() }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("NATURALIZE_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("NATURALIZE_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(Failure::usage)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::TrainDetector(a) => commands::train_detector(a),
        Command::Train(a) => commands::train(a),
        Command::Transform(a) => commands::transform(a),
        Command::Evaluate(a) => commands::evaluate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
