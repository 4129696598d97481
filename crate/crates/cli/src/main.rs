//! `heatpoint`: encode/decode heatmaps, build datasets, train, predict,
//! evaluate, and verify gradients.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 usage error.

mod commands;
mod manifest;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "heatpoint", version, about = "Multi-instance point detection by heatmap regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a points file as a heatmap.
    Encode(EncodeArgs),
    /// Extract points from a heatmap.
    Decode(DecodeArgs),
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Group-level k-fold split of a dataset directory.
    Split(SplitArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Predict points for every image in a directory.
    Predict(PredictArgs),
    /// Score predicted points against ground truth.
    Eval(EvalArgs),
    /// Finite-difference gradient verification.
    Gradcheck(GradcheckArgs),
    /// Draw a match dump onto an image.
    Overlay(OverlayArgs),
    /// k-fold cross-validation over a parameter grid.
    Xval(XvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DistKind {
    Gaussian,
    Tanh,
    Binary,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    /// Points file (canonical or labelme JSON).
    #[arg(long)]
    points: PathBuf,
    #[arg(long, value_enum)]
    dist: DistKind,
    /// Gaussian spread, required for `--dist gaussian`.
    #[arg(long)]
    sigma1: Option<f64>,
    /// Tanh scale, required for `--dist tanh`.
    #[arg(long)]
    alpha: Option<f64>,
    /// HM01 output.
    #[arg(long)]
    out: PathBuf,
    /// Also write a 16-bit PGM.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// HM01 grid or single-channel PGM.
    #[arg(long)]
    heatmap: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Pixel connectivity: 4 or 8.
    #[arg(long, default_value_t = 8)]
    connectivity: u8,
    /// Canonical points JSON output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    dots_min: usize,
    #[arg(long, default_value_t = 12)]
    dots_max: usize,
    #[arg(long, default_value_t = 10.0)]
    min_separation: f64,
    #[arg(long, default_value_t = 4)]
    groups: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Id offset, so several calls can produce disjoint sets.
    #[arg(long, default_value_t = 0)]
    first_index: usize,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct ConfigOverrides {
    /// Experiment JSON (`{"model": {...}, "train": {...}}`); flags win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<u8>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    sigma1: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// HW01 weights output; the log goes to `<out>.log.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of `.ppm` images.
    #[arg(long)]
    data: PathBuf,
    /// Output directory of `<stem>.json` points files.
    #[arg(long)]
    out: PathBuf,
    /// Also write stage-2 heatmaps as `<stem>.pgm`.
    #[arg(long)]
    heatmaps: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "6,8,10")]
    radii: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "micro,macro")]
    mode: Vec<String>,
    /// Metrics CSV; JSON and match dump are written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_delimiter = ',', default_value = "ops,layers")]
    scope: Vec<String>,
    /// Maximum relative error; defaults to 1e-4 (ops, layers) and 1e-3 (model).
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Debug, Args)]
struct OverlayArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    matches: PathBuf,
    /// Entry of the dump to draw; defaults to the image file stem.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct XvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Grid of target spreads.
    #[arg(long, value_delimiter = ',')]
    grid_sigma1: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    grid_sigma2: Vec<f64>,
    /// Target distributions: `gaussian` or `tanh:<alpha>`.
    #[arg(long, value_delimiter = ',')]
    grid_dist: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    grid_variant: Vec<u8>,
    #[arg(long, default_value_t = 6.0)]
    radius: f64,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Synth(a) => commands::synth(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Overlay(a) => commands::overlay(a),
        Command::Xval(a) => commands::xval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<clap::Error>() {
            Some(usage) => {
                let _ = usage.print();
                ExitCode::from(2)
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
