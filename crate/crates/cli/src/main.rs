//! `mpgan`: dataset generation, training, sampling and evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod error;
mod mesh;
mod plot;

use config::Mode;
use error::CliResult;

#[derive(Parser)]
#[command(name = "mpgan", version, about = "Multi-projection GAN: learn voxel shapes from unannotated silhouettes")]
struct Cli {
    /// Worker threads (falls back to MPGAN_THREADS, then the config file).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Configuration flags shared by every command.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.heads=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural silhouette dataset, or import a folder of masks.
    Dataset(DatasetArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Sample shapes from a checkpoint.
    Generate(GenerateArgs),
    /// Evaluate a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Train the frozen feature extractor used for FID.
    ExtractorTrain(ExtractorArgs),
}

#[derive(Args)]
pub struct DatasetArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Import unlabeled PGM/PNG masks from this folder instead of generating.
    #[arg(long)]
    pub import: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub shapes: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, metrics and plots.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Number of projections (discriminator heads).
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Replace an existing non-empty run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Voxel,
    Mesh,
    Silhouette,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Voxel)]
    pub format: Format,
    /// Occupancy threshold for meshes and silhouettes.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Azimuths in degrees for silhouette output.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0])]
    pub azimuths: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Fid,
    ViewAcc,
    ViewDist,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Generator checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Feature extractor checkpoint (fid).
    #[arg(long)]
    pub extractor: Option<PathBuf>,
    /// View classifier checkpoint (view-acc, view-dist).
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Cluster assignment JSON (view-dist).
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write an SVG chart.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct ExtractorArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

fn threads(flag: Option<usize>) -> CliResult<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("MPGAN_THREADS") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| error::usage(format!("MPGAN_THREADS={v:?} is not a number"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = threads(cli.threads)?;
    match cli.command {
        Command::Dataset(a) => commands::dataset(a, threads),
        Command::Train(a) => commands::train(a, threads),
        Command::Generate(a) => commands::generate(a),
        Command::Eval(a) => commands::eval(a, threads),
        Command::ExtractorTrain(a) => commands::extractor_train(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
