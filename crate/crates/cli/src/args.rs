use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "dfkit",
    version,
    about = "Train and evaluate real/fake face image classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic gradient/checkerboard dataset.
    Synth(SynthArgs),
    /// Write a stratified train/val/test manifest for a dataset tree.
    Split(SplitArgs),
    /// Train a model and write checkpoints and learning curves.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Evaluate(EvaluateArgs),
    /// Classify individual images.
    Predict(PredictArgs),
    /// Plot learning curves and tabulate results.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Images per class.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset root with real/ and fake/ (or train/valid/test trees).
    #[arg(long)]
    pub data: PathBuf,
    /// Manifest path [default: <data>/split.tsv].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.70, 0.15, 0.15])]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also compare per-split intensity histograms.
    #[arg(long)]
    pub histogram: bool,
    #[arg(long, default_value_t = 0.1)]
    pub histogram_threshold: f64,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// `key = value` file; flags given here override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// [default: <data>/split.tsv]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// dfcnet, vfdnet, resnet or mobilenetv3.
    #[arg(long)]
    pub model: Option<String>,
    /// desk or full.
    #[arg(long)]
    pub scale: Option<String>,
    /// Square input side; overrides the model default.
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// none, basic, rand_augment, auto_lite or combined.
    #[arg(long)]
    pub augment: Option<String>,
    /// Output directory [default: runs/<model>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record wall-clock seconds in curves.csv.
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// [default: <data>/split.tsv]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Row label in the metrics CSV [default: the model kind].
    #[arg(long)]
    pub name: Option<String>,
    /// Metrics CSV [default: metrics.csv next to the checkpoint].
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Confusion grid CSV [default: confusion.csv next to the checkpoint].
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image files or directories of images.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Learning curves, as `name=path` or a path (named after its directory).
    #[arg(long, num_args = 1..)]
    pub curves: Vec<String>,
    /// Metrics CSVs to tabulate.
    #[arg(long, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}
