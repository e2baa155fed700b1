use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "yoloface", version, about = "Face detection with five-point landmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect faces in images.
    Detect(DetectArgs),
    /// Score predictions against WiderFace-style ground truth.
    Eval(EvalArgs),
    /// Per-stage shapes, parameter and flop counts.
    Info(InfoArgs),
    /// Single-image latency.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Model config JSON file or preset name (e.g. yolov5s).
    #[arg(long)]
    pub config: String,
    /// Weight archive; seeded random weights when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Letterbox target size; defaults to the config's input size.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DetectFormat {
    /// One JSON record per image.
    Json,
    /// One submission-layout text file per image under --output.
    Widerface,
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Image files or directories (searched recursively for jpg/png).
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Output file (json) or directory (widerface); stdout for json when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub conf: f64,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f32,
    #[arg(long, value_enum, default_value_t = DetectFormat::Json)]
    pub format: DetectFormat,
    /// Directory for annotated copies of the inputs.
    #[arg(long)]
    pub draw: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Ground-truth annotation file.
    #[arg(long)]
    pub gt: PathBuf,
    /// Directory of per-image prediction files.
    #[arg(long, conflicts_with = "images")]
    pub pred: Option<PathBuf>,
    /// Image root for detecting on the fly; ground-truth paths are relative to it.
    #[arg(long, requires = "config")]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 0.02)]
    pub conf: f64,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f32,
    /// Subset lists (`<image> <face index>...`); all faces when omitted.
    #[arg(long)]
    pub easy: Option<PathBuf>,
    #[arg(long)]
    pub medium: Option<PathBuf>,
    #[arg(long)]
    pub hard: Option<PathBuf>,
    /// Report JSON; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// PR points as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InfoFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct InfoArgs {
    #[arg(long, required_unless_present = "reconcile")]
    pub config: Option<String>,
    #[arg(long)]
    pub size: Option<usize>,
    /// Parameter reconciliation for every named model.
    #[arg(long)]
    pub reconcile: bool,
    #[arg(long, value_enum, default_value_t = InfoFormat::Text)]
    pub format: InfoFormat,
    /// Also write the JSON report here.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long)]
    pub output: Option<PathBuf>,
}
