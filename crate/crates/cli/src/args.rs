use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "pmfs", version, about = "Polarized multi-scale self-attention segmentation toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Model preset (`tiny-2d`, `basic-3d`, ...) or path to a model TOML.
    #[arg(long, global = true)]
    pub config: Option<String>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Surface-overlap distance threshold in mm.
    #[arg(long, global = true, default_value_t = pmfs_core::metrics::DEFAULT_THETA_MM)]
    pub theta: f64,
    /// Comma-separated per-class loss weights.
    #[arg(long, global = true)]
    pub weights: Option<String>,
    /// Arithmetic for convolutions and matrix products: f64 or f32.
    #[arg(long, global = true, default_value = "f64")]
    pub precision: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer parameter and MAC table, compared with published counts.
    Summarize(SummarizeArgs),
    /// Trains on a dataset manifest; writes checkpoints and an epoch log.
    Train(TrainArgs),
    /// Segmentation metrics of predictions against references.
    Eval(EvalArgs),
    /// Attention-product cost of the block against full self-attention.
    Bench(BenchArgs),
    /// Finite-difference checks of every differentiable component.
    Gradcheck,
    /// Writes a synthetic ellipse/ellipsoid segmentation dataset.
    Gen(GenArgs),
    /// Clips, resamples, normalizes and crops one raw volume.
    Preprocess(PreprocessArgs),
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Spatial input shape for the MAC count, e.g. `160x160x96`.
    #[arg(long)]
    pub input: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Run configuration TOML; flags below override it.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// `adamw` or `rmsprop`.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted masks, matched to `--gt` by file name.
    #[arg(long, conflicts_with_all = ["checkpoint", "manifest"])]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
    /// Predict with this checkpoint (and `--config`) instead of reading masks.
    #[arg(long, requires = "manifest")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub manifest: Option<PathBuf>,
    /// Number of classes including background; inferred when absent.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated bottleneck grids, each doubling the previous.
    #[arg(long, default_value = "8x8,8x16,16x16,16x32")]
    pub sizes: String,
    /// Channels per attention branch.
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 2)]
    pub dims: usize,
    /// Grid extent, e.g. `32x32` or `32x32x16`.
    #[arg(long, default_value = "32x32")]
    pub extent: String,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Foreground step range `lo,hi`.
    #[arg(long, default_value = "0.3,0.6")]
    pub contrast: String,
    #[arg(long)]
    pub no_notches: bool,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Input PMVL volume in HU.
    #[arg(long)]
    pub input: PathBuf,
    /// `linear` or `nearest`.
    #[arg(long, default_value = "linear")]
    pub interp: String,
    /// Crop/pad target such as `160x160x96`, or `none`. Defaults to the
    /// standard 3D crop for volumes and none otherwise.
    #[arg(long)]
    pub crop: Option<String>,
}
