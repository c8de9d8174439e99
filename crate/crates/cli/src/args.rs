use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "semiconv",
    version,
    about = "Semi-convolutional embedding experiments",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// 1D coloring dilemma: conv collision spread and the semi-conv solution.
    Dilemma(DilemmaArgs),
    /// Generate a dot-grid scene.
    SynthGen(SynthGenArgs),
    /// Train embeddings on a scene.
    Train(TrainArgs),
    /// Cluster a trained run's embeddings with k-means and score them.
    Cluster(ClusterArgs),
    /// Train seed-based mask extraction on instance boxes.
    Seedcut(SeedcutArgs),
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Draw the learned displacement field of a semi-conv run.
    RenderArrows(RenderArrowsArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Dilemma(_) => "dilemma",
            Command::SynthGen(_) => "synth-gen",
            Command::Train(_) => "train",
            Command::Cluster(_) => "cluster",
            Command::Seedcut(_) => "seedcut",
            Command::Gradcheck(_) => "gradcheck",
            Command::RenderArrows(_) => "render-arrows",
        }
    }
}

/// Options every subcommand takes.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Common {
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file or directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file whose keys override the flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Write the run manifest here instead of stdout.
    #[arg(long)]
    #[serde(skip)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Conv,
    Semiconv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    Sgd,
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingArg {
    Zero,
    Circular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedModeArg {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DilemmaArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Signal covers [-L, L]; a positive multiple of 2.
    #[arg(long, default_value_t = 4.0)]
    pub half_extent: f64,
    /// Grid spacing; must divide 2.
    #[arg(long, default_value_t = 0.25)]
    pub step: f64,
    /// Number of random conv stacks probed.
    #[arg(long, default_value_t = 5)]
    pub stacks: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SceneArgs {
    #[arg(long, default_value_t = 4)]
    pub rows: usize,
    #[arg(long, default_value_t = 4)]
    pub cols: usize,
    #[arg(long, default_value_t = 3)]
    pub radius: usize,
    #[arg(long, default_value_t = 32)]
    pub spacing: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthGenArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub scene: SceneArgs,
    /// Also render the ground-truth labeling as PPM.
    #[arg(long)]
    pub render: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainingArgs {
    /// Scene JSON; a default scene is generated from --seed when absent.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Semiconv)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::SgdMomentum)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Embedding dimension.
    #[arg(long, default_value_t = 8)]
    pub dims: usize,
    #[arg(long, value_enum, default_value_t = PaddingArg::Circular)]
    pub padding: PaddingArg,
    /// Treat the background as one more segment of the loss.
    #[arg(long)]
    pub include_background: bool,
    /// Multiplier on gradients leaving the embedding head.
    #[arg(long, default_value_t = 1.0)]
    pub grad_scale: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ClusterArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Directory written by `train`.
    #[arg(long, default_value = "run")]
    pub run: PathBuf,
    /// Embedding mode; defaults to the one the run was trained with.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Number of clusters; defaults to the true instance count.
    #[arg(long)]
    pub k: Option<usize>,
    /// Render the clusters as PPM.
    #[arg(long)]
    pub render: Option<PathBuf>,
    /// Also score on a scene regenerated with this seed.
    #[arg(long)]
    pub heldout_seed: Option<u64>,
    /// Pixel noise of the held-out scene.
    #[arg(long, default_value_t = 0.05)]
    pub heldout_noise: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SeedcutArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub training: TrainingArgs,
    /// Boxes JSON, a list of {x0, y0, x1, y1}; instance boxes when absent.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    /// Margin around generated instance boxes.
    #[arg(long, default_value_t = 2)]
    pub box_pad: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_init: f64,
    /// Keep sigma fixed at --sigma-init.
    #[arg(long)]
    pub fixed_sigma: bool,
    /// Weight of the kernel cross-entropy term.
    #[arg(long, default_value_t = 1.0)]
    pub bce_weight: f64,
    /// Mask threshold on sigmoid of the fused score.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Seed selection when cutting masks.
    #[arg(long, value_enum, default_value_t = SeedModeArg::Hard)]
    pub seed_mode: SeedModeArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Random instances per op.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RenderArrowsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Directory written by `train`.
    #[arg(long, default_value = "run")]
    pub run: PathBuf,
    /// Draw an arrow every `stride` pixels.
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
}
