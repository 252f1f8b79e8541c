use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Multimodal meme classification: synthetic data, training, evaluation
/// and gradient checks.
///
/// Every flag can also be set through an environment variable named
/// `COFUSION_<FLAG>` (upper case, dashes as underscores); flags given on the
/// command line win.
///
/// Exit codes: 0 success, 1 usage error, 2 data or I/O error,
/// 3 numerical abort or failed gradient check.
#[derive(Debug, Parser)]
#[command(name = "cofusion", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset and write train/val/test manifests.
    Synth(SynthArgs),
    /// Train a model and write the best checkpoint and its history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients at small dims.
    Gradcheck(GradcheckArgs),
    /// Collect run directories into comparison, heatmap and curve tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long, env = "COFUSION_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "COFUSION_SEED", default_value_t = 42)]
    pub seed: u64,
    /// One count for every class, or three comma-separated counts.
    #[arg(long, env = "COFUSION_SAMPLES_PER_CLASS", value_delimiter = ',', default_value = "600")]
    pub samples_per_class: Vec<usize>,
    /// Fraction of samples whose label is only recoverable from both modalities.
    #[arg(long, env = "COFUSION_JOINT_SIGNAL", default_value_t = 0.7)]
    pub joint_signal: f64,
    /// Fraction of samples whose features follow a random class.
    #[arg(long, env = "COFUSION_LABEL_NOISE", default_value_t = 0.05)]
    pub label_noise: f64,
    /// Share of class-cue samples that carry the cue in one modality only.
    #[arg(long, env = "COFUSION_SINGLE_MODALITY_SHARE", default_value_t = 1.0)]
    pub single_modality_share: f64,
    #[arg(long, env = "COFUSION_TEXT_DIM", default_value_t = 16)]
    pub text_dim: usize,
    #[arg(long, env = "COFUSION_IMAGE_DIM", default_value_t = 16)]
    pub image_dim: usize,
    #[arg(long, env = "COFUSION_TEXT_LEN", default_value_t = 8)]
    pub text_len: usize,
    #[arg(long, env = "COFUSION_IMAGE_LEN", default_value_t = 8)]
    pub image_len: usize,
    #[arg(long, env = "COFUSION_NOISE_STD", default_value_t = 0.5)]
    pub noise_std: f64,
    #[arg(long, env = "COFUSION_JOINT_LEAK", default_value_t = 0.1)]
    pub joint_leak: f64,
    /// Tokens per sequence carrying the joint cue (0 = all).
    #[arg(long, env = "COFUSION_JOINT_TOKENS", default_value_t = 4)]
    pub joint_tokens: usize,
    /// Train, validation and test fractions.
    #[arg(long, env = "COFUSION_SPLIT", value_delimiter = ',', num_args = 3, default_value = "0.7,0.15,0.15")]
    pub split: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TextEncoderKind {
    /// Precomputed feature sequences from the manifest.
    Features,
    /// Word embeddings learned from the manifest text.
    Tokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageEncoderKind {
    /// Precomputed feature sequences from the manifest.
    Features,
    /// Linear patch embedding of the raw image.
    Patches,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// One of early, late, clip_style, cross_t2i, cross_i2t, mcfm, text_only, image_only.
    #[arg(long, env = "COFUSION_STRATEGY", default_value = "mcfm")]
    pub strategy: String,
    /// Shared model dimension.
    #[arg(long, env = "COFUSION_DIM", default_value_t = 64)]
    pub dim: usize,
    #[arg(long, env = "COFUSION_HEADS", default_value_t = 8)]
    pub heads: usize,
    /// Hidden width of the 2-layer GELU fusion MLP.
    #[arg(long, env = "COFUSION_MLP_HIDDEN", default_value_t = 64)]
    pub mlp_hidden: usize,
    /// Dropout before the classification head.
    #[arg(long, env = "COFUSION_DROPOUT", default_value_t = 0.5)]
    pub dropout: f64,
    /// Stacked attention layers.
    #[arg(long, env = "COFUSION_DEPTH", default_value_t = 1)]
    pub depth: usize,
    /// How late fusion combines its two classifiers: mean, logit_mean or max.
    #[arg(long, env = "COFUSION_LATE_COMBINE", default_value = "mean")]
    pub late_combine: String,
    /// Keep the input encoders fixed at their initialization.
    #[arg(long, env = "COFUSION_FREEZE_ENCODERS")]
    pub freeze_encoders: bool,
    #[arg(long, env = "COFUSION_TEXT_ENCODER", value_enum, default_value_t = TextEncoderKind::Features)]
    pub text_encoder: TextEncoderKind,
    #[arg(long, env = "COFUSION_IMAGE_ENCODER", value_enum, default_value_t = ImageEncoderKind::Features)]
    pub image_encoder: ImageEncoderKind,
    /// Word embedding width for token text input.
    #[arg(long, env = "COFUSION_EMBED_DIM", default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, env = "COFUSION_MAX_TOKENS", default_value_t = 64)]
    pub max_tokens: usize,
    /// Minimum word count for the token vocabulary.
    #[arg(long, env = "COFUSION_MIN_COUNT", default_value_t = 1)]
    pub min_count: usize,
    #[arg(long, env = "COFUSION_PATCH", default_value_t = 16)]
    pub patch: usize,
    #[arg(long, env = "COFUSION_IMAGE_SIZE", default_value_t = 224)]
    pub image_size: usize,
    #[arg(long, env = "COFUSION_CHANNELS", default_value_t = 3)]
    pub channels: usize,
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    /// AdamW learning rate.
    #[arg(long, env = "COFUSION_LR", default_value_t = 2e-5)]
    pub lr: f64,
    #[arg(long, env = "COFUSION_WEIGHT_DECAY", default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, env = "COFUSION_MICRO_BATCH", default_value_t = 4)]
    pub micro_batch: usize,
    /// Micro-batches per optimizer step (effective batch = micro-batch x this).
    #[arg(long, env = "COFUSION_ACCUMULATION", default_value_t = 2)]
    pub accumulation: usize,
    /// Fraction of all optimizer steps spent in linear warmup.
    #[arg(long, env = "COFUSION_WARMUP", default_value_t = 0.1)]
    pub warmup: f64,
    /// After warmup: linear (decay to zero) or constant.
    #[arg(long, env = "COFUSION_SCHEDULE", default_value = "linear")]
    pub schedule: String,
    #[arg(long, env = "COFUSION_MAX_EPOCHS", default_value_t = 200)]
    pub max_epochs: usize,
    /// Epochs without validation macro-F1 improvement before stopping.
    #[arg(long, env = "COFUSION_PATIENCE", default_value_t = 5)]
    pub patience: usize,
    /// Global gradient-norm clip.
    #[arg(long, env = "COFUSION_CLIP", default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, env = "COFUSION_BETA1", default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, env = "COFUSION_BETA2", default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, env = "COFUSION_ADAM_EPS", default_value_t = 1e-8)]
    pub adam_eps: f64,
    /// Focal loss scale.
    #[arg(long, env = "COFUSION_ALPHA", default_value_t = 1.0)]
    pub alpha: f64,
    /// Focal loss focusing exponent.
    #[arg(long, env = "COFUSION_GAMMA", default_value_t = 2.0)]
    pub gamma: f64,
    /// Label smoothing.
    #[arg(long, env = "COFUSION_SMOOTHING", default_value_t = 0.1)]
    pub smoothing: f64,
    /// Disable inverse-frequency class weights.
    #[arg(long, env = "COFUSION_NO_CLASS_WEIGHTS")]
    pub no_class_weights: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long, env = "COFUSION_TRAIN")]
    pub train: PathBuf,
    /// Validation manifest used for early stopping.
    #[arg(long, env = "COFUSION_VAL")]
    pub val: PathBuf,
    /// Output directory for checkpoint.txt, history.csv and lr.csv.
    #[arg(long, env = "COFUSION_OUT")]
    pub out: PathBuf,
    /// Seed for initialization, shuffling and dropout.
    #[arg(long, env = "COFUSION_SEED", default_value_t = 42)]
    pub seed: u64,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "COFUSION_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "COFUSION_MANIFEST")]
    pub manifest: PathBuf,
    /// Output directory for report.txt, confusion.csv and predictions.csv.
    #[arg(long, env = "COFUSION_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// A strategy name, or `all`.
    #[arg(long, env = "COFUSION_STRATEGY", default_value = "all")]
    pub strategy: String,
    #[arg(long, env = "COFUSION_DIM", default_value_t = 8)]
    pub dim: usize,
    #[arg(long, env = "COFUSION_HEADS", default_value_t = 2)]
    pub heads: usize,
    #[arg(long, env = "COFUSION_MLP_HIDDEN", default_value_t = 8)]
    pub mlp_hidden: usize,
    #[arg(long, env = "COFUSION_DEPTH", default_value_t = 1)]
    pub depth: usize,
    #[arg(long, env = "COFUSION_TEXT_DIM", default_value_t = 5)]
    pub text_dim: usize,
    #[arg(long, env = "COFUSION_IMAGE_DIM", default_value_t = 6)]
    pub image_dim: usize,
    /// Sequence length of the random probe inputs.
    #[arg(long, env = "COFUSION_SEQ_LEN", default_value_t = 3)]
    pub seq_len: usize,
    /// Number of random probe samples.
    #[arg(long, env = "COFUSION_SAMPLES", default_value_t = 2)]
    pub samples: usize,
    #[arg(long, env = "COFUSION_SEED", default_value_t = 42)]
    pub seed: u64,
    /// Maximum accepted relative error.
    #[arg(long, env = "COFUSION_TOLERANCE", default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Finite-difference step.
    #[arg(long, env = "COFUSION_STEP", default_value_t = 1e-5)]
    pub step: f64,
    /// Check in training mode with dropout masks replayed from this seed.
    #[arg(long, env = "COFUSION_DROPOUT_SEED")]
    pub dropout_seed: Option<u64>,
    /// Debug: add an error to one analytic gradient of the named parameter.
    #[arg(long, env = "COFUSION_CORRUPT")]
    pub corrupt: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, each holding report.txt and optionally history.csv
    /// and checkpoint.txt.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Output directory for comparison.csv, curves.csv and heatmap_<run>.csv.
    #[arg(long, env = "COFUSION_OUT")]
    pub out: PathBuf,
}
