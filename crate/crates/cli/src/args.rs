use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use xmatch::emb_store::SynthConfig;
use xmatch::trainer::HyperParams;

fn hp() -> HyperParams {
    HyperParams::default()
}

fn synth() -> SynthConfig {
    SynthConfig::default()
}

#[derive(Debug, Parser)]
#[command(name = "xmatch", version, about = "Cross-modal identity association: mine, train, evaluate")]
#[command(after_help = "Set XMATCH_THREADS to cap the number of worker threads.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known identities.
    Synth(SynthArgs),
    /// Train the adapters and write a checkpoint plus a report.
    Train(TrainArgs),
    /// Score retrieval for a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Dump mined candidate sets and their association precision.
    Mine(MineArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = synth().identities)]
    pub identities: usize,
    /// Images per identity (also texts unless --per-id-texts is given).
    #[arg(long, default_value_t = synth().per_id_images)]
    pub per_id: usize,
    #[arg(long)]
    pub per_id_texts: Option<usize>,
    #[arg(long, default_value_t = synth().dim)]
    pub dim: usize,
    /// Expected norm of the per-sample isotropic noise.
    #[arg(long, default_value_t = synth().sigma)]
    pub sigma: f64,
    #[arg(long, default_value_t = synth().seed)]
    pub seed: u64,
    /// Norm of the fixed per-modality offset.
    #[arg(long, default_value_t = synth().modality_offset)]
    pub modality_offset: f64,
    #[arg(long, default_value_t = synth().nuisance_rank)]
    pub nuisance_rank: usize,
    #[arg(long, default_value_t = synth().nuisance_scale)]
    pub nuisance_scale: f64,
    #[arg(long, default_value_t = synth().max_centroid_cosine)]
    pub max_centroid_cosine: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a split of fresh identities drawn from the same modality model.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
}

/// Every hyperparameter as a flag. Values given on the command line win over
/// the config file, which wins over the defaults shown here.
#[derive(Debug, Args)]
pub struct HyperArgs {
    /// Softmax temperature.
    #[arg(long, default_value_t = hp().tau)]
    pub tau: f64,
    /// Similarity threshold for relation mining.
    #[arg(long, default_value_t = hp().th)]
    pub th: f64,
    /// Weight of mined relations in the soft targets.
    #[arg(long, default_value_t = hp().lambda)]
    pub lambda: f64,
    /// Memory-bank momentum.
    #[arg(long, default_value_t = hp().alpha)]
    pub alpha: f64,
    /// Neighbours mined per anchor.
    #[arg(long, default_value_t = hp().k)]
    pub k: usize,
    #[arg(long, default_value_t = hp().eps)]
    pub eps: f64,
    /// Masking ratio of the asymmetric views.
    #[arg(long, default_value_t = hp().rho)]
    pub rho: f64,
    #[arg(long, default_value_t = hp().jitter_sigma)]
    pub jitter_sigma: f64,
    #[arg(long, default_value_t = hp().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = hp().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = hp().lr_start)]
    pub lr_start: f64,
    #[arg(long, default_value_t = hp().lr_peak)]
    pub lr_peak: f64,
    #[arg(long, default_value_t = hp().warmup_epochs)]
    pub warmup_epochs: usize,
    #[arg(long, default_value_t = hp().beta1)]
    pub beta1: f64,
    #[arg(long, default_value_t = hp().beta2)]
    pub beta2: f64,
    #[arg(long, default_value_t = hp().eps_opt)]
    pub eps_opt: f64,
    #[arg(long, default_value_t = hp().weight_decay)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = hp().seed)]
    pub seed: u64,
    /// Modules to switch off, comma separated: itc, lrc, gsrc, iascl [default: none]
    #[arg(long)]
    pub ablate: Option<String>,
    #[arg(long, default_value = "exclude_self", value_parser = ["exclude_self", "include_self"])]
    pub confidence_denominator: String,
    /// Which side of the consistency pair is perturbed.
    #[arg(long, default_value = "both", value_parser = ["both", "text_only", "image_only"])]
    pub asymmetry: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (images.emb, texts.emb, labels.lbl, manifest.json).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Separate dataset for the baseline and final metrics.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// JSON run configuration; see the README for its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "checkpoint")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "reports")]
    pub report_dir: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false, args = ["checkpoint", "identity_adapter"])]
pub struct SourceArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use untrained identity adapters instead of a checkpoint.
    #[arg(long)]
    pub identity_adapter: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Mining neighbours for the precision column [default: checkpoint value]
    #[arg(long)]
    pub k: Option<usize>,
    /// Mining threshold for the precision column [default: checkpoint value]
    #[arg(long)]
    pub th: Option<f64>,
    #[arg(long, default_value = "reports")]
    pub report_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Mine against the checkpoint's stored image bank instead of fresh features.
    #[arg(long)]
    pub from_bank: bool,
    /// [default: checkpoint value]
    #[arg(long)]
    pub k: Option<usize>,
    /// [default: checkpoint value]
    #[arg(long)]
    pub th: Option<f64>,
    #[arg(long, default_value = "reports")]
    pub report_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random instances per loss.
    #[arg(long, default_value_t = 20)]
    pub instances: u64,
    /// Seed of the first instance; later ones count up from here.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "itc,rc_b,rc_g,rc_h,total")]
    pub losses: String,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = xmatch::trainer::gradcheck::FD_STEP)]
    pub step: f64,
    /// Temperature of the random instances.
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long, default_value_t = 6)]
    pub batch: usize,
    #[arg(long, default_value_t = 12)]
    pub dim: usize,
}
