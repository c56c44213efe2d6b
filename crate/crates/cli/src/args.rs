use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use clipe_core::evalkit::BaselineKind;
use clipe_core::heads::HeadKind;
use clipe_core::taxonomy::Level;

#[derive(Parser, Debug)]
#[command(
    name = "clipe",
    version,
    about = "Train and evaluate sentiment heads on frozen image/text embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a cross-entropy or contrastive head.
    Train(TrainArgs),
    /// Evaluate a trained head on a labelled embedding set.
    Eval(EvalArgs),
    /// Classify raw embeddings against a prompt bank, no head.
    Zeroshot(ZeroshotArgs),
    /// Random (1/K) or majority-class accuracy.
    Baseline(BaselineArgs),
    /// Write a synthetic labelled embedding set with prompt and caption embeddings.
    Synth(SynthArgs),
    /// Train one contrastive head per caption-type subset and compare them.
    Ablate(AblateArgs),
    /// Run a plan of models against datasets and write a comparison grid.
    Cross(CrossArgs),
    /// Write the prompt list for a taxonomy, ready for text embedding.
    ExpandPrompts(ExpandArgs),
}

#[derive(Args, Debug, Clone)]
pub struct BankArgs {
    /// Prompt bank JSON: [{"prompt", "class", "id"?}, ...].
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Prefix (or .cemb path) of the bank's embeddings, row i for prompt i.
    #[arg(long)]
    pub bank_emb: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    /// Training images (prefix of .cemb/.jsonl).
    #[arg(long)]
    pub train: PathBuf,
    /// Validation images; carved from --train when absent.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 0.15)]
    pub val_fraction: f64,
    /// Image-caption embeddings aligned with --train.
    #[arg(long)]
    pub ic_emb: Option<PathBuf>,
    /// Image-caption embeddings aligned with --val.
    #[arg(long)]
    pub val_ic_emb: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Defaults to 32 for ce and 8 for contrastive.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub lr_factor: f64,
    #[arg(long, default_value_t = 2)]
    pub patience: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_early_stop: bool,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = clipe_core::heads::HIDDEN_UNITS)]
    pub hidden: usize,
    /// Pair every image with all of its captions each epoch.
    #[arg(long)]
    pub pair_all_captions: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value = "contrastive")]
    pub head: HeadKind,
    /// Taxonomy JSON, or `default` for the shipped 2/6/25 hierarchy.
    #[arg(long)]
    pub taxonomy: String,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub bank: BankArgs,
    #[arg(long, default_value = "sc,ic,ssc")]
    pub caption_types: String,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Taxonomy of --data.
    #[arg(long)]
    pub taxonomy: String,
    /// Taxonomy the ce head was trained on; defaults to --taxonomy.
    #[arg(long)]
    pub model_taxonomy: Option<String>,
    #[command(flatten)]
    pub bank: BankArgs,
    /// 2, 6, 25 or a level name; repeatable. All levels when absent.
    #[arg(long)]
    pub level: Vec<Level>,
    /// Dataset name used in reports.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ZeroshotArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub taxonomy: String,
    #[command(flatten)]
    pub bank: BankArgs,
    #[arg(long)]
    pub level: Vec<Level>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(long)]
    pub kind: BaselineKind,
    #[arg(long)]
    pub level: Level,
    #[arg(long, default_value = "default")]
    pub taxonomy: String,
    /// Labelled images; required for the majority baseline.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Use the first N fine classes of the taxonomy.
    #[arg(long, default_value_t = 3, conflicts_with = "class_names")]
    pub classes: usize,
    /// Comma-separated fine classes.
    #[arg(long)]
    pub class_names: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 512)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Class signal inside image-caption embeddings; 0 makes them uninformative.
    #[arg(long, default_value_t = 0.0)]
    pub ic_signal: f64,
    /// Add synonym prompt rows from the taxonomy.
    #[arg(long)]
    pub synonyms: bool,
    #[arg(long, default_value = "default")]
    pub taxonomy: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub taxonomy: String,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Held-out images.
    #[arg(long)]
    pub test: PathBuf,
    #[command(flatten)]
    pub bank: BankArgs,
    /// Caption subset such as `sc,ic`; repeatable. The five standard subsets when absent.
    #[arg(long)]
    pub subset: Vec<String>,
    #[arg(long)]
    pub level: Vec<Level>,
    /// Repeat with seeds seed..seed+N and report mean ± sd.
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    #[arg(long)]
    pub name: Option<String>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CrossArgs {
    /// Plan JSON listing models and datasets; relative paths resolve against its directory.
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExpandArgs {
    #[arg(long, default_value = "default")]
    pub taxonomy: String,
    #[arg(long)]
    pub synonyms: bool,
    /// Pattern with one `{}`; the taxonomy's template when absent.
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}
