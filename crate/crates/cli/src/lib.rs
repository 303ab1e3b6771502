//! `dial`: runs each pipeline stage from files to files.
//!
//! Stages: `gen-world`, `ingest`, `augment {sentence|word|gaussian}`,
//! `train-fusion`, `relabel`, `eval-relabels`, `eval-policy`, `serve`, plus
//! `pipeline`, which runs them all into one directory.

pub mod artifact;
pub mod config;
pub mod encoder;
pub mod stages;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use config::{Method, PipelineConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing {artifact} at {}; run `dial {producer}` first", path.display())]
    Dependency { artifact: &'static str, path: PathBuf, producer: &'static str },
    #[error("{artifact} at {} changed after its stage wrote it; rerun that stage", path.display())]
    Stale { artifact: &'static str, path: PathBuf },
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Dependency { .. } | Self::Stale { .. } => 3,
            Self::Config(_) => 2,
            Self::Stage { .. } | Self::Io { .. } => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dial", version, about = "Instruction augmentation pipeline for robot episode datasets")]
pub struct Cli {
    /// TOML file supplying defaults for every stage.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world: frames, manifests, ground truth, eval set and generator file.
    GenWorld(GenWorldArgs),
    /// Normalize and split an annotated manifest into partitions A and B.
    Ingest(IngestArgs),
    #[command(subcommand)]
    Augment(AugmentCommand),
    /// Fine-tune the fusion head on partition A.
    TrainFusion(TrainFusionArgs),
    /// Relabel partition B with candidates from one or more pools.
    Relabel(RelabelArgs),
    /// Per-rank accuracy of a relabeled dataset against ground truth.
    EvalRelabels(EvalRelabelsArgs),
    /// Train and score proxy policies on data recipes.
    EvalPolicy(EvalPolicyArgs),
    /// Run the annotation and rating service.
    Serve(ServeArgs),
    /// Run every stage into one directory.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Debug, Default, Args)]
pub struct EncoderArgs {
    /// Use the remote encoder at this base URL.
    #[arg(long)]
    pub encoder_url: Option<String>,
    #[arg(long)]
    pub dims: Option<usize>,
    /// Remote encoder cache file.
    #[arg(long)]
    pub embed_cache: Option<PathBuf>,
    /// Directory that frame references resolve against; defaults to the input manifest's directory.
    #[arg(long)]
    pub assets_root: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct GenWorldArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub eval_per_category: Option<usize>,
    /// Repeat this many fully specified tasks.
    #[arg(long)]
    pub distinct_tasks: Option<usize>,
    #[arg(long)]
    pub proposals_per_command: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub annotated: PathBuf,
    #[arg(long)]
    pub structured: PathBuf,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub out_a: PathBuf,
    #[arg(long)]
    pub out_b: PathBuf,
}

#[derive(Clone, Debug, Subcommand)]
pub enum AugmentCommand {
    /// Whole-sentence rewrites from a generator.
    Sentence(SentenceArgs),
    /// Word-level synonym substitution.
    Word(WordArgs),
    /// Gaussian noise on instruction embeddings.
    Gaussian(GaussianArgs),
}

#[derive(Clone, Debug, Args)]
pub struct SentenceArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON object: instruction → variants.
    #[arg(long, conflicts_with = "generator_url")]
    pub canned: Option<PathBuf>,
    #[arg(long)]
    pub generator_url: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct WordArgs {
    #[arg(long = "in", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub variants: Option<usize>,
    /// Synonym map JSON; the built-in map otherwise.
    #[arg(long)]
    pub map: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct GaussianArgs {
    #[arg(long = "in", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub copies: Option<usize>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
}

#[derive(Clone, Debug, Args)]
pub struct TrainFusionArgs {
    #[arg(long)]
    pub dataset_a: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training curve and selected step as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
}

#[derive(Clone, Debug, Args)]
pub struct RelabelArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Candidate source: a manifest or an instruction-record file. Repeatable.
    #[arg(long, required = true)]
    pub pool: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    /// Softmax temperature; the checkpoint's learned value otherwise.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
}

#[derive(Clone, Debug, Args)]
pub struct EvalRelabelsArgs {
    #[arg(long)]
    pub relabels: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    #[default]
    Downstream,
    Planted,
}

#[derive(Clone, Debug, Args)]
pub struct EvalPolicyArgs {
    /// Seeds to average over; the global seed otherwise.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Self-contained experiment, used when no --arm is given.
    #[arg(long, value_enum, default_value_t)]
    pub experiment: Experiment,
    /// `NAME=PATH[,PATH...]`: manifests (and embedding stores) forming one training recipe.
    #[arg(long)]
    pub arm: Vec<String>,
    #[arg(long, requires = "arm")]
    pub truth: Option<PathBuf>,
    #[arg(long, requires = "arm")]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
}

#[derive(Clone, Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub quota: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub distinct_tasks: Option<usize>,
    /// Share of episodes kept as annotated partition A.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
}

/// Resolved global settings shared by every stage.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: PipelineConfig,
    pub seed: u64,
}

impl Context {
    pub fn new(config: PipelineConfig, seed: Option<u64>) -> Self {
        let seed = seed.or(config.seed).unwrap_or(0);
        Self { config, seed }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = PipelineConfig::load(cli.config.as_deref())?;
    let ctx = Context::new(config, cli.seed);
    match &cli.command {
        Command::GenWorld(a) => stages::gen_world(&ctx, a).map(drop),
        Command::Ingest(a) => stages::ingest(&ctx, a),
        Command::Augment(c) => stages::augment(&ctx, c),
        Command::TrainFusion(a) => stages::train_fusion(&ctx, a),
        Command::Relabel(a) => stages::relabel(&ctx, a),
        Command::EvalRelabels(a) => stages::eval_relabels(&ctx, a),
        Command::EvalPolicy(a) => stages::eval_policy(&ctx, a),
        Command::Serve(a) => stages::serve(&ctx, a),
        Command::Pipeline(a) => stages::pipeline(&ctx, a),
    }
}
