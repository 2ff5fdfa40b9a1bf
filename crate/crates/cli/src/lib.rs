//! The `modgate` command-line tool. Every subcommand loads and validates the full
//! configuration first, then delegates to the core library, and prints one JSON
//! document on stdout. Failures print a JSON error object on stderr.

pub mod commands;
pub mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::ConfigError;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "modgate",
    version,
    about = "Image moderation: synthesis, detection, routing, review and evaluation"
)]
pub struct Cli {
    /// TOML config file. Defaults to ./modgate.toml when present.
    #[arg(long, global = true, env = config::ENV_CONFIG)]
    pub config: Option<PathBuf>,
    /// Root seed for every generator.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Pipeline worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// HTTP bind address for `serve`.
    #[arg(long, global = true)]
    pub bind: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the compliant base catalog.
    GenCorpus,
    /// Generate the procedural logo library.
    GenLogos,
    /// Superimpose logos on catalog images and write an annotated dataset.
    Synth(SynthArgs),
    /// Signature index over the catalog.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Fit a detector model.
    #[command(subcommand)]
    Fit(FitCommand),
    /// Check the routing table and report L2 savings for the current catalog.
    RouteCheck,
    /// Run the pipeline over every pending catalog image.
    Run,
    /// Serve the HTTP API.
    Serve,
    /// Review queue maintenance.
    #[command(subcommand)]
    Review(ReviewCommand),
    /// Compute P/R/F1, ROC and per-category FPR.
    Eval(EvalArgs),
    /// Choose thresholds from scored samples and write a policy file.
    Tune(TuneArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (defaults to paths.dataset).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    Build,
    Query(QueryArgs),
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Catalog image to use as the probe.
    #[arg(long, conflicts_with = "png", required_unless_present = "png")]
    pub image_id: Option<String>,
    /// PNG file to use as the probe.
    #[arg(long)]
    pub png: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Subcommand)]
pub enum FitCommand {
    /// Logistic classifier on signatures of the synthetic dataset.
    Shallow(FitShallowArgs),
}

#[derive(Debug, Args)]
pub struct FitShallowArgs {
    /// Logo class to learn (defaults to the first synth class).
    #[arg(long)]
    pub class: Option<String>,
    /// Also train on reviewer-labeled samples from the review store.
    #[arg(long)]
    pub include_labeled: bool,
    /// Model path (defaults to paths.models/shallow_<class>.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ReviewCommand {
    /// Create review tasks from current verdicts within one budget.
    Select(SelectArgs),
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub floor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON confusion counts: one `{tp, fp, fn}` object or `{rows: [{name, tp, fp, fn}]}`.
    #[arg(long, conflicts_with_all = ["scores", "detector"])]
    pub counts: Option<PathBuf>,
    /// JSONL scored samples, as written by `eval --detector`.
    #[arg(long, conflicts_with = "detector")]
    pub scores: Option<PathBuf>,
    /// Run this configured detector over the synthetic dataset.
    #[arg(long)]
    pub detector: Option<String>,
    /// Image-level threshold (defaults to eval.threshold, then the global t_block).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output directory (defaults to paths.eval).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    MaxF1,
    RecallAtPrecision,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// JSONL scored samples (defaults to paths.eval/scores.jsonl).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::MaxF1)]
    pub objective: ObjectiveArg,
    /// Precision target for recall-at-precision, as a fraction.
    #[arg(long, default_value_t = 1.0)]
    pub precision: f64,
    /// Pairs with fewer positives keep the detector-level threshold.
    #[arg(long, default_value_t = 1)]
    pub min_positives: usize,
    /// Policy output (defaults to paths.eval/policy.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{message}")]
    Failed { kind: &'static str, message: String },
}

impl CliError {
    pub fn failed(kind: &'static str, message: impl std::fmt::Display) -> Self {
        Self::Failed {
            kind,
            message: message.to_string(),
        }
    }

    /// Machine-readable form printed on stderr.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Config(ConfigError::Invalid(v)) => {
                serde_json::json!({ "error": "config", "message": self.to_string(), "violations": v })
            }
            CliError::Config(_) => {
                serde_json::json!({ "error": "config", "message": self.to_string() })
            }
            CliError::Failed { kind, message } => {
                serde_json::json!({ "error": kind, "message": message })
            }
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failed { .. } => 1,
        }
    }
}

macro_rules! failed_from {
    ($($ty:ty => $kind:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::failed($kind, e)
            }
        })*
    };
}

failed_from! {
    modgate_core::catalog::CatalogError => "catalog",
    modgate_core::synthgen::SynthError => "synth",
    modgate_core::signature::SignatureError => "signature",
    modgate_core::detectors::DetectorError => "detector",
    modgate_core::router::RouterError => "router",
    modgate_core::pipeline::PipelineError => "pipeline",
    modgate_core::review::ReviewError => "review",
    modgate_core::evalkit::EvalError => "eval",
    std::io::Error => "io",
    serde_json::Error => "json",
}

/// Loads the configuration from the process environment and runs `cli`.
pub fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let flags = config::FlagOverrides {
        seed: cli.seed,
        workers: cli.workers,
        bind: cli.bind.clone(),
    };
    let cfg = config::RunConfig::load(cli.config.as_deref(), std::env::vars(), &flags)?;
    commands::dispatch(&cfg, cli.command)
}
