use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Unified contextual ranker for search and recommendations.
#[derive(Debug, Parser)]
#[command(name = "unirank", version)]
pub struct Cli {
    /// Every relative path is resolved against this directory.
    #[arg(long, global = true, default_value = ".")]
    pub work_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world and a mixed-task engagement log.
    Datagen(DatagenArgs),
    /// Generate the small curated demo world.
    DemoData(DemoDataArgs),
    /// Build vocabularies and count tables from a log.
    BuildFeatures(BuildFeaturesArgs),
    /// Train a unified or specialist ranker.
    Train(TrainArgs),
    /// Build personalization artifacts or run the personalization ladder.
    #[command(subcommand)]
    Personalize(PersonalizeCommand),
    /// Evaluate a checkpoint on the held-out tail of a log.
    Eval(EvalArgs),
    /// Unified model against per-task specialists over several seeds.
    Compare(ExperimentArgs),
    /// Full model against each single-enabler ablation over several seeds.
    Ablate(ExperimentArgs),
    /// Run the HTTP ranking service.
    Serve(ServeArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DatagenArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub users: Option<usize>,
    /// Requests per task as `search,more_like_this,pre_query`.
    #[arg(long, value_parser = parse_task_counts)]
    pub events_per_task: Option<[usize; 3]>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub neg_ratio: Option<usize>,
    #[arg(long, default_value = "data")]
    pub out_dir: PathBuf,
}

fn parse_task_counts(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|v: Vec<usize>| format!("expected three counts, got {}", v.len()))
}

#[derive(Debug, Args, Serialize)]
pub struct DemoDataArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value = "demo")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildFeaturesArgs {
    #[arg(long, default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "features")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub no_imputation: bool,
    #[arg(long)]
    pub no_task_feature: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value = "data")]
    pub data_dir: PathBuf,
    /// Checkpoint directory.
    #[arg(long, default_value = "model")]
    pub out: PathBuf,
    /// Train a specialist on one task (query_search, more_like_this, pre_query).
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub no_task_feature: bool,
    #[arg(long)]
    pub no_imputation: bool,
    #[arg(long)]
    pub no_crossing: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Personalization mode (none, cluster, repr-features, repr-finetune).
    /// Without it the user id is a plain feature.
    #[arg(long)]
    pub mode: Option<String>,
    /// Directory holding clusters.json and repr.bin.
    #[arg(long, default_value = "personalization")]
    pub artifacts_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum PersonalizeCommand {
    /// Cluster users by their engagement profiles.
    BuildClusters(ClusterArgs),
    /// Pretrain user and item representations by matrix factorization.
    Pretrain(PretrainArgs),
    /// Train one model per personalization mode over several seeds.
    Ladder(ExperimentArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    #[arg(long, default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "personalization")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[arg(long, default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "personalization")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "model")]
    pub checkpoint: PathBuf,
    /// Report path; defaults to eval_report.json inside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExperimentArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Clusters for the ladder.
    #[arg(long)]
    pub k: Option<usize>,
    /// Table path; defaults to `<command>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    /// Directory holding catalog.jsonl.
    #[arg(long, default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Refuse checkpoints trained for any other mode.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = 10_000)]
    pub cache_size: usize,
    #[arg(long, default_value_t = 300)]
    pub cache_ttl_secs: u64,
    #[arg(long, default_value_t = 500)]
    pub max_candidates: usize,
    /// Static console bundle to serve under /console.
    #[arg(long)]
    pub console_dir: Option<PathBuf>,
}
