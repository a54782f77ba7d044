use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "paac", version, about = "Popularity-aware alignment and contrast for recommendation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter raw interactions, build the split and write the manifest.
    Prepare(PrepareArgs),
    /// Train a model on a prepared split.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate every cell of a hyperparameter grid.
    Sweep(SweepArgs),
    /// Print statistics of a prepared split.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Raw interaction file; repeat to concatenate several (e.g. a
    /// published train and test file).
    #[arg(long, required_unless_present = "synthetic")]
    pub input: Vec<PathBuf>,
    /// Generate the built-in power-law dataset instead of reading a file.
    #[arg(long, conflicts_with = "input")]
    pub synthetic: bool,
    /// `tsv`, `csv` (`user,item` rows) or `adj` (`user item item ...` rows).
    #[arg(long, default_value = "tsv")]
    pub format: String,
    #[arg(long, default_value_t = 10)]
    pub k_core: usize,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Split seed; falls back to PAAC_SEED, then 2024.
    #[arg(long, env = "PAAC_SEED", default_value_t = 2024)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Every run-config key as a flag. Values go through the same parser as the
/// config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset applied after the config file (`simgcl`).
    #[arg(long)]
    pub preset: Option<String>,
    /// Generic override, repeatable: `--set key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    #[arg(long)]
    pub lambda1: Option<String>,
    #[arg(long)]
    pub lambda2: Option<String>,
    #[arg(long)]
    pub lambda3: Option<String>,
    #[arg(long)]
    pub gamma: Option<String>,
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub x_ratio: Option<String>,
    #[arg(long)]
    pub tau: Option<String>,
    #[arg(long)]
    pub epsilon: Option<String>,
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub dim: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long, alias = "max-epochs")]
    pub epochs: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub normalize_views: Option<String>,
    #[arg(long)]
    pub reduction: Option<String>,
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub eval_every: Option<String>,
    #[arg(long)]
    pub patience: Option<String>,
    #[arg(long)]
    pub log_every: Option<String>,
    #[arg(long)]
    pub checkpoint_dir: Option<String>,
    /// Prepared split directory.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    /// Comma-separated cutoffs, e.g. `20,50`.
    #[arg(long, alias = "k")]
    pub k_list: Option<String>,
    #[arg(long)]
    pub pareto_pct: Option<String>,
    #[arg(long)]
    pub centroid_cosine: Option<String>,
    #[arg(long)]
    pub mmd_max_per_group: Option<String>,
}

impl ConfigArgs {
    /// Flag overrides as `(key, value)` pairs, `--set` entries first so a
    /// dedicated flag wins over a generic one.
    pub fn overrides(&self) -> anyhow::Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("lambda1", &self.lambda1),
            ("lambda2", &self.lambda2),
            ("lambda3", &self.lambda3),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("x_ratio", &self.x_ratio),
            ("tau", &self.tau),
            ("epsilon", &self.epsilon),
            ("layers", &self.layers),
            ("lr", &self.lr),
            ("dim", &self.dim),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("normalize_views", &self.normalize_views),
            ("reduction", &self.reduction),
            ("ablation", &self.ablation),
            ("eval_every", &self.eval_every),
            ("patience", &self.patience),
            ("log_every", &self.log_every),
            ("checkpoint_dir", &self.checkpoint_dir),
            ("data", &self.data),
            ("out", &self.out),
            ("k_list", &self.k_list),
            ("pareto_pct", &self.pareto_pct),
            ("centroid_cosine", &self.centroid_cosine),
            ("mmd_max_per_group", &self.mmd_max_per_group),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `test` or `valid`.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Run config; defaults to `config.resolved` beside the checkpoint.
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Grid as `key=v1,v2;key=v1,...`, e.g. `lambda1=1,10;lambda2=1,5`.
    #[arg(long)]
    pub grid: String,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Prepared split directory.
    #[arg(long)]
    pub data: PathBuf,
}
