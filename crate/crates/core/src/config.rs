//! Flat `key = value` run configuration.
//!
//! Layers apply in order: built-in defaults, `PAAC_SEED`, config file, then
//! individual overrides (command-line flags).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Ablation;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "PAAC_SEED";

/// Every recognised key, in snapshot order.
pub const KEYS: &[&str] = &[
    "lambda1",
    "lambda2",
    "lambda3",
    "gamma",
    "beta",
    "x_ratio",
    "tau",
    "epsilon",
    "layers",
    "lr",
    "dim",
    "batch_size",
    "epochs",
    "seed",
    "normalize_views",
    "reduction",
    "ablation",
    "eval_every",
    "patience",
    "log_every",
    "checkpoint_dir",
    "data",
    "out",
    "k_list",
    "pareto_pct",
    "centroid_cosine",
    "mmd_max_per_group",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Plain item/user InfoNCE with no alignment: λ1 = 0, γ = 0.5, β = 1.
    Simgcl,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simgcl" => Ok(Preset::Simgcl),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Split manifest directory written by `prepare`.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub k_list: Vec<usize>,
    pub pareto_pct: f64,
    /// Report centroid cosine as the headline CS value instead of the
    /// pairwise mean.
    pub centroid_cosine: bool,
    /// Subsample each group to at most this many items for MMD; 0 = all.
    pub mmd_max_per_group: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: None,
            out: None,
            k_list: vec![20],
            pareto_pct: 20.0,
            centroid_cosine: false,
            mmd_max_per_group: 2000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}`"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Defaults with `PAAC_SEED` applied when set.
    pub fn from_env() -> Result<Self> {
        let mut cfg = Self::default();
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.set("seed", seed.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let hp = &mut self.train.hp;
        match key {
            "lambda1" => hp.lambda1 = parse(key, value)?,
            "lambda2" => hp.lambda2 = parse(key, value)?,
            "lambda3" => hp.lambda3 = parse(key, value)?,
            "gamma" => hp.gamma = parse(key, value)?,
            "beta" => hp.beta = parse(key, value)?,
            "x_ratio" | "x" => hp.x_ratio = parse(key, value)?,
            "tau" => hp.tau = parse(key, value)?,
            "epsilon" => hp.epsilon = parse(key, value)?,
            "layers" => hp.layers = parse(key, value)?,
            "lr" => hp.lr = parse(key, value)?,
            "dim" => hp.dim = parse(key, value)?,
            "batch_size" => hp.batch_size = parse(key, value)?,
            "epochs" | "max_epochs" => hp.epochs = parse(key, value)?,
            "seed" => hp.seed = parse(key, value)?,
            "normalize_views" => hp.normalize_views = parse_bool(key, value)?,
            "reduction" => hp.reduction = parse(key, value)?,
            "ablation" => self.train.ablation = parse(key, value)?,
            "eval_every" => self.train.eval_every = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "log_every" => self.train.log_every = parse(key, value)?,
            "checkpoint_dir" => self.train.checkpoint_dir = opt_path(value),
            "data" => self.data = opt_path(value),
            "out" => self.out = opt_path(value),
            "k_list" => {
                let ks = value
                    .split(',')
                    .map(|k| parse::<usize>(key, k.trim()))
                    .collect::<Result<Vec<_>>>()?;
                if ks.is_empty() || ks.contains(&0) {
                    return Err(Error::Config("k_list needs positive values".into()));
                }
                self.k_list = ks;
            }
            "pareto_pct" => self.pareto_pct = parse(key, value)?,
            "centroid_cosine" => self.centroid_cosine = parse_bool(key, value)?,
            "mmd_max_per_group" => self.mmd_max_per_group = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let hp = &self.train.hp;
        Ok(match key {
            "lambda1" => hp.lambda1.to_string(),
            "lambda2" => hp.lambda2.to_string(),
            "lambda3" => hp.lambda3.to_string(),
            "gamma" => hp.gamma.to_string(),
            "beta" => hp.beta.to_string(),
            "x_ratio" => hp.x_ratio.to_string(),
            "tau" => hp.tau.to_string(),
            "epsilon" => hp.epsilon.to_string(),
            "layers" => hp.layers.to_string(),
            "lr" => hp.lr.to_string(),
            "dim" => hp.dim.to_string(),
            "batch_size" => hp.batch_size.to_string(),
            "epochs" => hp.epochs.to_string(),
            "seed" => hp.seed.to_string(),
            "normalize_views" => hp.normalize_views.to_string(),
            "reduction" => hp.reduction.to_string(),
            "ablation" => self.train.ablation.to_string(),
            "eval_every" => self.train.eval_every.to_string(),
            "patience" => self.train.patience.to_string(),
            "log_every" => self.train.log_every.to_string(),
            "checkpoint_dir" => show_path(&self.train.checkpoint_dir),
            "data" => show_path(&self.data),
            "out" => show_path(&self.out),
            "k_list" => self
                .k_list
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "pareto_pct" => self.pareto_pct.to_string(),
            "centroid_cosine" => self.centroid_cosine.to_string(),
            "mmd_max_per_group" => self.mmd_max_per_group.to_string(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        })
    }

    /// Applies `key = value` lines. `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_str(&text)
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::Simgcl => {
                self.train.hp.lambda1 = 0.0;
                self.train.hp.gamma = 0.5;
                self.train.hp.beta = 1.0;
            }
        }
    }

    /// Full snapshot; parsing it onto defaults reproduces `self`.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.pareto_pct > 0.0 && self.pareto_pct < 100.0) {
            return Err(Error::Config("pareto_pct must lie in (0, 100)".into()));
        }
        if self.k_list.is_empty() {
            return Err(Error::Config("k_list is empty".into()));
        }
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        self.train.ablation
    }
}
