//! Split manifests: `train.txt`, `valid.txt`, `test.txt` with one
//! `user_index item_index` pair per line, `users.txt` / `items.txt` holding
//! the original key of each index, and `stats.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{gini_coefficient, IdMap, InteractionDataset, PopularityIndex};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    #[serde(rename = "M")]
    pub num_users: usize,
    #[serde(rename = "N")]
    pub num_items: usize,
    pub interactions: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Per-item test quota; absent for manifests built elsewhere.
    pub c: Option<usize>,
    /// Gini of training popularity.
    pub gini: f64,
    /// Gini over all filtered interactions (before splitting).
    pub gini_full: f64,
    pub max: u64,
    pub min: u64,
    pub mean: f64,
}

impl SplitStats {
    pub fn compute(dataset: &InteractionDataset, popularity: &PopularityIndex) -> Self {
        Self {
            num_users: dataset.num_users(),
            num_items: dataset.num_items(),
            interactions: dataset.num_interactions(),
            train: dataset.train().len(),
            valid: dataset.validation().len(),
            test: dataset.test().len(),
            c: dataset.test_quota(),
            gini: popularity.gini(),
            gini_full: gini_coefficient(&dataset.item_counts_all()),
            max: popularity.max_count(),
            min: popularity.min_count(),
            mean: popularity.mean_count(),
        }
    }
}

fn pairs_text(pairs: &[(u32, u32)]) -> String {
    let mut s = String::with_capacity(pairs.len() * 12);
    for (u, i) in pairs {
        let _ = writeln!(s, "{u} {i}");
    }
    s
}

fn keys_text(ids: &IdMap) -> String {
    let mut s = String::new();
    for k in ids.keys() {
        s.push_str(k);
        s.push('\n');
    }
    s
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_split_manifest(dataset: &InteractionDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("train.txt"), &pairs_text(dataset.train()))?;
    write(&dir.join("valid.txt"), &pairs_text(dataset.validation()))?;
    write(&dir.join("test.txt"), &pairs_text(dataset.test()))?;
    write(&dir.join("users.txt"), &keys_text(dataset.user_ids()))?;
    write(&dir.join("items.txt"), &keys_text(dataset.item_ids()))?;
    Ok(())
}

pub fn write_stats(stats: &SplitStats, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut json = serde_json::to_string_pretty(stats).map_err(|e| Error::Format(e.to_string()))?;
    json.push('\n');
    write(path, &json)
}

fn read_pairs(path: &Path) -> Result<Vec<(u32, u32)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<u32>);
        match (it.next(), it.next()) {
            (Some(Ok(u)), Some(Ok(i))) => out.push((u, i)),
            _ => {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("expected `user item` indices in {}", path.display()),
                })
            }
        }
    }
    Ok(out)
}

fn read_keys(path: &Path) -> Result<Option<IdMap>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    IdMap::from_keys(text.lines().map(str::to_owned).collect()).map(Some)
}

pub fn read_split_manifest(dir: impl AsRef<Path>) -> Result<InteractionDataset> {
    let dir = dir.as_ref();
    let train = read_pairs(&dir.join("train.txt"))?;
    let validation = read_pairs(&dir.join("valid.txt"))?;
    let test = read_pairs(&dir.join("test.txt"))?;
    let users = read_keys(&dir.join("users.txt"))?;
    let items = read_keys(&dir.join("items.txt"))?;
    let all = || train.iter().chain(&validation).chain(&test);
    let num_users = users
        .as_ref()
        .map_or_else(|| all().map(|p| p.0 as usize + 1).max().unwrap_or(0), IdMap::len);
    let num_items = items
        .as_ref()
        .map_or_else(|| all().map(|p| p.1 as usize + 1).max().unwrap_or(0), IdMap::len);
    let quota = dir.join("stats.json");
    let quota = if quota.exists() {
        let text = fs::read_to_string(&quota).map_err(|e| Error::io(&quota, e))?;
        serde_json::from_str::<SplitStats>(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", quota.display())))?
            .c
    } else {
        None
    };
    InteractionDataset::assemble(
        num_users,
        num_items,
        train,
        validation,
        test,
        users.unwrap_or_else(|| IdMap::identity(num_users)),
        items.unwrap_or_else(|| IdMap::identity(num_items)),
        quota,
    )
}
