//! Interaction ingestion, k-core filtering and the popularity-uniform split.

mod manifest;
mod popularity;
mod sampler;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use manifest::{read_split_manifest, write_split_manifest, write_stats, SplitStats};
pub use popularity::{build_popularity_index, gini_coefficient, PopularityIndex};
pub use sampler::{sample_epoch_batches, EpochBatches, MiniBatch};

/// One raw log row. Duplicates are allowed here and collapse on load.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawInteraction {
    pub user_key: String,
    pub item_key: String,
}

impl RawInteraction {
    pub fn new(user_key: impl Into<String>, item_key: impl Into<String>) -> Self {
        Self {
            user_key: user_key.into(),
            item_key: item_key.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Tsv,
    Csv,
    /// Whitespace-separated `user item item ...` per line.
    Adjacency,
}

impl Format {
    fn delimiter(self) -> char {
        match self {
            Format::Tsv => '\t',
            Format::Csv => ',',
            Format::Adjacency => ' ',
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(Format::Tsv),
            "csv" => Ok(Format::Csv),
            "adj" | "adjacency" => Ok(Format::Adjacency),
            other => Err(Error::InvalidArgument(format!("unknown format `{other}`"))),
        }
    }
}

/// Reads `user<delim>item[<delim>...]` rows. Blank lines and lines starting
/// with `#` are skipped; extra fields are ignored.
pub fn load_interactions(path: impl AsRef<Path>, format: Format) -> Result<Vec<RawInteraction>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, format)
}

pub fn parse_interactions(text: &str, format: Format) -> Result<Vec<RawInteraction>> {
    if format == Format::Adjacency {
        return Ok(parse_adjacency(text));
    }
    let delim = format.delimiter();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(delim);
        let user = fields.next().map(str::trim).unwrap_or("");
        let item = fields.next().map(str::trim);
        match item {
            Some(item) if !user.is_empty() && !item.is_empty() => {
                out.push(RawInteraction::new(user, item));
            }
            Some(_) => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: "empty user or item key".into(),
                })
            }
            None => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected at least 2 fields separated by {delim:?}"),
                })
            }
        }
    }
    Ok(out)
}

// Users listed without items contribute nothing.
fn parse_adjacency(text: &str) -> Vec<RawInteraction> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let Some(user) = fields.next() else { continue };
        out.extend(fields.map(|item| RawInteraction::new(user, item)));
    }
    out
}

/// Removes duplicate rows, keeping first occurrences in input order.
pub fn dedup_interactions(raw: &[RawInteraction]) -> Vec<RawInteraction> {
    let mut seen = HashSet::with_capacity(raw.len());
    raw.iter()
        .filter(|r| seen.insert((r.user_key.as_str(), r.item_key.as_str())))
        .cloned()
        .collect()
}

/// Peels users and items with fewer than `k` distinct interactions until a
/// fixed point is reached. Survivors keep their first-occurrence order.
pub fn k_core_filter(raw: &[RawInteraction], k: usize) -> Result<Vec<RawInteraction>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let rows = dedup_interactions(raw);

    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let edges: Vec<(usize, usize)> = rows
        .iter()
        .map(|r| {
            let nu = user_ids.len();
            let u = *user_ids.entry(r.user_key.as_str()).or_insert(nu);
            let ni = item_ids.len();
            let i = *item_ids.entry(r.item_key.as_str()).or_insert(ni);
            (u, i)
        })
        .collect();

    let mut user_deg = vec![0usize; user_ids.len()];
    let mut item_deg = vec![0usize; item_ids.len()];
    let mut user_edges = vec![Vec::new(); user_ids.len()];
    let mut item_edges = vec![Vec::new(); item_ids.len()];
    for (e, &(u, i)) in edges.iter().enumerate() {
        user_deg[u] += 1;
        item_deg[i] += 1;
        user_edges[u].push(e);
        item_edges[i].push(e);
    }

    let mut alive = vec![true; edges.len()];
    let mut user_gone = vec![false; user_deg.len()];
    let mut item_gone = vec![false; item_deg.len()];
    // (is_user, index)
    let mut queue: Vec<(bool, usize)> = Vec::new();
    queue.extend((0..user_deg.len()).filter(|&u| user_deg[u] < k).map(|u| (true, u)));
    queue.extend((0..item_deg.len()).filter(|&i| item_deg[i] < k).map(|i| (false, i)));

    while let Some((is_user, node)) = queue.pop() {
        let (gone, incident) = if is_user {
            (&mut user_gone[node], &user_edges[node])
        } else {
            (&mut item_gone[node], &item_edges[node])
        };
        if *gone {
            continue;
        }
        *gone = true;
        for &e in incident {
            if !alive[e] {
                continue;
            }
            alive[e] = false;
            let (u, i) = edges[e];
            user_deg[u] -= 1;
            item_deg[i] -= 1;
            if is_user {
                if !item_gone[i] && item_deg[i] < k {
                    queue.push((false, i));
                }
            } else if !user_gone[u] && user_deg[u] < k {
                queue.push((true, u));
            }
        }
    }

    let kept: Vec<RawInteraction> = rows
        .into_iter()
        .zip(alive)
        .filter_map(|(r, a)| a.then_some(r))
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyResult { k });
    }
    Ok(kept)
}

/// Bidirectional mapping between external keys and contiguous indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    keys: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    pub fn from_keys(keys: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            if index.insert(k.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate id key `{k}`")));
            }
        }
        Ok(Self { keys, index })
    }

    /// Keys `"0"`, `"1"`, ... for datasets that arrive already indexed.
    pub fn identity(n: usize) -> Self {
        Self::from_keys((0..n).map(|i| i.to_string()).collect()).expect("distinct keys")
    }

    fn intern(&mut self, key: &str) -> u32 {
        if let Some(&i) = self.index.get(key) {
            return i;
        }
        let i = self.keys.len() as u32;
        self.keys.push(key.to_owned());
        self.index.insert(key.to_owned(), i);
        i
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, index: u32) -> Option<&str> {
        self.keys.get(index as usize).map(String::as_str)
    }

    pub fn index(&self, key: &str) -> Option<u32> {
        self.index.get(key).copied()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }
}

/// Which held-out split an evaluation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" | "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// Deduplicated interactions with contiguous ids and disjoint
/// train / validation / test splits. Every user and item has at least one
/// training interaction.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    train: Vec<(u32, u32)>,
    validation: Vec<(u32, u32)>,
    test: Vec<(u32, u32)>,
    train_by_user: Vec<Vec<u32>>,
    valid_by_user: Vec<Vec<u32>>,
    test_by_user: Vec<Vec<u32>>,
    user_ids: IdMap,
    item_ids: IdMap,
    test_quota: Option<usize>,
}

fn group_by_user(num_users: usize, pairs: &[(u32, u32)]) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); num_users];
    for &(u, i) in pairs {
        out[u as usize].push(i);
    }
    out.iter_mut().for_each(|v| v.sort_unstable());
    out
}

impl InteractionDataset {
    /// Builds a dataset from already-indexed splits, checking every
    /// structural invariant.
    pub fn from_splits(
        num_users: usize,
        num_items: usize,
        train: Vec<(u32, u32)>,
        validation: Vec<(u32, u32)>,
        test: Vec<(u32, u32)>,
    ) -> Result<Self> {
        Self::assemble(
            num_users,
            num_items,
            train,
            validation,
            test,
            IdMap::identity(num_users),
            IdMap::identity(num_items),
            None,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        num_users: usize,
        num_items: usize,
        mut train: Vec<(u32, u32)>,
        mut validation: Vec<(u32, u32)>,
        mut test: Vec<(u32, u32)>,
        user_ids: IdMap,
        item_ids: IdMap,
        test_quota: Option<usize>,
    ) -> Result<Self> {
        if user_ids.len() != num_users || item_ids.len() != num_items {
            return Err(Error::Format("id map size does not match dimensions".into()));
        }
        let mut seen = HashSet::with_capacity(train.len() + validation.len() + test.len());
        for (name, split) in [("train", &train), ("validation", &validation), ("test", &test)] {
            for &(u, i) in split.iter() {
                if u as usize >= num_users {
                    return Err(Error::IndexOutOfRange {
                        what: "user",
                        index: u as usize,
                        size: num_users,
                    });
                }
                if i as usize >= num_items {
                    return Err(Error::IndexOutOfRange {
                        what: "item",
                        index: i as usize,
                        size: num_items,
                    });
                }
                if !seen.insert((u, i)) {
                    return Err(Error::InvalidArgument(format!(
                        "pair ({u}, {i}) repeated (found again in {name})"
                    )));
                }
            }
        }
        let mut user_seen = vec![false; num_users];
        let mut item_seen = vec![false; num_items];
        for &(u, i) in &train {
            user_seen[u as usize] = true;
            item_seen[i as usize] = true;
        }
        if let Some(u) = user_seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("user {u} has no training interaction")));
        }
        if let Some(i) = item_seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("item {i} has no training interaction")));
        }

        train.sort_unstable();
        validation.sort_unstable();
        test.sort_unstable();
        Ok(Self {
            train_by_user: group_by_user(num_users, &train),
            valid_by_user: group_by_user(num_users, &validation),
            test_by_user: group_by_user(num_users, &test),
            num_users,
            num_items,
            train,
            validation,
            test,
            user_ids,
            item_ids,
            test_quota,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn train(&self) -> &[(u32, u32)] {
        &self.train
    }

    pub fn validation(&self) -> &[(u32, u32)] {
        &self.validation
    }

    pub fn test(&self) -> &[(u32, u32)] {
        &self.test
    }

    pub fn num_interactions(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    /// Sorted training items of `user`.
    pub fn train_items(&self, user: u32) -> &[u32] {
        &self.train_by_user[user as usize]
    }

    pub fn validation_items(&self, user: u32) -> &[u32] {
        &self.valid_by_user[user as usize]
    }

    pub fn test_items(&self, user: u32) -> &[u32] {
        &self.test_by_user[user as usize]
    }

    pub fn held_out_items(&self, user: u32, split: Split) -> &[u32] {
        match split {
            Split::Validation => self.validation_items(user),
            Split::Test => self.test_items(user),
        }
    }

    pub fn is_train(&self, user: u32, item: u32) -> bool {
        self.train_items(user).binary_search(&item).is_ok()
    }

    pub fn user_ids(&self) -> &IdMap {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &IdMap {
        &self.item_ids
    }

    /// Per-item test quota chosen by [`build_unbiased_split`], when known.
    pub fn test_quota(&self) -> Option<usize> {
        self.test_quota
    }

    /// Per-item counts over all three splits.
    pub fn item_counts_all(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_items];
        for &(_, i) in self.train.iter().chain(&self.validation).chain(&self.test) {
            counts[i as usize] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.10,
            val_fraction: 0.10,
        }
    }
}

// Guards floor/compare against products like 0.1 * 30 = 3.0000000000000004.
const FRACTION_SLACK: f64 = 1e-9;

/// Largest per-item quota `c >= 1` with `sum_i min(c, cap_i) <= budget`.
/// Returns `None` when even `c = 1` overshoots or no item can spare anything.
pub fn per_item_test_quota(caps: &[usize], budget: f64) -> Option<usize> {
    let max_cap = caps.iter().copied().max().unwrap_or(0);
    if max_cap == 0 {
        return None;
    }
    let mut sorted = caps.to_vec();
    sorted.sort_unstable();
    let mut total = 0usize;
    let mut below = 0usize; // number of caps < c
    let mut best = None;
    for c in 1..=max_cap {
        while below < sorted.len() && sorted[below] < c {
            below += 1;
        }
        // every cap >= c contributes one more unit when moving from c-1 to c
        total += sorted.len() - below;
        if total as f64 <= budget + FRACTION_SLACK {
            best = Some(c);
        } else {
            break;
        }
    }
    best
}

/// Builds train / validation / test splits where every item with enough
/// interactions contributes the same number `c` of test interactions.
///
/// `c` is the largest quota whose total fits in `test_fraction` of the data,
/// with each item capped at `count - 1` so it keeps a training interaction.
/// Validation is then drawn uniformly from the remainder, skipping picks that
/// would leave a user or item without training data.
pub fn build_unbiased_split(
    interactions: &[RawInteraction],
    config: SplitConfig,
    seed: u64,
) -> Result<InteractionDataset> {
    let SplitConfig {
        test_fraction,
        val_fraction,
    } = config;
    if !(test_fraction > 0.0 && val_fraction > 0.0 && test_fraction + val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fractions must be positive with sum < 1 (test {test_fraction}, validation {val_fraction})"
        )));
    }

    let rows = dedup_interactions(interactions);
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let pairs: Vec<(u32, u32)> = rows
        .iter()
        .map(|r| (users.intern(&r.user_key), items.intern(&r.item_key)))
        .collect();
    let total = pairs.len();
    let (num_users, num_items) = (users.len(), items.len());

    let mut by_item: Vec<Vec<usize>> = vec![Vec::new(); num_items];
    let mut user_left = vec![0usize; num_users];
    for (idx, &(u, i)) in pairs.iter().enumerate() {
        by_item[i as usize].push(idx);
        user_left[u as usize] += 1;
    }
    let caps: Vec<usize> = by_item.iter().map(|v| v.len() - 1).collect();
    let budget = test_fraction * total as f64;
    let quota = per_item_test_quota(&caps, budget).ok_or_else(|| {
        Error::InfeasibleSplit(format!(
            "no per-item test quota c >= 1 fits a budget of {budget:.1} interactions over {num_items} items"
        ))
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_test = vec![false; total];
    for (item, candidates) in by_item.iter().enumerate() {
        let want = quota.min(caps[item]);
        if want == 0 {
            continue;
        }
        let mut order = candidates.clone();
        order.shuffle(&mut rng);
        let mut taken = 0;
        for idx in order {
            if taken == want {
                break;
            }
            let u = pairs[idx].0 as usize;
            if user_left[u] > 1 {
                user_left[u] -= 1;
                in_test[idx] = true;
                taken += 1;
            }
        }
        if taken < want {
            return Err(Error::InfeasibleSplit(format!(
                "item {} cannot place {want} test interactions without emptying a user",
                items.keys[item]
            )));
        }
    }

    let val_target = (val_fraction * total as f64 + FRACTION_SLACK).floor() as usize;
    let mut item_left: Vec<usize> = by_item
        .iter()
        .map(|c| c.iter().filter(|&&idx| !in_test[idx]).count())
        .collect();
    let mut remainder: Vec<usize> = (0..total).filter(|&idx| !in_test[idx]).collect();
    remainder.shuffle(&mut rng);
    let mut in_val = vec![false; total];
    let mut placed = 0;
    for idx in remainder {
        if placed == val_target {
            break;
        }
        let (u, i) = (pairs[idx].0 as usize, pairs[idx].1 as usize);
        if user_left[u] > 1 && item_left[i] > 1 {
            user_left[u] -= 1;
            item_left[i] -= 1;
            in_val[idx] = true;
            placed += 1;
        }
    }
    if placed < val_target {
        return Err(Error::InfeasibleSplit(format!(
            "validation target {val_target} unreachable; only {placed} picks keep every user and item in train"
        )));
    }

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for (idx, &p) in pairs.iter().enumerate() {
        if in_test[idx] {
            test.push(p);
        } else if in_val[idx] {
            validation.push(p);
        } else {
            train.push(p);
        }
    }
    InteractionDataset::assemble(
        num_users,
        num_items,
        train,
        validation,
        test,
        users,
        items,
        Some(quota),
    )
}
