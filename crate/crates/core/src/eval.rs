//! Full-ranking evaluation, popularity-group accuracy gap and embedding
//! separation diagnostics.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionDataset, PopularityIndex, Split};
use crate::encoder::PropagatedEmbeddings;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, squared_distance, Matrix};
use crate::losses::split_by_popularity;

/// Top-K lists for every user with at least one held-out item.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub split: Split,
    pub k_values: Vec<usize>,
    /// Length of each stored list (the largest requested K).
    pub k_max: usize,
    pub users: Vec<u32>,
    pub lists: Vec<Vec<u32>>,
}

/// Descending score, then ascending item index.
fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Top `k` of `scores` ignoring items in `masked` (sorted slices).
pub fn top_k(scores: &[f64], masked: &[&[u32]], k: usize) -> Vec<u32> {
    let mut candidates: Vec<(u32, f64)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (i as u32, s))
        .filter(|(i, _)| masked.iter().all(|m| m.binary_search(i).is_err()))
        .collect();
    if k == 0 {
        return Vec::new();
    }
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, rank_order);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(rank_order);
    candidates.into_iter().map(|(i, _)| i).collect()
}

/// Ranks all items for each test user, masking training and validation items.
pub fn rank_all(prop: &PropagatedEmbeddings, dataset: &InteractionDataset, k_list: &[usize]) -> Result<RankingResult> {
    rank_split(prop, dataset, k_list, Split::Test)
}

/// Ranks against `split`. Validation masks only training items; test masks
/// training and validation items.
pub fn rank_split(
    prop: &PropagatedEmbeddings,
    dataset: &InteractionDataset,
    k_list: &[usize],
    split: Split,
) -> Result<RankingResult> {
    let n = dataset.num_items();
    let k_max = k_list.iter().copied().max().unwrap_or(0);
    if k_max == 0 || k_list.contains(&0) {
        return Err(Error::InvalidArgument("K values must be at least 1".into()));
    }
    if k_max > n {
        return Err(Error::InvalidArgument(format!("K={k_max} exceeds the {n} items")));
    }
    if prop.num_users() != dataset.num_users() || prop.num_items() != n {
        return Err(Error::InvalidArgument("embedding shapes do not match the dataset".into()));
    }
    let mut users = Vec::new();
    let mut lists = Vec::new();
    let mut scores = vec![0.0; n];
    for u in 0..dataset.num_users() as u32 {
        if dataset.held_out_items(u, split).is_empty() {
            continue;
        }
        let zu = prop.users.row(u as usize);
        for (i, s) in scores.iter_mut().enumerate() {
            *s = dot(zu, prop.items.row(i));
        }
        let list = match split {
            Split::Validation => top_k(&scores, &[dataset.train_items(u)], k_max),
            Split::Test => top_k(&scores, &[dataset.train_items(u), dataset.validation_items(u)], k_max),
        };
        users.push(u);
        lists.push(list);
    }
    let mut k_values = k_list.to_vec();
    k_values.sort_unstable();
    k_values.dedup();
    Ok(RankingResult {
        split,
        k_values,
        k_max,
        users,
        lists,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub hr: f64,
    pub ndcg: f64,
    /// Users averaged over.
    pub users: usize,
}

/// `1 / log2(rank + 1)` for a 1-based rank.
#[inline]
fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Recall, HR and NDCG at `k` for one list against a sorted target set,
/// keeping only items accepted by `keep`. `None` when no target survives.
fn user_metrics(list: &[u32], targets: &[u32], k: usize, keep: impl Fn(u32) -> bool) -> Option<(f64, f64, f64)> {
    let relevant = targets.iter().filter(|&&i| keep(i)).count();
    if relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, &item) in list.iter().take(k).enumerate() {
        if keep(item) && targets.binary_search(&item).is_ok() {
            hits += 1;
            dcg += discount(pos + 1);
        }
    }
    let idcg: f64 = (1..=relevant.min(k)).map(discount).sum();
    Some((
        hits as f64 / relevant as f64,
        if hits > 0 { 1.0 } else { 0.0 },
        dcg / idcg,
    ))
}

fn aggregate(
    ranking: &RankingResult,
    dataset: &InteractionDataset,
    k: usize,
    keep: impl Fn(u32) -> bool,
) -> Option<Metrics> {
    let (mut recall, mut hr, mut ndcg, mut users) = (0.0, 0.0, 0.0, 0usize);
    for (&u, list) in ranking.users.iter().zip(&ranking.lists) {
        if let Some((r, h, n)) = user_metrics(list, dataset.held_out_items(u, ranking.split), k, &keep) {
            recall += r;
            hr += h;
            ndcg += n;
            users += 1;
        }
    }
    (users > 0).then(|| {
        let c = users as f64;
        Metrics {
            recall: recall / c,
            hr: hr / c,
            ndcg: ndcg / c,
            users,
        }
    })
}

fn check_k(ranking: &RankingResult, k: usize) -> Result<()> {
    if k == 0 || k > ranking.k_max {
        return Err(Error::InvalidArgument(format!(
            "K={k} outside the ranked range 1..={}",
            ranking.k_max
        )));
    }
    Ok(())
}

/// Mean Recall@K, HR@K and NDCG@K (binary relevance) over ranked users.
pub fn compute_metrics(ranking: &RankingResult, dataset: &InteractionDataset, k: usize) -> Result<Metrics> {
    check_k(ranking, k)?;
    Ok(aggregate(ranking, dataset, k, |_| true).unwrap_or(Metrics {
        recall: 0.0,
        hr: 0.0,
        ndcg: 0.0,
        users: 0,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupDelta {
    pub recall: f64,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub popular: Option<Metrics>,
    pub unpopular: Option<Metrics>,
    /// Popular minus unpopular; absent when either group has no users.
    pub delta: Option<GroupDelta>,
}

/// Items in the top `pareto_pct` percent by training popularity.
pub fn popular_mask(popularity: &PopularityIndex, pareto_pct: f64) -> Vec<bool> {
    let all: Vec<u32> = (0..popularity.num_items() as u32).collect();
    let split = split_by_popularity(&all, popularity, pareto_pct);
    let mut mask = vec![false; popularity.num_items()];
    for i in split.pop {
        mask[i as usize] = true;
    }
    mask
}

/// Per-group metrics: both the hits and the user's held-out set are
/// restricted to the group's items; ranks keep their position in the full
/// list. Users with no held-out items in a group are skipped for it.
pub fn group_metrics(
    ranking: &RankingResult,
    dataset: &InteractionDataset,
    popularity: &PopularityIndex,
    k: usize,
    pareto_pct: f64,
) -> Result<GroupMetrics> {
    check_k(ranking, k)?;
    let mask = popular_mask(popularity, pareto_pct);
    let popular = aggregate(ranking, dataset, k, |i| mask[i as usize]);
    let unpopular = aggregate(ranking, dataset, k, |i| !mask[i as usize]);
    let delta = match (popular, unpopular) {
        (Some(p), Some(u)) => Some(GroupDelta {
            recall: p.recall - u.recall,
            hr: p.hr - u.hr,
            ndcg: p.ndcg - u.ndcg,
        }),
        _ => None,
    };
    Ok(GroupMetrics {
        popular,
        unpopular,
        delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KReport {
    pub k: usize,
    pub overall: Metrics,
    #[serde(flatten)]
    pub groups: GroupMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub pareto_pct: f64,
    pub results: Vec<KReport>,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&KReport> {
        self.results.iter().find(|r| r.k == k)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// `split,k,group,users,recall,hr,ndcg`, one row per K per group; an
    /// empty group leaves its metric columns blank.
    pub fn to_csv(&self) -> String {
        let split = match self.split {
            Split::Validation => "valid",
            Split::Test => "test",
        };
        let mut s = String::from("split,k,group,users,recall,hr,ndcg\n");
        for r in &self.results {
            for (group, m) in [
                ("overall", Some(r.overall)),
                ("popular", r.groups.popular),
                ("unpopular", r.groups.unpopular),
            ] {
                match m {
                    Some(m) => {
                        let _ = writeln!(
                            s,
                            "{split},{},{group},{},{},{},{}",
                            r.k, m.users, m.recall, m.hr, m.ndcg
                        );
                    }
                    None => {
                        let _ = writeln!(s, "{split},{},{group},0,,,", r.k);
                    }
                }
            }
        }
        s
    }
}

/// Ranks once at the largest K and reports every K overall and per group.
pub fn evaluate(
    prop: &PropagatedEmbeddings,
    dataset: &InteractionDataset,
    popularity: &PopularityIndex,
    split: Split,
    k_list: &[usize],
    pareto_pct: f64,
) -> Result<MetricsReport> {
    let ranking = rank_split(prop, dataset, k_list, split)?;
    let mut results = Vec::new();
    for &k in &ranking.k_values {
        results.push(KReport {
            k,
            overall: compute_metrics(&ranking, dataset, k)?,
            groups: group_metrics(&ranking, dataset, popularity, k, pareto_pct)?,
        });
    }
    Ok(MetricsReport {
        split,
        pareto_pct,
        results,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    /// Biased (V-statistic) squared MMD, clamped at 0.
    pub value: f64,
    /// Gaussian kernel scale: median pairwise squared distance.
    pub bandwidth: f64,
    /// The median distance was 0 and `value` was forced to 0.
    pub degenerate_bandwidth: bool,
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    values.sort_unstable_by(f64::total_cmp);
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Squared MMD between two samples under `k(x, y) = exp(-||x - y||^2 / h)`,
/// `h` the median squared distance over all distinct pooled pairs.
pub fn mmd(group_a: &[&[f64]], group_b: &[&[f64]]) -> Result<MmdResult> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::InvalidArgument("MMD needs two nonempty groups".into()));
    }
    let pooled: Vec<&[f64]> = group_a.iter().chain(group_b).copied().collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(squared_distance(pooled[i], pooled[j]));
        }
    }
    let bandwidth = if dists.is_empty() { 0.0 } else { median(&mut dists) };
    if bandwidth <= 0.0 {
        log::warn!("MMD bandwidth is zero (median pairwise distance 0); reporting 0");
        return Ok(MmdResult {
            value: 0.0,
            bandwidth,
            degenerate_bandwidth: true,
        });
    }
    let mean_kernel = |x: &[&[f64]], y: &[&[f64]]| {
        let mut s = 0.0;
        for a in x {
            for b in y {
                s += (-squared_distance(a, b) / bandwidth).exp();
            }
        }
        s / (x.len() * y.len()) as f64
    };
    let value = mean_kernel(group_a, group_a) + mean_kernel(group_b, group_b) - 2.0 * mean_kernel(group_a, group_b);
    Ok(MmdResult {
        value: value.max(0.0),
        bandwidth,
        degenerate_bandwidth: false,
    })
}

fn nonzero<'a>(rows: &[&'a [f64]]) -> Vec<(&'a [f64], f64)> {
    rows.iter()
        .map(|r| (*r, norm(r)))
        .filter(|(_, n)| *n > 0.0)
        .collect()
}

/// Mean cosine similarity over all cross-group pairs, zero rows excluded.
pub fn cross_cosine(group_a: &[&[f64]], group_b: &[&[f64]]) -> Result<f64> {
    let (a, b) = (nonzero(group_a), nonzero(group_b));
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("cosine needs nonzero rows in both groups".into()));
    }
    let mut s = 0.0;
    for (x, nx) in &a {
        for (y, ny) in &b {
            s += dot(x, y) / (nx * ny);
        }
    }
    Ok((s / (a.len() * b.len()) as f64).clamp(-1.0, 1.0))
}

/// Cosine between the two group centroids.
pub fn centroid_cosine(group_a: &[&[f64]], group_b: &[&[f64]]) -> Result<f64> {
    let centroid = |g: &[&[f64]]| -> Result<Vec<f64>> {
        let first = g.first().ok_or_else(|| Error::InvalidArgument("empty group".into()))?;
        let mut c = vec![0.0; first.len()];
        for r in g {
            c.iter_mut().zip(r.iter()).for_each(|(a, b)| *a += b);
        }
        Ok(c)
    };
    let (ca, cb) = (centroid(group_a)?, centroid(group_b)?);
    let (na, nb) = (norm(&ca), norm(&cb));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("zero centroid".into()));
    }
    Ok((dot(&ca, &cb) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub mmd: f64,
    pub bandwidth: f64,
    pub degenerate_bandwidth: bool,
    /// Mean pairwise cross-group cosine.
    pub cross_cosine: f64,
    pub centroid_cosine: f64,
    pub pareto_pct: f64,
    pub popular_items: usize,
    pub unpopular_items: usize,
}

impl SeparationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// MMD and cosine diagnostics between popular and unpopular item embeddings.
/// Groups larger than `max_per_group` are subsampled with `seed`.
pub fn separation(
    items: &Matrix,
    popularity: &PopularityIndex,
    pareto_pct: f64,
    max_per_group: Option<usize>,
    seed: u64,
) -> Result<SeparationReport> {
    let mask = popular_mask(popularity, pareto_pct);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |want_popular: bool| -> Vec<&[f64]> {
        let mut idx: Vec<usize> = (0..items.rows()).filter(|&i| mask[i] == want_popular).collect();
        if let Some(cap) = max_per_group {
            if idx.len() > cap {
                idx.shuffle(&mut rng);
                idx.truncate(cap);
                idx.sort_unstable();
            }
        }
        idx.into_iter().map(|i| items.row(i)).collect()
    };
    let popular = pick(true);
    let unpopular = pick(false);
    let m = mmd(&popular, &unpopular)?;
    Ok(SeparationReport {
        mmd: m.value,
        bandwidth: m.bandwidth,
        degenerate_bandwidth: m.degenerate_bandwidth,
        cross_cosine: cross_cosine(&popular, &unpopular)?,
        centroid_cosine: centroid_cosine(&popular, &unpopular)?,
        pareto_pct,
        popular_items: popular.len(),
        unpopular_items: unpopular.len(),
    })
}
