use serde::Serialize;

use super::InteractionDataset;
use crate::error::{Error, Result};

/// Training-set item popularity and its inequality statistics.
#[derive(Debug, Clone, Serialize)]
pub struct PopularityIndex {
    counts: Vec<u64>,
    /// Items by (count desc, index asc).
    order: Vec<u32>,
    /// Inverse of `order`.
    #[serde(skip)]
    rank: Vec<u32>,
    gini: f64,
    max_count: u64,
    min_count: u64,
    mean_count: f64,
}

impl PopularityIndex {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let mut order: Vec<u32> = (0..counts.len() as u32).collect();
        order.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
        let mut rank = vec![0u32; counts.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i as usize] = r as u32;
        }
        let total: u64 = counts.iter().sum();
        Self {
            gini: gini_coefficient(&counts),
            max_count: counts.iter().copied().max().unwrap_or(0),
            min_count: counts.iter().copied().min().unwrap_or(0),
            mean_count: if counts.is_empty() {
                0.0
            } else {
                total as f64 / counts.len() as f64
            },
            counts,
            order,
            rank,
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, item: u32) -> u64 {
        self.counts[item as usize]
    }

    pub fn order(&self) -> &[u32] {
        &self.order
    }

    /// Position of `item` in [`order`](Self::order); 0 is the most popular.
    pub fn rank(&self, item: u32) -> u32 {
        self.rank[item as usize]
    }

    pub fn num_items(&self) -> usize {
        self.counts.len()
    }

    pub fn gini(&self) -> f64 {
        self.gini
    }

    pub fn max_count(&self) -> u64 {
        self.max_count
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn mean_count(&self) -> f64 {
        self.mean_count
    }
}

/// Popularity from the training split only.
pub fn build_popularity_index(dataset: &InteractionDataset) -> Result<PopularityIndex> {
    if dataset.train().is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let mut counts = vec![0u64; dataset.num_items()];
    for &(_, i) in dataset.train() {
        counts[i as usize] += 1;
    }
    Ok(PopularityIndex::from_counts(counts))
}

/// `sum_i sum_j |p_i - p_j| / (2 n^2 mean)`, evaluated exactly in integers
/// via the sorted form `2 * sum_k (2k - n - 1) p_(k)`.
pub fn gini_coefficient(counts: &[u64]) -> f64 {
    let n = counts.len() as i128;
    let total: i128 = counts.iter().map(|&c| c as i128).sum();
    if n == 0 || total == 0 {
        return 0.0;
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let pairwise: i128 = 2 * sorted
        .iter()
        .enumerate()
        .map(|(k, &p)| (2 * (k as i128 + 1) - n - 1) * p as i128)
        .sum::<i128>();
    // 2 n^2 mean = 2 n total
    pairwise as f64 / (2 * n * total) as f64
}
