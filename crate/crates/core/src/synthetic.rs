//! Power-law interaction generator with topic structure, for experiments
//! that need a popularity-skewed dataset without downloading one.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::RawInteraction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    /// Mean interactions per user.
    pub mean_per_user: usize,
    /// Each user draws between `min_per_user` and `2 * mean - min` items.
    pub min_per_user: usize,
    /// Every item receives at least this many interactions.
    pub min_per_item: usize,
    pub topics: usize,
    /// Probability that a pick comes from the user's own topic.
    pub in_topic: f64,
    /// Popularity weight of the item at popularity rank `r` is `(r + 1)^-exponent`.
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            items: 1000,
            mean_per_user: 30,
            min_per_user: 10,
            min_per_item: 6,
            topics: 10,
            in_topic: 0.8,
            zipf_exponent: 1.1,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let max_per_user = 2 * self.mean_per_user - self.min_per_user.min(self.mean_per_user);
        if self.users == 0 || self.items == 0 || self.topics == 0 || self.topics > self.items {
            return Err(Error::InvalidArgument("synthetic sizes must be positive with topics <= items".into()));
        }
        if self.min_per_user == 0 || self.min_per_user > self.mean_per_user || max_per_user > self.items {
            return Err(Error::InvalidArgument("per-user interaction range does not fit the item count".into()));
        }
        if self.min_per_item > self.users {
            return Err(Error::InvalidArgument("min_per_item exceeds the user count".into()));
        }
        if !(0.0..=1.0).contains(&self.in_topic) || !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return Err(Error::InvalidArgument("in_topic must be in [0,1] and zipf_exponent >= 0".into()));
        }
        Ok(())
    }
}

/// Deduplicated `(user, item)` pairs, grouped by user in ascending order.
pub fn generate_pairs(config: &SyntheticConfig) -> Result<Vec<(u32, u32)>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.items;

    let mut by_rank: Vec<usize> = (0..n).collect();
    by_rank.shuffle(&mut rng);
    let mut weight = vec![0.0; n];
    for (r, &i) in by_rank.iter().enumerate() {
        weight[i] = ((r + 1) as f64).powf(-config.zipf_exponent);
    }
    let topic_of: Vec<usize> = (0..n).map(|i| i % config.topics).collect();
    let mut topic_items: Vec<Vec<usize>> = vec![Vec::new(); config.topics];
    for i in 0..n {
        topic_items[topic_of[i]].push(i);
    }
    let all: Vec<usize> = (0..n).collect();

    let lo = config.min_per_user;
    let hi = 2 * config.mean_per_user - lo;
    let count_dist = Uniform::new_inclusive(lo, hi);
    let topic_dist = Uniform::new(0, config.topics);

    let mut user_topic = Vec::with_capacity(config.users);
    let mut per_user: Vec<Vec<u32>> = Vec::with_capacity(config.users);
    let mut item_count = vec![0usize; n];
    for _ in 0..config.users {
        let topic = topic_dist.sample(&mut rng);
        user_topic.push(topic);
        let want = count_dist.sample(&mut rng);
        let own = &topic_items[topic];
        let from_topic = (0..want).filter(|_| rng.gen_bool(config.in_topic)).count().min(own.len());
        let mut picks: Vec<u32> = own
            .choose_multiple_weighted(&mut rng, from_topic, |&i| weight[i])
            .expect("positive weights")
            .map(|&i| i as u32)
            .collect();
        let mut rest: Vec<u32> = all
            .choose_multiple_weighted(&mut rng, want - from_topic, |&i| weight[i])
            .expect("positive weights")
            .map(|&i| i as u32)
            .collect();
        picks.append(&mut rest);
        picks.sort_unstable();
        picks.dedup();
        for &i in &picks {
            item_count[i as usize] += 1;
        }
        per_user.push(picks);
    }

    // Top up rare items with users from the same topic.
    for i in 0..n {
        let topic = topic_of[i];
        let mut guard = 0;
        while item_count[i] < config.min_per_item {
            let u = rng.gen_range(0..config.users);
            guard += 1;
            if user_topic[u] != topic && guard < 50 * config.users {
                continue;
            }
            let list = &mut per_user[u];
            if let Err(pos) = list.binary_search(&(i as u32)) {
                list.insert(pos, i as u32);
                item_count[i] += 1;
            }
        }
    }

    Ok(per_user
        .into_iter()
        .enumerate()
        .flat_map(|(u, items)| items.into_iter().map(move |i| (u as u32, i)))
        .collect())
}

/// Same as [`generate_pairs`] with keys equal to the decimal indices.
pub fn generate(config: &SyntheticConfig) -> Result<Vec<RawInteraction>> {
    Ok(generate_pairs(config)?
        .into_iter()
        .map(|(u, i)| RawInteraction::new(u.to_string(), i.to_string()))
        .collect())
}
