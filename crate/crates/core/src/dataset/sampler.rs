use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::InteractionDataset;
use crate::error::{Error, Result};

/// BPR triples plus the batch-level groupings the PAAC losses need.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    /// `(user, positive, negative)`
    pub triples: Vec<(u32, u32, u32)>,
    /// Distinct positive items, ascending.
    pub batch_items: Vec<u32>,
    /// Distinct users, ascending.
    pub batch_users: Vec<u32>,
    /// Positive items of each batch user, in triple order.
    pub per_user_items: BTreeMap<u32, Vec<u32>>,
}

impl MiniBatch {
    pub fn from_triples(triples: Vec<(u32, u32, u32)>) -> Self {
        let mut per_user_items: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &(u, i, _) in &triples {
            let items = per_user_items.entry(u).or_default();
            if !items.contains(&i) {
                items.push(i);
            }
        }
        let mut batch_items: Vec<u32> = triples.iter().map(|t| t.1).collect();
        batch_items.sort_unstable();
        batch_items.dedup();
        Self {
            batch_users: per_user_items.keys().copied().collect(),
            batch_items,
            per_user_items,
            triples,
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// One epoch of shuffled training pairs, cut into consecutive batches.
pub struct EpochBatches<'a, R: Rng> {
    dataset: &'a InteractionDataset,
    pairs: Vec<(u32, u32)>,
    cursor: usize,
    batch_size: usize,
    rng: &'a mut R,
}

pub fn sample_epoch_batches<'a, R: Rng>(
    dataset: &'a InteractionDataset,
    batch_size: usize,
    rng: &'a mut R,
) -> Result<EpochBatches<'a, R>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut pairs = dataset.train().to_vec();
    pairs.shuffle(rng);
    Ok(EpochBatches {
        dataset,
        pairs,
        cursor: 0,
        batch_size,
        rng,
    })
}

/// Uniform item outside the user's training set, by rejection.
pub fn sample_negative<R: Rng>(dataset: &InteractionDataset, user: u32, rng: &mut R) -> Result<u32> {
    let n = dataset.num_items();
    if dataset.train_items(user).len() >= n {
        return Err(Error::NegativeSamplingStall { user });
    }
    loop {
        let j = rng.gen_range(0..n as u32);
        if !dataset.is_train(user, j) {
            return Ok(j);
        }
    }
}

impl<R: Rng> EpochBatches<'_, R> {
    pub fn num_batches(&self) -> usize {
        self.pairs.len().div_ceil(self.batch_size)
    }
}

impl<R: Rng> Iterator for EpochBatches<'_, R> {
    type Item = Result<MiniBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.pairs.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.pairs.len());
        let mut triples = Vec::with_capacity(end - self.cursor);
        for &(u, i) in &self.pairs[self.cursor..end] {
            match sample_negative(self.dataset, u, self.rng) {
                Ok(j) => triples.push((u, i, j)),
                Err(e) => {
                    self.cursor = self.pairs.len();
                    return Some(Err(e));
                }
            }
        }
        self.cursor = end;
        Some(Ok(MiniBatch::from_triples(triples)))
    }
}
