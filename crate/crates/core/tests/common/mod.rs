#![allow(dead_code)]

use paac::dataset::{build_popularity_index, InteractionDataset, MiniBatch, PopularityIndex};
use paac::encoder::{init_embeddings, EmbeddingState};
use paac::losses::{GradientSet, Hyperparams, LossBreakdown};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small random training graph where every user and item has an edge, plus
/// a batch of triples whose negatives are sampled outside the user's items.
pub struct Instance {
    pub dataset: InteractionDataset,
    pub popularity: PopularityIndex,
    pub batch: MiniBatch,
    pub state: EmbeddingState,
}

pub fn random_instance(seed: u64, m: usize, n: usize, dim: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = std::collections::BTreeSet::new();
    for u in 0..m {
        edges.insert((u as u32, rng.gen_range(0..n) as u32));
    }
    for i in 0..n {
        edges.insert((rng.gen_range(0..m) as u32, i as u32));
    }
    // skewed extra edges so popularity has some spread
    for _ in 0..(m * n / 4) {
        let u = rng.gen_range(0..m) as u32;
        let r: f64 = rng.gen();
        let i = ((r * r) * n as f64) as u32;
        edges.insert((u, i.min(n as u32 - 1)));
    }
    let train: Vec<(u32, u32)> = edges.into_iter().collect();
    let dataset = InteractionDataset::from_splits(m, n, train.clone(), vec![], vec![]).unwrap();
    let popularity = build_popularity_index(&dataset).unwrap();

    let mut picks = train;
    picks.shuffle(&mut rng);
    picks.truncate((m + n).max(6));
    let triples = picks
        .into_iter()
        .filter_map(|(u, i)| {
            let negatives: Vec<u32> = (0..n as u32).filter(|&j| !dataset.is_train(u, j)).collect();
            negatives.choose(&mut rng).map(|&j| (u, i, j))
        })
        .collect();
    let batch = MiniBatch::from_triples(triples);

    let mut state = init_embeddings(m, n, dim, seed.wrapping_add(17));
    // scale up so the contrastive softmaxes are not flat
    state.users.scale(3.0);
    state.items.scale(3.0);
    Instance {
        dataset,
        popularity,
        batch,
        state,
    }
}

pub fn hp_small(layers: usize) -> Hyperparams {
    Hyperparams {
        lambda1: 0.7,
        lambda2: 1.3,
        lambda3: 0.05,
        gamma: 0.3,
        beta: 0.6,
        tau: 0.5,
        epsilon: 0.1,
        layers,
        dim: 4,
        ..Hyperparams::default()
    }
}

pub fn breakdown_total(b: &LossBreakdown) -> f64 {
    b.total
}

pub fn grads_of(g: &GradientSet) -> (&paac::linalg::Matrix, &paac::linalg::Matrix) {
    (&g.d_user_base, &g.d_item_base)
}

pub mod fd {
    use super::*;
    use paac::dataset::MiniBatch;
    use paac::encoder::{make_views, propagate, propagate_backward, NormalizedAdjacency};
    use paac::linalg::Matrix;
    use paac::losses::{
        bpr_loss, l2_reg, reweighted_infonce, split_by_popularity, supervised_alignment_loss, total_loss, Ablation,
        EmbeddingGrad, ViewGrad,
    };

    pub const H: f64 = 1e-5;
    pub const REL_TOL: f64 = 1e-4;
    pub const ABS_FLOOR: f64 = 1e-8;

    pub const LOSSES: [&str; 7] = ["bpr", "alignment", "cl_pop", "cl_unpop", "cl_user", "reg", "total"];

    const VIEW_SEED: u64 = 99;

    /// Loss value and its gradient w.r.t. the base user and item tables.
    pub fn evaluate(
        which: &str,
        state: &EmbeddingState,
        adj: &NormalizedAdjacency,
        batch: &MiniBatch,
        popularity: &PopularityIndex,
        hp: &Hyperparams,
    ) -> (f64, Matrix, Matrix) {
        let prop = propagate(state, adj, hp.layers);
        let mut fg = EmbeddingGrad::like(&prop);
        let through_prop = |fg: &EmbeddingGrad| propagate_backward(adj, hp.layers, &fg.users, &fg.items);
        match which {
            "bpr" => {
                let v = bpr_loss(batch, &prop, Some((&mut fg, 1.0)));
                let (gu, gi) = through_prop(&fg);
                (v, gu, gi)
            }
            "alignment" => {
                let v = supervised_alignment_loss(batch, &prop, popularity, hp.x_ratio, Some((&mut fg, 1.0)));
                let (gu, gi) = through_prop(&fg);
                (v, gu, gi)
            }
            "cl_pop" | "cl_unpop" | "cl_user" => {
                let views = make_views(&prop, hp.epsilon, &mut ChaCha8Rng::seed_from_u64(VIEW_SEED));
                let split = split_by_popularity(&batch.batch_items, popularity, hp.x_ratio);
                let (pair, anchors, other): (_, &[u32], &[u32]) = match which {
                    "cl_pop" => (&views.items, &split.pop, &split.unpop),
                    "cl_unpop" => (&views.items, &split.unpop, &split.pop),
                    _ => (&views.users, &batch.batch_users, &[]),
                };
                let beta = if which == "cl_user" { 1.0 } else { hp.beta };
                let mut vg = ViewGrad::like(pair);
                let v = reweighted_infonce(anchors, anchors, other, pair, hp.tau, beta, Some((&mut vg, 1.0)));
                let g = pair.backward(&vg.v1, &vg.v2);
                if which == "cl_user" {
                    fg.users = g;
                } else {
                    fg.items = g;
                }
                let (gu, gi) = through_prop(&fg);
                (v, gu, gi)
            }
            "reg" => {
                let mut bg = EmbeddingGrad::zeros(state.num_users(), state.num_items(), state.dim());
                let v = l2_reg(state, batch, hp.lambda3, Some((&mut bg, 1.0)));
                (v, bg.users, bg.items)
            }
            "total" => {
                let mut rng = ChaCha8Rng::seed_from_u64(VIEW_SEED);
                let (b, g) = total_loss(batch, state, adj, popularity, hp, Ablation::Full, &mut rng);
                (b.total, g.d_user_base, g.d_item_base)
            }
            other => panic!("unknown loss {other}"),
        }
    }

    #[derive(Debug, Clone, Copy, Default)]
    pub struct Agreement {
        /// Worst relative error among coordinates above the absolute floor.
        pub rel: f64,
        pub abs: f64,
        /// Largest analytic gradient entry, to show the check is not vacuous.
        pub max_grad: f64,
    }

    /// `Err` names the first coordinate over tolerance.
    pub fn check(
        which: &str,
        state: &EmbeddingState,
        adj: &NormalizedAdjacency,
        batch: &MiniBatch,
        popularity: &PopularityIndex,
        hp: &Hyperparams,
    ) -> Result<Agreement, String> {
        let (_, gu, gi) = evaluate(which, state, adj, batch, popularity, hp);
        let mut worst = Agreement::default();
        for table in 0..2 {
            let analytic = if table == 0 { &gu } else { &gi };
            let rows = analytic.rows();
            for r in 0..rows {
                for c in 0..analytic.cols() {
                    let bump = |delta: f64| {
                        let mut s = state.clone();
                        let m = if table == 0 { &mut s.users } else { &mut s.items };
                        m.set(r, c, m.get(r, c) + delta);
                        evaluate(which, &s, adj, batch, popularity, hp).0
                    };
                    let numeric = (bump(H) - bump(-H)) / (2.0 * H);
                    let a = analytic.get(r, c);
                    let abs = (a - numeric).abs();
                    worst.abs = worst.abs.max(abs);
                    worst.max_grad = worst.max_grad.max(a.abs());
                    if abs <= ABS_FLOOR {
                        continue;
                    }
                    let rel = abs / a.abs().max(numeric.abs());
                    worst.rel = worst.rel.max(rel);
                    if rel >= REL_TOL {
                        let t = if table == 0 { "user" } else { "item" };
                        return Err(format!(
                            "{which}: {t}[{r}][{c}] analytic {a:.10e} vs numeric {numeric:.10e} (rel {rel:.2e})"
                        ));
                    }
                }
            }
        }
        Ok(worst)
    }
}

/// Brute-force ranking metrics: full sort of every candidate, no shared
/// code with the evaluation module.
pub mod oracle {
    use paac::dataset::{InteractionDataset, Split};

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct M {
        pub recall: f64,
        pub hr: f64,
        pub ndcg: f64,
        pub users: usize,
    }

    pub fn ranked(scores: &[Vec<f64>], ds: &InteractionDataset, u: usize, split: Split) -> Vec<u32> {
        let masked = |i: u32| {
            ds.train_items(u as u32).contains(&i)
                || (split == Split::Test && ds.validation_items(u as u32).contains(&i))
        };
        let mut items: Vec<u32> = (0..ds.num_items() as u32).filter(|&i| !masked(i)).collect();
        items.sort_by(|&a, &b| {
            let (sa, sb) = (scores[u][a as usize], scores[u][b as usize]);
            if sa > sb {
                std::cmp::Ordering::Less
            } else if sa < sb {
                std::cmp::Ordering::Greater
            } else {
                a.cmp(&b)
            }
        });
        items
    }

    /// Labels: top `ceil(pct * N / 100)` by (count desc, index asc).
    pub fn popular_labels(counts: &[u64], pct: f64) -> Vec<bool> {
        let n = counts.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let top = ((pct * n as f64 / 100.0) - 1e-9).ceil().max(1.0) as usize;
        let mut label = vec![false; n];
        for &i in idx.iter().take(top.min(n)) {
            label[i] = true;
        }
        label
    }

    pub fn metrics(
        scores: &[Vec<f64>],
        ds: &InteractionDataset,
        split: Split,
        k: usize,
        keep: &dyn Fn(u32) -> bool,
    ) -> Option<M> {
        let (mut r, mut h, mut n, mut users) = (0.0, 0.0, 0.0, 0usize);
        for u in 0..ds.num_users() {
            let all_targets = ds.held_out_items(u as u32, split);
            if all_targets.is_empty() {
                continue;
            }
            let targets: Vec<u32> = all_targets.iter().copied().filter(|&i| keep(i)).collect();
            if targets.is_empty() {
                continue;
            }
            let list = ranked(scores, ds, u, split);
            let mut hits = 0usize;
            let mut dcg = 0.0;
            for (pos, &i) in list.iter().take(k).enumerate() {
                if keep(i) && targets.contains(&i) {
                    hits += 1;
                    dcg += 1.0 / ((pos + 2) as f64).log2();
                }
            }
            let mut idcg = 0.0;
            for rank in 1..=targets.len().min(k) {
                idcg += 1.0 / ((rank + 1) as f64).log2();
            }
            r += hits as f64 / targets.len() as f64;
            h += if hits > 0 { 1.0 } else { 0.0 };
            n += dcg / idcg;
            users += 1;
        }
        (users > 0).then(|| M {
            recall: r / users as f64,
            hr: h / users as f64,
            ndcg: n / users as f64,
            users,
        })
    }
}

/// Random small dataset with train covering every user and item and the
/// remaining pairs scattered over validation and test.
pub fn random_split_dataset(seed: u64, m: usize, n: usize) -> InteractionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for u in 0..m as u32 {
        for i in 0..n as u32 {
            if rng.gen_bool(0.45) {
                pairs.push((u, i));
            }
        }
    }
    pairs.shuffle(&mut rng);
    let mut user_has = vec![false; m];
    let mut item_has = vec![false; n];
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (u, i) in pairs {
        if !user_has[u as usize] || !item_has[i as usize] {
            user_has[u as usize] = true;
            item_has[i as usize] = true;
            train.push((u, i));
            continue;
        }
        match rng.gen_range(0..3) {
            0 => train.push((u, i)),
            1 => val.push((u, i)),
            _ => test.push((u, i)),
        }
    }
    for u in 0..m as u32 {
        if !user_has[u as usize] {
            let i = rng.gen_range(0..n as u32);
            item_has[i as usize] = true;
            user_has[u as usize] = true;
            train.retain(|&p| p != (u, i));
            val.retain(|&p| p != (u, i));
            test.retain(|&p| p != (u, i));
            train.push((u, i));
        }
    }
    for i in 0..n as u32 {
        if !item_has[i as usize] {
            let u = rng.gen_range(0..m as u32);
            val.retain(|&p| p != (u, i));
            test.retain(|&p| p != (u, i));
            if !train.contains(&(u, i)) {
                train.push((u, i));
            }
        }
    }
    InteractionDataset::from_splits(m, n, train, val, test).unwrap()
}

/// Plain InfoNCE with every candidate weighted equally; written out directly
/// from the definition.
pub fn plain_infonce(anchors: &[u32], candidates: &[u32], v1: &paac::linalg::Matrix, v2: &paac::linalg::Matrix, tau: f64) -> f64 {
    let sim = |a: u32, b: u32| {
        v1.row(a as usize)
            .iter()
            .zip(v2.row(b as usize))
            .map(|(x, y)| x * y)
            .sum::<f64>()
            / tau
    };
    anchors
        .iter()
        .map(|&a| {
            let denom: f64 = candidates.iter().map(|&j| sim(a, j).exp()).sum();
            -(sim(a, a).exp() / denom).ln()
        })
        .sum()
}

/// Dense LightGCN: symmetric normalized adjacency built from the edge list,
/// repeated dense products, mean over layers.
pub fn dense_propagate(
    m: usize,
    n: usize,
    edges: &[(u32, u32)],
    users: &paac::linalg::Matrix,
    items: &paac::linalg::Matrix,
    layers: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let total = m + n;
    let d = users.cols();
    let mut deg = vec![0.0f64; total];
    for &(u, i) in edges {
        deg[u as usize] += 1.0;
        deg[m + i as usize] += 1.0;
    }
    let mut a = vec![vec![0.0; total]; total];
    for &(u, i) in edges {
        let (r, c) = (u as usize, m + i as usize);
        let w = 1.0 / (deg[r] * deg[c]).sqrt();
        a[r][c] = w;
        a[c][r] = w;
    }
    let mut e: Vec<Vec<f64>> = (0..m).map(|u| users.row(u).to_vec()).chain((0..n).map(|i| items.row(i).to_vec())).collect();
    let mut acc = e.clone();
    for _ in 0..layers {
        let mut next = vec![vec![0.0; d]; total];
        for r in 0..total {
            for c in 0..total {
                if a[r][c] != 0.0 {
                    for k in 0..d {
                        next[r][k] += a[r][c] * e[c][k];
                    }
                }
            }
        }
        e = next;
        for r in 0..total {
            for k in 0..d {
                acc[r][k] += e[r][k];
            }
        }
    }
    let scale = 1.0 / (layers + 1) as f64;
    for row in &mut acc {
        for x in row.iter_mut() {
            *x *= scale;
        }
    }
    let items_out = acc.split_off(m);
    (acc, items_out)
}

/// Integer-valued embeddings so every score is exact and ties are common.
pub fn integer_embeddings(seed: u64, m: usize, n: usize) -> paac::encoder::PropagatedEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize| {
        paac::linalg::Matrix::from_rows(&(0..rows).map(|_| (0..2).map(|_| rng.gen_range(-3i32..=3) as f64).collect()).collect::<Vec<_>>())
    };
    let users = draw(m);
    let items = draw(n);
    paac::encoder::PropagatedEmbeddings::from_final(users, items)
}

pub fn scores(p: &paac::encoder::PropagatedEmbeddings) -> Vec<Vec<f64>> {
    (0..p.num_users())
        .map(|u| {
            (0..p.num_items())
                .map(|i| p.users.row(u).iter().zip(p.items.row(i)).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

/// Compares ranking lists, overall and group metrics against [`oracle`]
/// for every K up to 5 on both held-out splits.
pub fn metric_oracle_check(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(2..=10);
    let n = rng.gen_range(3..=10);
    let ds = random_split_dataset(seed, m, n);
    let p = integer_embeddings(seed ^ 0xabc, m, n);
    let s = scores(&p);
    let pop = build_popularity_index(&ds).unwrap();
    let pct = [20.0, 35.0, 50.0][seed as usize % 3];
    let labels = oracle::popular_labels(pop.counts(), pct);
    for split in [paac::dataset::Split::Test, paac::dataset::Split::Validation] {
        let k_max = n.min(5);
        let Ok(ranking) = paac::eval::rank_split(&p, &ds, &(1..=k_max).collect::<Vec<_>>(), split) else {
            return Err(format!("seed {seed}: ranking failed"));
        };
        // lists equal the exhaustive sort
        for (&u, list) in ranking.users.iter().zip(&ranking.lists) {
            let full = oracle::ranked(&s, &ds, u as usize, split);
            let want: Vec<u32> = full.into_iter().take(k_max).collect();
            if *list != want {
                return Err(format!("seed {seed}: user {u} list {list:?} != {want:?}"));
            }
        }
        for k in 1..=k_max {
            let got = paac::eval::compute_metrics(&ranking, &ds, k).unwrap();
            let want = oracle::metrics(&s, &ds, split, k, &|_| true);
            let same = match want {
                Some(w) => (got.recall, got.hr, got.ndcg, got.users) == (w.recall, w.hr, w.ndcg, w.users),
                None => got.users == 0,
            };
            if !same {
                return Err(format!("seed {seed} {split:?} K={k}: {got:?} vs {want:?}"));
            }
            let g = paac::eval::group_metrics(&ranking, &ds, &pop, k, pct).unwrap();
            for (got, popular) in [(g.popular, true), (g.unpopular, false)] {
                let want = oracle::metrics(&s, &ds, split, k, &|i| labels[i as usize] == popular);
                let same = match (got, want) {
                    (Some(a), Some(b)) => (a.recall, a.hr, a.ndcg, a.users) == (b.recall, b.hr, b.ndcg, b.users),
                    (None, None) => true,
                    _ => false,
                };
                if !same {
                    return Err(format!("seed {seed} {split:?} K={k} popular={popular}: {got:?} vs {want:?}"));
                }
            }
            if let (Some(a), Some(b), Some(d)) = (g.popular, g.unpopular, g.delta) {
                if d.ndcg != a.ndcg - b.ndcg {
                    return Err(format!("seed {seed}: delta mismatch"));
                }
            }
        }
    }
    Ok(())
}

