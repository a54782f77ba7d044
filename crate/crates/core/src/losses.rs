//! PAAC training objectives and their analytic gradients.
//!
//! Every loss takes an optional gradient sink `(accumulator, weight)`; when
//! present, `weight * dLoss/dθ` is added into the accumulator. Losses over
//! propagated embeddings accumulate into final-embedding gradients, the
//! contrastive losses into view gradients, and [`l2_reg`] directly into the
//! layer-0 tables. [`total_loss`] chains everything back to the parameters.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{MiniBatch, PopularityIndex};
use crate::encoder::{
    make_views_with, propagate, propagate_backward, ContrastViews, EmbeddingState,
    NormalizedAdjacency, PropagatedEmbeddings, ViewPair,
};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, sigmoid, softplus, Matrix};

/// Every scalar of the PAAC objective and its optimisation schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Supervised alignment weight.
    pub lambda1: f64,
    /// Re-weighted contrastive weight.
    pub lambda2: f64,
    /// L2 coefficient on the batch's layer-0 rows.
    pub lambda3: f64,
    /// Weight of the popular-anchor contrastive term.
    pub gamma: f64,
    /// Down-weighting of cross-group negatives.
    pub beta: f64,
    /// Percentage of batch items labelled popular.
    pub x_ratio: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub layers: usize,
    pub lr: f64,
    pub dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Unit-normalize contrastive views (cosine similarity).
    pub normalize_views: bool,
    /// How the alignment and contrastive sums enter the objective.
    pub reduction: Reduction,
}

/// `Sum` uses the alignment and InfoNCE terms as raw sums over users and
/// anchors. `Mean` divides alignment and user contrast by the number of batch
/// users and each item-contrast group by the number of batch items, putting
/// them on the same per-example scale as BPR.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::InvalidArgument(format!("unknown reduction `{other}`"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1e-4,
            gamma: 0.5,
            beta: 0.5,
            x_ratio: 50.0,
            tau: 0.2,
            epsilon: 0.1,
            layers: 2,
            lr: 1e-3,
            dim: 64,
            batch_size: 2048,
            epochs: 100,
            seed: 2024,
            normalize_views: true,
            reduction: Reduction::Mean,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.x_ratio > 0.0 && self.x_ratio < 100.0) {
            return bad(format!("x_ratio must lie in (0, 100), got {}", self.x_ratio));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.dim == 0 || self.batch_size == 0 {
            return bad("dim and batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// Ablation variants: drop one item-contrast group or the alignment term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    NoPopCl,
    NoUnpopCl,
    NoAlignment,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "full" => Ok(Ablation::Full),
            "no-pop-cl" => Ok(Ablation::NoPopCl),
            "no-unpop-cl" => Ok(Ablation::NoUnpopCl),
            "no-alignment" => Ok(Ablation::NoAlignment),
            other => Err(Error::InvalidArgument(format!("unknown ablation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoPopCl => "no-pop-cl",
            Ablation::NoUnpopCl => "no-unpop-cl",
            Ablation::NoAlignment => "no-alignment",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupSplit {
    pub pop: Vec<u32>,
    pub unpop: Vec<u32>,
}

/// Top `ceil(x_ratio% * |items|)` items by (training count desc, index asc)
/// are popular, the rest unpopular. Both sides come back in that order.
pub fn split_by_popularity(items: &[u32], popularity: &PopularityIndex, x_ratio: f64) -> GroupSplit {
    let mut ranked = items.to_vec();
    ranked.sort_unstable_by_key(|&i| popularity.rank(i));
    ranked.dedup();
    let n_pop = ((x_ratio * ranked.len() as f64) / 100.0).ceil() as usize;
    let unpop = ranked.split_off(n_pop.min(ranked.len()));
    GroupSplit { pop: ranked, unpop }
}

/// Gradient with respect to a user table and an item table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrad {
    pub users: Matrix,
    pub items: Matrix,
}

impl EmbeddingGrad {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        Self {
            users: Matrix::zeros(num_users, dim),
            items: Matrix::zeros(num_items, dim),
        }
    }

    pub fn like(prop: &PropagatedEmbeddings) -> Self {
        Self::zeros(prop.num_users(), prop.num_items(), prop.dim())
    }
}

/// Gradients with respect to both views of one table.
#[derive(Debug, Clone)]
pub struct ViewGrad {
    pub v1: Matrix,
    pub v2: Matrix,
}

impl ViewGrad {
    pub fn like(views: &ViewPair) -> Self {
        Self {
            v1: Matrix::zeros(views.v1.rows(), views.v1.cols()),
            v2: Matrix::zeros(views.v2.rows(), views.v2.cols()),
        }
    }
}

/// `-(1/|B|) sum ln sigma(s(u,i) - s(u,j))` over the batch triples.
pub fn bpr_loss(
    batch: &MiniBatch,
    prop: &PropagatedEmbeddings,
    mut grad: Option<(&mut EmbeddingGrad, f64)>,
) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &(u, i, j) in &batch.triples {
        let (zu, hi, hj) = (
            prop.users.row(u as usize),
            prop.items.row(i as usize),
            prop.items.row(j as usize),
        );
        let margin = dot(zu, hi) - dot(zu, hj);
        // -ln sigma(x) = softplus(-x)
        loss += softplus(-margin);
        if let Some((g, w)) = grad.as_mut() {
            // d/dx softplus(-x) = -sigma(-x)
            let c = -sigmoid(-margin) * inv * *w;
            let diff: Vec<f64> = hi.iter().zip(hj).map(|(a, b)| a - b).collect();
            let zu = zu.to_vec();
            axpy(c, &diff, g.users.row_mut(u as usize));
            axpy(c, &zu, g.items.row_mut(i as usize));
            axpy(-c, &zu, g.items.row_mut(j as usize));
        }
    }
    loss * inv
}

/// Sum over batch users of `(1/|I_u|) sum_{i pop, i' unpop} ||f(i) - f(i')||^2`,
/// where `I_u` is the user's positives in this batch split by
/// [`split_by_popularity`] and `f` is the final item embedding.
pub fn supervised_alignment_loss(
    batch: &MiniBatch,
    prop: &PropagatedEmbeddings,
    popularity: &PopularityIndex,
    x_ratio: f64,
    mut grad: Option<(&mut EmbeddingGrad, f64)>,
) -> f64 {
    let d = prop.dim();
    let mut loss = 0.0;
    let mut diff = vec![0.0; d];
    for items in batch.per_user_items.values() {
        let split = split_by_popularity(items, popularity, x_ratio);
        if split.pop.is_empty() || split.unpop.is_empty() {
            continue;
        }
        let inv = 1.0 / items.len() as f64;
        let mut user_loss = 0.0;
        for &p in &split.pop {
            for &q in &split.unpop {
                let (fp, fq) = (prop.items.row(p as usize), prop.items.row(q as usize));
                for k in 0..d {
                    diff[k] = fp[k] - fq[k];
                }
                user_loss += dot(&diff, &diff);
                if let Some((g, w)) = grad.as_mut() {
                    let c = 2.0 * inv * *w;
                    axpy(c, &diff, g.items.row_mut(p as usize));
                    axpy(-c, &diff, g.items.row_mut(q as usize));
                }
            }
        }
        loss += inv * user_loss;
    }
    loss
}

/// Re-weighted InfoNCE over one view pair:
///
/// `-sum_{a in anchors} log( e^{s(a,a)} / (sum_{j in same} e^{s(a,j)} + beta sum_{j in other} e^{s(a,j)}) )`
///
/// with `s(a, j) = v1[a] . v2[j] / tau`. The positive `j = a` sits inside the
/// same-group sum, so every anchor must belong to `same_group`.
pub fn reweighted_infonce(
    anchors: &[u32],
    same_group: &[u32],
    other_group: &[u32],
    views: &ViewPair,
    tau: f64,
    beta: f64,
    grad: Option<(&mut ViewGrad, f64)>,
) -> f64 {
    assert!(tau > 0.0, "tau must be positive");
    if anchors.is_empty() {
        return 0.0;
    }
    let use_other = beta > 0.0 && !other_group.is_empty();
    let log_beta = if use_other { beta.ln() } else { f64::NEG_INFINITY };
    let inv_tau = 1.0 / tau;
    let n_same = same_group.len();
    let candidates: Vec<u32> = if use_other {
        same_group.iter().chain(other_group).copied().collect()
    } else {
        same_group.to_vec()
    };
    let slot_of: HashMap<u32, usize> = same_group.iter().enumerate().map(|(s, &j)| (j, s)).collect();
    let positives: Vec<usize> = anchors
        .iter()
        .map(|a| *slot_of.get(a).expect("anchor must belong to the same-group set"))
        .collect();

    // Row-major anchor rows A (na x d) and transposed candidate rows B^T (d x nc)
    // so every inner loop runs over a long contiguous vector.
    let (na, nc, d) = (anchors.len(), candidates.len(), views.v1.cols());
    let mut a = Vec::with_capacity(na * d);
    for &i in anchors {
        a.extend_from_slice(views.v1.row(i as usize));
    }
    let mut bt = vec![0.0; d * nc];
    for (j, &c) in candidates.iter().enumerate() {
        for (k, &x) in views.v2.row(c as usize).iter().enumerate() {
            bt[k * nc + j] = x;
        }
    }

    // logits, then softmax coefficients in place
    let mut s = vec![0.0; na * nc];
    let mut loss = 0.0;
    for (i, row) in s.chunks_mut(nc).enumerate() {
        for k in 0..d {
            axpy(a[i * d + k] * inv_tau, &bt[k * nc..(k + 1) * nc], row);
        }
        for x in &mut row[n_same..] {
            *x += log_beta;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let positive = row[positives[i]];
        let mut denom = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            denom += *x;
        }
        loss += -(positive - max) + denom.ln();
        let inv = 1.0 / denom;
        for x in row.iter_mut() {
            *x *= inv;
        }
        row[positives[i]] -= 1.0;
    }

    if let Some((g, w)) = grad {
        let scale = w * inv_tau;
        // dA = C B  (as dA[i][k] = C_i . B^T_k) and dB^T = A^T C
        let mut dbt = vec![0.0; d * nc];
        for (i, row) in s.chunks(nc).enumerate() {
            let dst = g.v1.row_mut(anchors[i] as usize);
            for k in 0..d {
                dst[k] += scale * dot(row, &bt[k * nc..(k + 1) * nc]);
                axpy(a[i * d + k], row, &mut dbt[k * nc..(k + 1) * nc]);
            }
        }
        for (j, &c) in candidates.iter().enumerate() {
            let dst = g.v2.row_mut(c as usize);
            for k in 0..d {
                dst[k] += scale * dbt[k * nc + j];
            }
        }
    }
    loss
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ItemContrast {
    pub cl_pop: f64,
    pub cl_unpop: f64,
    pub cl_item: f64,
}

/// Splits the batch items by popularity and combines the two re-weighted
/// contrastive terms as `gamma * cl_pop + (1 - gamma) * cl_unpop`.
/// A term removed by `ablation` is neither computed nor reported.
pub fn cl_item_loss(
    batch: &MiniBatch,
    views: &ContrastViews,
    popularity: &PopularityIndex,
    hp: &Hyperparams,
    ablation: Ablation,
    mut grad: Option<(&mut ViewGrad, f64)>,
) -> ItemContrast {
    let split = split_by_popularity(&batch.batch_items, popularity, hp.x_ratio);
    let mut out = ItemContrast::default();
    if ablation != Ablation::NoPopCl {
        let w = hp.gamma;
        let sink = grad.as_mut().map(|(g, s)| (&mut **g, *s * w));
        out.cl_pop = reweighted_infonce(&split.pop, &split.pop, &split.unpop, &views.items, hp.tau, hp.beta, sink);
    }
    if ablation != Ablation::NoUnpopCl {
        let w = 1.0 - hp.gamma;
        let sink = grad.as_mut().map(|(g, s)| (&mut **g, *s * w));
        out.cl_unpop =
            reweighted_infonce(&split.unpop, &split.unpop, &split.pop, &views.items, hp.tau, hp.beta, sink);
    }
    out.cl_item = hp.gamma * out.cl_pop + (1.0 - hp.gamma) * out.cl_unpop;
    out
}

/// Plain InfoNCE over the batch users.
pub fn cl_user_loss(batch: &MiniBatch, views: &ContrastViews, tau: f64, grad: Option<(&mut ViewGrad, f64)>) -> f64 {
    reweighted_infonce(&batch.batch_users, &batch.batch_users, &[], &views.users, tau, 1.0, grad)
}

/// Users and items (positives and negatives) whose layer-0 rows the batch
/// regularizes.
pub fn batch_entities(batch: &MiniBatch) -> (Vec<u32>, Vec<u32>) {
    let users: BTreeSet<u32> = batch.triples.iter().map(|t| t.0).collect();
    let items: BTreeSet<u32> = batch.triples.iter().flat_map(|t| [t.1, t.2]).collect();
    (users.into_iter().collect(), items.into_iter().collect())
}

/// `lambda3 * sum ||theta||^2` over the batch's layer-0 user and item rows.
pub fn l2_reg(
    state: &EmbeddingState,
    batch: &MiniBatch,
    lambda3: f64,
    mut grad: Option<(&mut EmbeddingGrad, f64)>,
) -> f64 {
    let (users, items) = batch_entities(batch);
    let mut sum = 0.0;
    for (table, rows, is_user) in [(&state.users, &users, true), (&state.items, &items, false)] {
        for &r in rows {
            let row = table.row(r as usize);
            sum += dot(row, row);
            if let Some((g, w)) = grad.as_mut() {
                let dst = if is_user {
                    g.users.row_mut(r as usize)
                } else {
                    g.items.row_mut(r as usize)
                };
                axpy(2.0 * lambda3 * *w, row, dst);
            }
        }
    }
    lambda3 * sum
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub sa: f64,
    pub cl_item: f64,
    pub cl_pop: f64,
    pub cl_unpop: f64,
    pub cl_user: f64,
    pub cl_total: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// First non-finite component, by name.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("rec", self.rec),
            ("sa", self.sa),
            ("cl_pop", self.cl_pop),
            ("cl_unpop", self.cl_unpop),
            ("cl_user", self.cl_user),
            ("reg", self.reg),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.rec += w * other.rec;
        self.sa += w * other.sa;
        self.cl_item += w * other.cl_item;
        self.cl_pop += w * other.cl_pop;
        self.cl_unpop += w * other.cl_unpop;
        self.cl_user += w * other.cl_user;
        self.cl_total += w * other.cl_total;
        self.reg += w * other.reg;
        self.total += w * other.total;
    }
}

/// Gradient of the total loss w.r.t. the layer-0 tables. Only rows listed in
/// `touched_*` can be nonzero: the batch entities and everything within
/// `layers` hops of them in the training graph.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub d_user_base: Matrix,
    pub d_item_base: Matrix,
    pub touched_users: Vec<u32>,
    pub touched_items: Vec<u32>,
}

impl GradientSet {
    pub fn is_finite(&self) -> bool {
        self.d_user_base.is_finite() && self.d_item_base.is_finite()
    }
}

/// Stacked-node neighbourhood of the batch entities within `layers` hops.
fn touched_rows(batch: &MiniBatch, adj: &NormalizedAdjacency, layers: usize) -> (Vec<u32>, Vec<u32>) {
    let m = adj.num_users();
    let (users, items) = batch_entities(batch);
    let mut seen = vec![false; adj.num_nodes()];
    let mut frontier: Vec<usize> = users
        .iter()
        .map(|&u| u as usize)
        .chain(items.iter().map(|&i| m + i as usize))
        .collect();
    frontier.iter().for_each(|&n| seen[n] = true);
    for _ in 0..layers {
        let mut next = Vec::new();
        for &node in &frontier {
            for (c, _) in adj.row(node) {
                if !seen[c] {
                    seen[c] = true;
                    next.push(c);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    let touched_users = (0..m).filter(|&n| seen[n]).map(|n| n as u32).collect();
    let touched_items = (m..adj.num_nodes()).filter(|&n| seen[n]).map(|n| (n - m) as u32).collect();
    (touched_users, touched_items)
}

/// Full multi-task objective
/// `rec + lambda1 * sa + lambda2 * (cl_item + cl_user) / 2 + reg`
/// with gradients chained through view normalization and propagation.
/// `sa` and the contrastive terms are reported after `hp.reduction`.
///
/// Terms whose weight is zero (or that `ablation` removes) are skipped and
/// reported as 0; noise is only drawn when the contrastive term is active.
pub fn total_loss<R: Rng>(
    batch: &MiniBatch,
    state: &EmbeddingState,
    adj: &NormalizedAdjacency,
    popularity: &PopularityIndex,
    hp: &Hyperparams,
    ablation: Ablation,
    rng: &mut R,
) -> (LossBreakdown, GradientSet) {
    let prop = propagate(state, adj, hp.layers);
    let mut final_grad = EmbeddingGrad::like(&prop);
    let mut out = LossBreakdown {
        rec: bpr_loss(batch, &prop, Some((&mut final_grad, 1.0))),
        ..Default::default()
    };

    let lambda1 = if ablation == Ablation::NoAlignment { 0.0 } else { hp.lambda1 };
    let per = |n: usize| match hp.reduction {
        Reduction::Mean if n > 0 => 1.0 / n as f64,
        _ => 1.0,
    };
    let user_scale = per(batch.batch_users.len());
    let item_scale = per(batch.batch_items.len());
    if lambda1 > 0.0 {
        let w = lambda1 * user_scale;
        out.sa = user_scale
            * supervised_alignment_loss(batch, &prop, popularity, hp.x_ratio, Some((&mut final_grad, w)));
    }

    if hp.lambda2 > 0.0 {
        let views = make_views_with(&prop, hp.epsilon, hp.normalize_views, rng);
        let half = 0.5 * hp.lambda2;
        let mut item_grad = ViewGrad::like(&views.items);
        let mut user_grad = ViewGrad::like(&views.users);
        let items = cl_item_loss(batch, &views, popularity, hp, ablation, Some((&mut item_grad, half * item_scale)));
        out.cl_pop = item_scale * items.cl_pop;
        out.cl_unpop = item_scale * items.cl_unpop;
        out.cl_item = item_scale * items.cl_item;
        out.cl_user = user_scale * cl_user_loss(batch, &views, hp.tau, Some((&mut user_grad, half * user_scale)));
        out.cl_total = 0.5 * (out.cl_item + out.cl_user);
        final_grad.items.add_assign(&views.items.backward(&item_grad.v1, &item_grad.v2));
        final_grad.users.add_assign(&views.users.backward(&user_grad.v1, &user_grad.v2));
    }

    let (mut d_user_base, mut d_item_base) =
        propagate_backward(adj, hp.layers, &final_grad.users, &final_grad.items);
    let mut base_grad = EmbeddingGrad::zeros(state.num_users(), state.num_items(), state.dim());
    out.reg = l2_reg(state, batch, hp.lambda3, Some((&mut base_grad, 1.0)));
    d_user_base.add_assign(&base_grad.users);
    d_item_base.add_assign(&base_grad.items);

    out.total = out.rec + lambda1 * out.sa + hp.lambda2 * out.cl_total + out.reg;
    let (touched_users, touched_items) = touched_rows(batch, adj, hp.layers);
    (
        out,
        GradientSet {
            d_user_base,
            d_item_base,
            touched_users,
            touched_items,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_embeddings, make_views};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn prop_from(users: Vec<Vec<f64>>, items: Vec<Vec<f64>>) -> PropagatedEmbeddings {
        PropagatedEmbeddings::from_final(Matrix::from_rows(&users), Matrix::from_rows(&items))
    }

    fn identical_views(rows: usize) -> ViewPair {
        let p = prop_from(vec![vec![1.0, 0.0]; rows], vec![vec![1.0, 0.0]; rows]);
        make_views(&p, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).items
    }

    #[test]
    fn bpr_zero_margin_is_ln2() {
        let p = prop_from(vec![vec![0.3, -0.2]], vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        let b = MiniBatch::from_triples(vec![(0, 0, 1); 3]);
        assert!((bpr_loss(&b, &p, None) - LN2).abs() < 1e-12);
    }

    #[test]
    fn bpr_margin_ln3() {
        let ln3 = 3f64.ln();
        let p = prop_from(vec![vec![1.0, 0.0]], vec![vec![ln3, 0.0], vec![0.0, 0.0]]);
        let b = MiniBatch::from_triples(vec![(0, 0, 1)]);
        assert!((bpr_loss(&b, &p, None) + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn popularity_split_examples() {
        let pop = PopularityIndex::from_counts(vec![5, 4, 3, 2]);
        let s = split_by_popularity(&[0, 1, 2, 3], &pop, 50.0);
        assert_eq!(s.pop, vec![0, 1]);
        assert_eq!(s.unpop, vec![2, 3]);

        // two 4s straddle the boundary: the lower index joins pop
        let pop = PopularityIndex::from_counts(vec![5, 4, 4, 2]);
        let s = split_by_popularity(&[3, 2, 1, 0], &pop, 50.0);
        assert_eq!(s.pop, vec![0, 1]);
        assert_eq!(s.unpop, vec![2, 3]);

        let s = split_by_popularity(&[2], &pop, 50.0);
        assert_eq!(s.pop, vec![2]);
        assert!(s.unpop.is_empty());
    }

    #[test]
    fn alignment_toy_case() {
        let p = prop_from(vec![vec![0.0, 0.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let pop = PopularityIndex::from_counts(vec![9, 1]);
        let b = MiniBatch::from_triples(vec![(0, 0, 1), (0, 1, 0)]);
        assert!((supervised_alignment_loss(&b, &p, &pop, 50.0, None) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_of_identical_items_is_zero() {
        let p = prop_from(vec![vec![0.0, 0.0]; 2], vec![vec![0.4, -0.1]; 3]);
        let pop = PopularityIndex::from_counts(vec![9, 5, 1]);
        let b = MiniBatch::from_triples(vec![(0, 0, 1), (0, 1, 0), (0, 2, 0), (1, 2, 0)]);
        assert_eq!(supervised_alignment_loss(&b, &p, &pop, 50.0, None), 0.0);
    }

    #[test]
    fn infonce_singleton_is_zero() {
        let v = identical_views(3);
        assert!(reweighted_infonce(&[1], &[1], &[], &v, 0.2, 0.5, None).abs() < 1e-15);
        assert!(reweighted_infonce(&[1], &[1], &[0, 2], &v, 0.2, 0.0, None).abs() < 1e-15);
    }

    #[test]
    fn infonce_two_identical_anchors() {
        let v = identical_views(2);
        let l = reweighted_infonce(&[0, 1], &[0, 1], &[], &v, 1.0, 1.0, None);
        assert!((l - 2.0 * LN2).abs() < 1e-10);
    }

    #[test]
    fn gamma_endpoints_select_one_group() {
        let s = init_embeddings(4, 6, 5, 1);
        let p = PropagatedEmbeddings::from_final(s.users, s.items);
        let views = make_views(&p, 0.1, &mut ChaCha8Rng::seed_from_u64(2));
        let pop = PopularityIndex::from_counts(vec![6, 5, 4, 3, 2, 1]);
        let b = MiniBatch::from_triples(vec![(0, 0, 5), (1, 1, 5), (2, 2, 0), (3, 3, 0), (0, 4, 1)]);
        let hp = Hyperparams {
            gamma: 1.0,
            ..Hyperparams::default()
        };
        let c = cl_item_loss(&b, &views, &pop, &hp, Ablation::Full, None);
        assert_eq!(c.cl_item, c.cl_pop);
        let hp = Hyperparams { gamma: 0.0, ..hp };
        let c = cl_item_loss(&b, &views, &pop, &hp, Ablation::Full, None);
        assert_eq!(c.cl_item, c.cl_unpop);
    }

    #[test]
    fn user_contrast_singleton_and_pair() {
        let p = prop_from(vec![vec![1.0, 0.0], vec![1.0, 0.0]], vec![vec![1.0, 0.0]; 2]);
        let views = make_views(&p, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        let single = MiniBatch::from_triples(vec![(0, 0, 1)]);
        assert!(cl_user_loss(&single, &views, 1.0, None).abs() < 1e-15);
        let pair = MiniBatch::from_triples(vec![(0, 0, 1), (1, 1, 0)]);
        assert!((cl_user_loss(&pair, &views, 1.0, None) - 2.0 * LN2).abs() < 1e-10);
    }

    #[test]
    fn l2_examples() {
        let state = EmbeddingState::new(
            Matrix::from_rows(&[vec![3.0, 4.0]]),
            Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]),
        )
        .unwrap();
        let b = MiniBatch::from_triples(vec![(0, 0, 1)]);
        assert!((l2_reg(&state, &b, 1e-4, None) - 0.0025).abs() < 1e-15);
        let zero = EmbeddingState::new(Matrix::zeros(1, 2), Matrix::zeros(2, 2)).unwrap();
        assert_eq!(l2_reg(&zero, &b, 1e-4, None), 0.0);
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        for hp in [
            Hyperparams { gamma: 1.5, ..Default::default() },
            Hyperparams { beta: -0.1, ..Default::default() },
            Hyperparams { tau: 0.0, ..Default::default() },
            Hyperparams { x_ratio: 100.0, ..Default::default() },
            Hyperparams { lambda1: -1.0, ..Default::default() },
        ] {
            assert!(hp.validate().is_err());
        }
    }

    #[test]
    fn ablation_parses_both_spellings() {
        assert_eq!("no_alignment".parse::<Ablation>().unwrap(), Ablation::NoAlignment);
        assert_eq!("no-pop-cl".parse::<Ablation>().unwrap(), Ablation::NoPopCl);
        assert!("nope".parse::<Ablation>().is_err());
    }

    fn random_views(seed: u64, rows: usize) -> ViewPair {
        let s = init_embeddings(rows, rows, 4, seed);
        let p = PropagatedEmbeddings::from_final(s.users, s.items);
        make_views(&p, 0.2, &mut ChaCha8Rng::seed_from_u64(seed + 1)).items
    }

    proptest! {
        #[test]
        fn infonce_is_non_decreasing_in_beta(seed in 0u64..300, b1 in 0.0f64..1.0, b2 in 0.0f64..1.0) {
            let v = random_views(seed, 6);
            let (lo, hi) = if b1 < b2 { (b1, b2) } else { (b2, b1) };
            let a = reweighted_infonce(&[0, 1, 2], &[0, 1, 2], &[3, 4, 5], &v, 0.3, lo, None);
            let b = reweighted_infonce(&[0, 1, 2], &[0, 1, 2], &[3, 4, 5], &v, 0.3, hi, None);
            prop_assert!(a >= 0.0);
            prop_assert!(b >= a - 1e-12);
        }

        #[test]
        fn cl_item_is_affine_in_gamma(seed in 0u64..300, gamma in 0.0f64..1.0) {
            let s = init_embeddings(3, 6, 4, seed);
            let p = PropagatedEmbeddings::from_final(s.users, s.items);
            let views = make_views(&p, 0.1, &mut ChaCha8Rng::seed_from_u64(seed));
            let pop = PopularityIndex::from_counts(vec![9, 7, 5, 4, 2, 1]);
            let b = MiniBatch::from_triples(vec![(0, 0, 1), (1, 2, 1), (2, 3, 0), (0, 4, 2), (1, 5, 0)]);
            let hp = Hyperparams { gamma, ..Hyperparams::default() };
            let c = cl_item_loss(&b, &views, &pop, &hp, Ablation::Full, None);
            let c0 = cl_item_loss(&b, &views, &pop, &Hyperparams { gamma: 0.0, ..hp.clone() }, Ablation::Full, None);
            let expect = c0.cl_item + gamma * (c.cl_pop - c.cl_unpop);
            prop_assert!((c.cl_item - expect).abs() < 1e-12);
        }
    }
}
