//! LightGCN encoder: embedding tables, propagation over the symmetric
//! normalized user–item graph, perturbed contrastive views and scoring.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};

/// Layer-0 user and item embeddings, the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingState {
    pub users: Matrix,
    pub items: Matrix,
}

impl EmbeddingState {
    pub fn new(users: Matrix, items: Matrix) -> Result<Self> {
        if users.cols() != items.cols() {
            return Err(Error::InvalidArgument(format!(
                "user dim {} != item dim {}",
                users.cols(),
                items.cols()
            )));
        }
        Ok(Self { users, items })
    }

    pub fn num_users(&self) -> usize {
        self.users.rows()
    }

    pub fn num_items(&self) -> usize {
        self.items.rows()
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.items.is_finite()
    }
}

/// Xavier-uniform bound with `fan_in = fan_out = dim`.
pub fn xavier_bound(dim: usize) -> f64 {
    (6.0 / (2 * dim) as f64).sqrt()
}

pub fn init_embeddings(num_users: usize, num_items: usize, dim: usize, seed: u64) -> EmbeddingState {
    assert!(num_users >= 1 && num_items >= 1 && dim >= 1, "empty embedding table");
    let bound = xavier_bound(dim);
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |rows| {
        let data = (0..rows * dim).map(|_| dist.sample(&mut rng)).collect();
        Matrix::from_vec(rows, dim, data)
    };
    let users = fill(num_users);
    let items = fill(num_items);
    EmbeddingState { users, items }
}

/// Symmetric normalized adjacency of the bipartite training graph, stored as
/// CSR over `M + N` nodes (users first). Edge `(u, i)` has weight
/// `1 / sqrt(deg(u) deg(i))`.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    num_users: usize,
    num_items: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    user_degree: Vec<usize>,
    item_degree: Vec<usize>,
}

impl NormalizedAdjacency {
    /// Builds from raw edges; duplicate edges must already be removed.
    pub fn from_edges(num_users: usize, num_items: usize, edges: &[(u32, u32)]) -> Self {
        let mut user_degree = vec![0usize; num_users];
        let mut item_degree = vec![0usize; num_items];
        for &(u, i) in edges {
            user_degree[u as usize] += 1;
            item_degree[i as usize] += 1;
        }
        let nodes = num_users + num_items;
        let mut neighbors: Vec<Vec<(u32, f64)>> = vec![Vec::new(); nodes];
        for &(u, i) in edges {
            let w = 1.0 / ((user_degree[u as usize] * item_degree[i as usize]) as f64).sqrt();
            let item_node = num_users + i as usize;
            neighbors[u as usize].push((item_node as u32, w));
            neighbors[item_node].push((u, w));
        }
        let mut row_ptr = Vec::with_capacity(nodes + 1);
        let mut cols = Vec::with_capacity(2 * edges.len());
        let mut vals = Vec::with_capacity(2 * edges.len());
        row_ptr.push(0);
        for mut row in neighbors {
            row.sort_unstable_by_key(|&(c, _)| c);
            for (c, w) in row {
                cols.push(c);
                vals.push(w);
            }
            row_ptr.push(cols.len());
        }
        Self {
            num_users,
            num_items,
            row_ptr,
            cols,
            vals,
            user_degree,
            item_degree,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn user_degree(&self) -> &[usize] {
        &self.user_degree
    }

    pub fn item_degree(&self) -> &[usize] {
        &self.item_degree
    }

    /// `(column, weight)` entries of stacked-node row `node`.
    pub fn row(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[node]..self.row_ptr[node + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.vals[span])
            .map(|(&c, &w)| (c as usize, w))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(col, _)| col == c).map_or(0.0, |(_, w)| w)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.num_nodes();
        let mut out = vec![vec![0.0; n]; n];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, w) in self.row(r) {
                row[c] = w;
            }
        }
        out
    }

    /// `A · x` for a stacked `(M + N) × D` matrix.
    pub fn spmm(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.rows(), self.num_nodes(), "spmm shape mismatch");
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..self.num_nodes() {
            let dst = out.row_mut(r);
            for (c, w) in self.row(r) {
                axpy(w, x.row(c), dst);
            }
        }
        out
    }
}

pub fn build_adjacency(dataset: &InteractionDataset) -> Result<NormalizedAdjacency> {
    if dataset.train().is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    Ok(NormalizedAdjacency::from_edges(
        dataset.num_users(),
        dataset.num_items(),
        dataset.train(),
    ))
}

/// Output of [`propagate`]: layer-averaged embeddings plus every layer.
#[derive(Debug, Clone)]
pub struct PropagatedEmbeddings {
    pub users: Matrix,
    pub items: Matrix,
    layers: Vec<Matrix>,
}

impl PropagatedEmbeddings {
    /// Wraps final embeddings that did not come from propagation
    /// (tests, imported embeddings).
    pub fn from_final(users: Matrix, items: Matrix) -> Self {
        let stacked = users.vstack(&items);
        Self {
            users,
            items,
            layers: vec![stacked],
        }
    }

    /// Stacked `(M + N) × D` outputs of layers `0..=L`.
    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn num_users(&self) -> usize {
        self.users.rows()
    }

    pub fn num_items(&self) -> usize {
        self.items.rows()
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    /// Multiplies every final embedding by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut users = self.users.clone();
        let mut items = self.items.clone();
        users.scale(alpha);
        items.scale(alpha);
        Self::from_final(users, items)
    }
}

/// `e(0) = [Z; H]`, `e(l+1) = A e(l)`, final = mean of `e(0..=L)`.
pub fn propagate(state: &EmbeddingState, adj: &NormalizedAdjacency, layers: usize) -> PropagatedEmbeddings {
    assert_eq!(state.num_users(), adj.num_users(), "user count mismatch");
    assert_eq!(state.num_items(), adj.num_items(), "item count mismatch");
    let base = state.users.vstack(&state.items);
    if layers == 0 {
        return PropagatedEmbeddings {
            users: state.users.clone(),
            items: state.items.clone(),
            layers: vec![base],
        };
    }
    let mut all = Vec::with_capacity(layers + 1);
    let mut sum = base.clone();
    all.push(base);
    for _ in 0..layers {
        let next = adj.spmm(all.last().expect("layer 0 present"));
        sum.add_assign(&next);
        all.push(next);
    }
    sum.scale(1.0 / (layers + 1) as f64);
    let (users, items) = sum.split_rows(state.num_users());
    PropagatedEmbeddings {
        users,
        items,
        layers: all,
    }
}

/// Pulls gradients w.r.t. the final embeddings back to the layer-0 tables.
/// `A` is symmetric, so the adjoint of `e -> mean_l A^l e` is itself.
pub fn propagate_backward(
    adj: &NormalizedAdjacency,
    layers: usize,
    grad_users: &Matrix,
    grad_items: &Matrix,
) -> (Matrix, Matrix) {
    if layers == 0 {
        return (grad_users.clone(), grad_items.clone());
    }
    let mut current = grad_users.vstack(grad_items);
    let mut acc = current.clone();
    for _ in 0..layers {
        current = adj.spmm(&current);
        acc.add_assign(&current);
    }
    acc.scale(1.0 / (layers + 1) as f64);
    acc.split_rows(adj.num_users())
}

/// Two perturbed copies of one embedding table.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub v1: Matrix,
    pub v2: Matrix,
    /// Row norms of the perturbed rows before normalization.
    norms1: Vec<f64>,
    norms2: Vec<f64>,
    normalized: bool,
}

impl ViewPair {
    fn build<R: Rng>(source: &Matrix, epsilon: f64, normalize: bool, rng: &mut R) -> Self {
        let (v1, norms1) = perturb(source, epsilon, normalize, rng);
        let (v2, norms2) = perturb(source, epsilon, normalize, rng);
        Self {
            v1,
            v2,
            norms1,
            norms2,
            normalized: normalize,
        }
    }

    /// Chains gradients w.r.t. both views back to the unperturbed rows.
    /// The noise draw is a constant of the step; `sign(e)` has zero
    /// derivative almost everywhere.
    pub fn backward(&self, grad_v1: &Matrix, grad_v2: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.v1.rows(), self.v1.cols());
        for (view, norms, grad) in [(&self.v1, &self.norms1, grad_v1), (&self.v2, &self.norms2, grad_v2)] {
            for r in 0..view.rows() {
                let g = grad.row(r);
                if g.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let dst = out.row_mut(r);
                if !self.normalized {
                    axpy(1.0, g, dst);
                    continue;
                }
                let n = norms[r];
                if n == 0.0 {
                    continue;
                }
                let v = view.row(r);
                let gv = dot(g, v);
                for k in 0..dst.len() {
                    dst[k] += (g[k] - gv * v[k]) / n;
                }
            }
        }
        out
    }
}

fn perturb<R: Rng>(source: &Matrix, epsilon: f64, normalize: bool, rng: &mut R) -> (Matrix, Vec<f64>) {
    let d = source.cols();
    let mut out = source.clone();
    let mut norms = Vec::with_capacity(source.rows());
    let mut noise = vec![0.0; d];
    for r in 0..source.rows() {
        noise.iter_mut().for_each(|x| *x = rng.gen::<f64>());
        let nn = dot(&noise, &noise).sqrt();
        let row = out.row_mut(r);
        if nn > 0.0 && epsilon > 0.0 {
            for (x, &z) in row.iter_mut().zip(&noise) {
                // sign(0) = 0 leaves exact zeros untouched
                let s = if *x > 0.0 {
                    1.0
                } else if *x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *x += epsilon * s * (z / nn);
            }
        }
        let n = dot(row, row).sqrt();
        if normalize && n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
        norms.push(n);
    }
    (out, norms)
}

/// Noise-perturbed views of the propagated embeddings for contrastive losses.
#[derive(Debug, Clone)]
pub struct ContrastViews {
    pub users: ViewPair,
    pub items: ViewPair,
    pub epsilon: f64,
}

/// Each row `e` of each view becomes `normalize(e + eps * sign(e) * delta)`
/// with `delta` a fresh non-negative unit vector (normalized uniforms).
pub fn make_views<R: Rng>(prop: &PropagatedEmbeddings, epsilon: f64, rng: &mut R) -> ContrastViews {
    make_views_with(prop, epsilon, true, rng)
}

/// As [`make_views`]; `normalize = false` keeps raw perturbed rows so the
/// contrastive similarity becomes a plain dot product.
pub fn make_views_with<R: Rng>(
    prop: &PropagatedEmbeddings,
    epsilon: f64,
    normalize: bool,
    rng: &mut R,
) -> ContrastViews {
    assert!(epsilon >= 0.0, "epsilon must be non-negative");
    let users = ViewPair::build(&prop.users, epsilon, normalize, rng);
    let items = ViewPair::build(&prop.items, epsilon, normalize, rng);
    ContrastViews { users, items, epsilon }
}

pub fn score(prop: &PropagatedEmbeddings, user: u32, item: u32) -> Result<f64> {
    let (u, i) = (user as usize, item as usize);
    if u >= prop.num_users() {
        return Err(Error::IndexOutOfRange {
            what: "user",
            index: u,
            size: prop.num_users(),
        });
    }
    if i >= prop.num_items() {
        return Err(Error::IndexOutOfRange {
            what: "item",
            index: i,
            size: prop.num_items(),
        });
    }
    Ok(dot(prop.users.row(u), prop.items.row(i)))
}

const EMB_MAGIC: &str = "PAAC-EMB v1";

fn header(users: &Matrix, items: &Matrix) -> String {
    format!("{EMB_MAGIC} {} {} {}\n", users.rows(), items.rows(), users.cols())
}

/// Header line `PAAC-EMB v1 M N D`, then little-endian f32 rows, users first.
pub fn write_embeddings(path: impl AsRef<Path>, users: &Matrix, items: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let mut buf = header(users, items).into_bytes();
    for &v in users.as_slice().iter().chain(items.as_slice()) {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Same header, then one whitespace-separated row per line.
pub fn write_embeddings_text(path: impl AsRef<Path>, users: &Matrix, items: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut emit = || -> std::io::Result<()> {
        f.write_all(header(users, items).as_bytes())?;
        for m in [users, items] {
            for r in 0..m.rows() {
                let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:.8e}")).collect();
                writeln!(f, "{}", line.join(" "))?;
            }
        }
        f.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<(Matrix, Matrix)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing embedding header".into()))?;
    let head = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let dims = head
        .strip_prefix(EMB_MAGIC)
        .ok_or_else(|| Error::Format(format!("bad embedding header `{head}`")))?;
    let dims: Vec<usize> = dims
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format(format!("bad embedding header `{head}`")))?;
    let [m, n, d] = dims[..] else {
        return Err(Error::Format(format!("bad embedding header `{head}`")));
    };
    let body = &bytes[nl + 1..];
    if body.len() != (m + n) * d * 4 {
        return Err(Error::Format(format!(
            "expected {} payload bytes, found {}",
            (m + n) * d * 4,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let (u, i) = values.split_at(m * d);
    Ok((Matrix::from_vec(m, d, u.to_vec()), Matrix::from_vec(n, d, i.to_vec())))
}
