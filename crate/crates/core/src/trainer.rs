//! Training loop: Adam on the touched embedding rows, periodic validation,
//! early stopping on validation NDCG@20 and binary checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_popularity_index, sample_epoch_batches, InteractionDataset, PopularityIndex, Split};
use crate::encoder::{build_adjacency, init_embeddings, propagate, EmbeddingState, NormalizedAdjacency};
use crate::error::{Error, Result};
use crate::eval;
use crate::linalg::Matrix;
use crate::losses::{total_loss, Ablation, GradientSet, Hyperparams, LossBreakdown};

/// Validation metric cutoff used for model selection.
pub const SELECTION_K: usize = 20;

/// Adam with per-row step counters: a row's moments and bias correction
/// advance only on steps where the row receives a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of optimizer steps taken.
    pub step: u64,
    m_users: Matrix,
    v_users: Matrix,
    m_items: Matrix,
    v_items: Matrix,
    t_users: Vec<u64>,
    t_items: Vec<u64>,
}

impl AdamState {
    pub fn new(state: &EmbeddingState) -> Self {
        let d = state.dim();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m_users: Matrix::zeros(state.num_users(), d),
            v_users: Matrix::zeros(state.num_users(), d),
            m_items: Matrix::zeros(state.num_items(), d),
            v_items: Matrix::zeros(state.num_items(), d),
            t_users: vec![0; state.num_users()],
            t_items: vec![0; state.num_items()],
        }
    }

    /// Applies one bias-corrected update to every touched row.
    pub fn apply(&mut self, state: &mut EmbeddingState, grads: &GradientSet, lr: f64) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let update = |params: &mut Matrix, m: &mut Matrix, v: &mut Matrix, t: &mut [u64], g: &Matrix, rows: &[u32]| {
            for &r in rows {
                let r = r as usize;
                t[r] += 1;
                let bc1 = 1.0 - b1.powi(t[r] as i32);
                let bc2 = 1.0 - b2.powi(t[r] as i32);
                let (p, m, v, g) = (params.row_mut(r), m.row_mut(r), v.row_mut(r), g.row(r));
                for k in 0..p.len() {
                    m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                    v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                    let m_hat = m[k] / bc1;
                    let v_hat = v[k] / bc2;
                    p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        };
        update(
            &mut state.users,
            &mut self.m_users,
            &mut self.v_users,
            &mut self.t_users,
            &grads.d_user_base,
            &grads.touched_users,
        );
        update(
            &mut state.items,
            &mut self.m_items,
            &mut self.v_items,
            &mut self.t_items,
            &grads.d_item_base,
            &grads.touched_items,
        );
    }

    pub fn is_finite(&self) -> bool {
        [&self.m_users, &self.v_users, &self.m_items, &self.v_items]
            .iter()
            .all(|m| m.is_finite())
    }
}

/// One optimisation step on `batch`. Fails without touching the parameters
/// if any loss component or gradient is non-finite.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng>(
    state: &mut EmbeddingState,
    adam: &mut AdamState,
    adj: &NormalizedAdjacency,
    batch: &crate::dataset::MiniBatch,
    popularity: &PopularityIndex,
    hp: &Hyperparams,
    ablation: Ablation,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let (losses, grads) = total_loss(batch, state, adj, popularity, hp, ablation, rng);
    if let Some(component) = losses.non_finite_component() {
        return Err(Error::NonFiniteLoss { component });
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteLoss { component: "gradient" });
    }
    adam.apply(state, &grads, hp.lr);
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hp: Hyperparams,
    pub ablation: Ablation,
    /// Validate every this many epochs.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Emit a step record every this many steps.
    pub log_every: usize,
    /// Where to write `best.ckpt`, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hp: Hyperparams::default(),
            ablation: Ablation::Full,
            eval_every: 1,
            patience: 10,
            log_every: 1,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn max_epochs(&self) -> usize {
        self.hp.epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.patience == 0 || self.eval_every == 0 || self.log_every == 0 {
            return Err(Error::InvalidArgument(
                "patience, eval_every and log_every must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean of the per-step breakdowns.
    pub loss: LossBreakdown,
    pub val_ndcg20: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_val_ndcg20: Option<f64>,
    pub stop_reason: StopReason,
    pub steps: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub rec: f64,
    pub sa: f64,
    pub cl_pop: f64,
    pub cl_unpop: f64,
    pub cl_user: f64,
    pub reg: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: u64, epoch: usize, l: &LossBreakdown) -> Self {
        Self {
            step,
            epoch,
            rec: l.rec,
            sa: l.sa,
            cl_pop: l.cl_pop,
            cl_unpop: l.cl_unpop,
            cl_user: l.cl_user,
            reg: l.reg,
            total: l.total,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_ndcg20: Option<f64>,
    pub best: bool,
}

/// Receives training progress.
pub trait TrainLog {
    fn step(&mut self, _record: &StepRecord) {}
    fn epoch(&mut self, _record: &EpochRecord) {}
}

pub struct NoLog;

impl TrainLog for NoLog {}

/// One JSON object per line.
pub struct JsonLinesLog<W: Write> {
    out: W,
}

impl<W: Write> JsonLinesLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    fn emit<T: Serialize>(&mut self, value: &T) {
        if let Ok(line) = serde_json::to_string(value) {
            if let Err(e) = writeln!(self.out, "{line}") {
                log::warn!("dropping training log line: {e}");
            }
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> TrainLog for JsonLinesLog<W> {
    fn step(&mut self, record: &StepRecord) {
        self.emit(record);
    }

    fn epoch(&mut self, record: &EpochRecord) {
        self.emit(record);
    }
}

/// Patience-based stopping on a metric where larger is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> Verdict {
        match self.best {
            Some((_, best)) if metric <= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Continue
                }
            }
            _ => {
                self.best = Some((epoch, metric));
                self.stale = 0;
                Verdict::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Validation NDCG@20 with full ranking over items outside the user's
/// training set.
pub fn validation_ndcg(
    state: &EmbeddingState,
    adj: &NormalizedAdjacency,
    dataset: &InteractionDataset,
    layers: usize,
) -> Result<f64> {
    let prop = propagate(state, adj, layers);
    let ranking = eval::rank_split(&prop, dataset, &[SELECTION_K], Split::Validation)?;
    Ok(eval::compute_metrics(&ranking, dataset, SELECTION_K)?.ndcg)
}

pub struct FitOutcome {
    pub report: TrainReport,
    /// Parameters from the best validation epoch (or the last epoch when
    /// there is no validation split).
    pub state: EmbeddingState,
    pub adam: AdamState,
}

pub fn fit(dataset: &InteractionDataset, config: &TrainConfig) -> Result<FitOutcome> {
    fit_with_log(dataset, config, &mut NoLog)
}

// Keeps the training stream independent of the embedding init stream.
const TRAIN_STREAM: u64 = 0x7061_6163;

pub fn fit_with_log(dataset: &InteractionDataset, config: &TrainConfig, sink: &mut dyn TrainLog) -> Result<FitOutcome> {
    config.validate()?;
    let hp = &config.hp;
    let popularity = build_popularity_index(dataset)?;
    let adj = build_adjacency(dataset)?;
    let mut state = init_embeddings(dataset.num_users(), dataset.num_items(), hp.dim, hp.seed);
    let mut adam = AdamState::new(&state);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ TRAIN_STREAM);
    let validate = !dataset.validation().is_empty();

    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<(EmbeddingState, AdamState)> = None;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs() {
        let mut mean = LossBreakdown::default();
        let mut count = 0usize;
        let batches = sample_epoch_batches(dataset, hp.batch_size, &mut rng)?.collect::<Result<Vec<_>>>()?;
        for batch in &batches {
            let losses = train_step(&mut state, &mut adam, &adj, batch, &popularity, hp, config.ablation, &mut rng)?;
            if adam.step.is_multiple_of(config.log_every as u64) {
                sink.step(&StepRecord::new(adam.step, epoch, &losses));
            }
            mean.add_scaled(&losses, 1.0);
            count += 1;
        }
        if count > 0 {
            let mut scaled = LossBreakdown::default();
            scaled.add_scaled(&mean, 1.0 / count as f64);
            mean = scaled;
        }

        let mut val = None;
        let mut verdict = Verdict::Continue;
        if validate && epoch % config.eval_every == 0 {
            let ndcg = validation_ndcg(&state, &adj, dataset, hp.layers)?;
            val = Some(ndcg);
            verdict = stopper.observe(epoch, ndcg);
            if verdict == Verdict::Improved {
                if let Some(dir) = &config.checkpoint_dir {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    save_checkpoint(dir.join("best.ckpt"), &state, &adam)?;
                }
                best = Some((state.clone(), adam.clone()));
            }
            log::info!("epoch {epoch}: loss {:.5} val ndcg@20 {ndcg:.5}", mean.total);
        } else {
            log::info!("epoch {epoch}: loss {:.5}", mean.total);
        }
        sink.epoch(&EpochRecord {
            epoch,
            val_ndcg20: val,
            best: verdict == Verdict::Improved,
        });
        epochs.push(EpochSummary {
            epoch,
            loss: mean,
            val_ndcg20: val,
        });
        if verdict == Verdict::Stop {
            stop_reason = StopReason::EarlyStopped;
            break;
        }
    }

    let (best_epoch, best_val) = match stopper.best() {
        Some((e, v)) => (e, Some(v)),
        None => (epochs.len(), None),
    };
    let (state, adam) = best.unwrap_or((state, adam));
    Ok(FitOutcome {
        report: TrainReport {
            epochs,
            best_epoch,
            best_val_ndcg20: best_val,
            stop_reason,
            steps: adam.step,
        },
        state,
        adam,
    })
}

const CKPT_MAGIC: &str = "PAAC-CKPT v1";

/// Header line `PAAC-CKPT v1 M N D`, then little-endian: the optimizer step
/// (u64), parameter and moment blocks (f64: users, items, m/v users,
/// m/v items), and per-row step counters (u64: users, items).
pub fn save_checkpoint(path: impl AsRef<Path>, state: &EmbeddingState, adam: &AdamState) -> Result<()> {
    let path = path.as_ref();
    let (m, n, d) = (state.num_users(), state.num_items(), state.dim());
    let mut buf = format!("{CKPT_MAGIC} {m} {n} {d}\n").into_bytes();
    buf.extend_from_slice(&adam.step.to_le_bytes());
    for block in [
        &state.users,
        &state.items,
        &adam.m_users,
        &adam.v_users,
        &adam.m_items,
        &adam.v_items,
    ] {
        for v in block.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for t in adam.t_users.iter().chain(&adam.t_items) {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, optionally requiring dimensions `(M, N, D)`.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<(usize, usize, usize)>,
) -> Result<(EmbeddingState, AdamState)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing checkpoint header".into()))?;
    let head = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let dims: Vec<usize> = head
        .strip_prefix(CKPT_MAGIC)
        .ok_or_else(|| Error::Format(format!("not a checkpoint: `{head}`")))?
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format(format!("bad checkpoint header `{head}`")))?;
    let [m, n, d] = dims[..] else {
        return Err(Error::Format(format!("bad checkpoint header `{head}`")));
    };
    if let Some(want) = expected {
        if want != (m, n, d) {
            return Err(Error::Format(format!(
                "checkpoint has dims (M={m}, N={n}, D={d}), expected (M={}, N={}, D={})",
                want.0, want.1, want.2
            )));
        }
    }
    let body = &bytes[nl + 1..];
    let want_len = 8 + 8 * 3 * (m + n) * d + 8 * (m + n);
    if body.len() != want_len {
        return Err(Error::Format(format!(
            "checkpoint payload is {} bytes, expected {want_len}",
            body.len()
        )));
    }
    let mut words = body.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("8-byte chunk"));
    let step = u64::from_le_bytes(words.next().expect("length checked"));
    let mut block = |rows: usize| {
        let data = (&mut words).take(rows * d).map(f64::from_le_bytes).collect();
        Matrix::from_vec(rows, d, data)
    };
    let users = block(m);
    let items = block(n);
    let m_users = block(m);
    let v_users = block(m);
    let m_items = block(n);
    let v_items = block(n);
    let t_users = (&mut words).take(m).map(u64::from_le_bytes).collect();
    let t_items = words.take(n).map(u64::from_le_bytes).collect();
    let state = EmbeddingState::new(users, items)?;
    let mut adam = AdamState::new(&state);
    adam.step = step;
    adam.m_users = m_users;
    adam.v_users = v_users;
    adam.m_items = m_items;
    adam.v_items = v_items;
    adam.t_users = t_users;
    adam.t_items = t_items;
    Ok((state, adam))
}
