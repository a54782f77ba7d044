mod common;

use common::{hp_small, random_instance};
use paac::dataset::{build_popularity_index, build_unbiased_split, sample_epoch_batches, SplitConfig};
use paac::encoder::build_adjacency;
use paac::losses::{Ablation, Hyperparams};
use paac::synthetic::{generate, SyntheticConfig};
use paac::trainer::{fit, fit_with_log, load_checkpoint, save_checkpoint, train_step, AdamState, StepRecord, TrainConfig, TrainLog};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_dataset() -> paac::dataset::InteractionDataset {
    let raw = generate(&SyntheticConfig {
        users: 100,
        items: 50,
        mean_per_user: 10,
        min_per_user: 5,
        min_per_item: 5,
        topics: 5,
        seed: 21,
        ..SyntheticConfig::default()
    })
    .unwrap();
    build_unbiased_split(&raw, SplitConfig::default(), 4).unwrap()
}

fn quick(hp: Hyperparams) -> TrainConfig {
    TrainConfig {
        hp: Hyperparams {
            dim: 8,
            batch_size: 128,
            lr: 0.01,
            ..hp
        },
        ..TrainConfig::default()
    }
}

/// Runs `steps` steps from a fresh Adam state with a per-step RNG so runs can
/// be split at any point.
fn run_steps(
    inst: &common::Instance,
    state: &mut paac::encoder::EmbeddingState,
    adam: &mut AdamState,
    range: std::ops::Range<u64>,
) {
    let adj = build_adjacency(&inst.dataset).unwrap();
    let hp = Hyperparams {
        lr: 0.05,
        ..hp_small(1)
    };
    for step in range {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + step);
        train_step(state, adam, &adj, &inst.batch, &inst.popularity, &hp, Ablation::Full, &mut rng).unwrap();
    }
}

#[test]
fn ten_steps_are_bitwise_reproducible() {
    let inst = random_instance(3, 12, 10, 4);
    let mut a = inst.state.clone();
    let mut adam_a = AdamState::new(&a);
    run_steps(&inst, &mut a, &mut adam_a, 0..10);
    let mut b = inst.state.clone();
    let mut adam_b = AdamState::new(&b);
    run_steps(&inst, &mut b, &mut adam_b, 0..10);
    assert_eq!(a, b);
    assert_ne!(a, inst.state);
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted() {
    let inst = random_instance(5, 12, 10, 4);
    let mut full = inst.state.clone();
    let mut adam_full = AdamState::new(&full);
    run_steps(&inst, &mut full, &mut adam_full, 0..10);

    let mut half = inst.state.clone();
    let mut adam_half = AdamState::new(&half);
    run_steps(&inst, &mut half, &mut adam_half, 0..5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &half, &adam_half).unwrap();
    let (mut resumed, mut adam_resumed) = load_checkpoint(&path, Some((12, 10, 4))).unwrap();
    assert_eq!(resumed, half);
    assert_eq!(adam_resumed, adam_half);
    run_steps(&inst, &mut resumed, &mut adam_resumed, 5..10);
    assert_eq!(resumed, full);
    assert_eq!(adam_resumed, adam_full);

    assert!(matches!(load_checkpoint(&path, Some((12, 10, 5))), Err(paac::Error::Format(_))));
}

#[test]
fn fit_is_reproducible() {
    let ds = tiny_dataset();
    let cfg = TrainConfig {
        hp: Hyperparams {
            epochs: 3,
            ..quick(Hyperparams::default()).hp
        },
        ..TrainConfig::default()
    };
    let a = fit(&ds, &cfg).unwrap();
    let b = fit(&ds, &cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.state, b.state);
}

#[test]
fn best_epoch_has_the_highest_validation_metric() {
    let ds = tiny_dataset();
    let mut cfg = quick(Hyperparams {
        epochs: 8,
        ..Hyperparams::default()
    });
    cfg.patience = 2;
    let out = fit(&ds, &cfg).unwrap();
    let r = &out.report;
    let best = r
        .epochs
        .iter()
        .filter_map(|e| e.val_ndcg20)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best_val_ndcg20, Some(best));
    let at_best = r.epochs.iter().find(|e| e.epoch == r.best_epoch).unwrap();
    assert_eq!(at_best.val_ndcg20, Some(best));
    // the returned state is the best one
    let adj = build_adjacency(&ds).unwrap();
    let v = paac::trainer::validation_ndcg(&out.state, &adj, &ds, cfg.hp.layers).unwrap();
    assert_eq!(v, best);
}

#[derive(Default)]
struct Collect(Vec<StepRecord>);

impl TrainLog for Collect {
    fn step(&mut self, record: &StepRecord) {
        self.0.push(record.clone());
    }
}

#[test]
fn no_alignment_zeroes_sa_every_step() {
    let ds = tiny_dataset();
    let mut cfg = quick(Hyperparams {
        epochs: 2,
        lambda1: 5.0,
        ..Hyperparams::default()
    });
    cfg.ablation = Ablation::NoAlignment;
    let mut log = Collect::default();
    fit_with_log(&ds, &cfg, &mut log).unwrap();
    assert!(!log.0.is_empty());
    assert!(log.0.iter().all(|r| r.sa == 0.0));
    assert!(log.0.iter().any(|r| r.cl_pop > 0.0 && r.cl_unpop > 0.0));
}

#[test]
fn loss_trend_is_non_increasing() {
    let ds = tiny_dataset();
    let mut cfg = quick(Hyperparams {
        epochs: 20,
        ..Hyperparams::default()
    });
    cfg.patience = 1000;
    let out = fit(&ds, &cfg).unwrap();
    let totals: Vec<f64> = out.report.epochs.iter().map(|e| e.loss.total).collect();
    assert_eq!(totals.len(), 20);
    let smooth: Vec<f64> = totals.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for w in smooth.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-3), "moving average rose: {smooth:?}");
    }
    assert!(smooth.last().unwrap() < &(smooth[0] * 0.98), "{smooth:?}");
}

#[test]
fn every_triple_is_seen_each_epoch() {
    let ds = tiny_dataset();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches: Vec<_> = sample_epoch_batches(&ds, 64, &mut rng)
        .unwrap()
        .collect::<paac::Result<_>>()
        .unwrap();
    let mut seen: Vec<(u32, u32)> = batches.iter().flat_map(|b| b.triples.iter().map(|t| (t.0, t.1))).collect();
    seen.sort_unstable();
    assert_eq!(seen, ds.train().to_vec());
    let pop = build_popularity_index(&ds).unwrap();
    assert_eq!(pop.num_items(), ds.num_items());
}
