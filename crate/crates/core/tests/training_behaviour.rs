//! Trainer properties on a small synthetic dataset.

use srsupm::backbone::{EncoderConfig, EncoderKind};
use srsupm::corpus::Splits;
use srsupm::diffcore::{read_checkpoint, write_checkpoint, Tape};
use srsupm::eval::rank_metrics;
use srsupm::matching::MatchIndex;
use srsupm::model::{Model, ModelConfig};
use srsupm::pipeline::{prepare, PrepareConfig};
use srsupm::synth::{generate, SynthConfig};
use srsupm::train::{batch_loss, fit, Adam, TrainConfig, TrainRngs};

fn small_splits() -> (Splits, usize) {
    let out = generate(&SynthConfig {
        n_users: 120,
        n_items: 60,
        n_categories: 8,
        sequence_length: [6, 10],
        window: 6,
        ..SynthConfig::default()
    })
    .unwrap();
    let p = prepare(
        out.interactions,
        &PrepareConfig {
            min_count: 1,
            max_len: 6,
            ..PrepareConfig::default()
        },
    )
    .unwrap();
    let n = p.dataset.catalog.num_items();
    (p.splits, n)
}

fn model_config(kind: EncoderKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            kind,
            d: 8,
            max_len: 6,
            layers: 1,
            heads: 2,
            dropout: 0.2,
        },
        ..ModelConfig::default()
    }
}

fn quick(cfg: TrainConfig) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        max_epochs: 2,
        patience: 5,
        seed: 9,
        ..cfg
    }
}

#[test]
fn fit_is_reproducible_bit_for_bit() {
    let (splits, n) = small_splits();
    let cfg = quick(TrainConfig::default());
    let run = || {
        let m = Model::new(model_config(EncoderKind::SelfAttention), n, 4).unwrap();
        fit(m, &splits.train, &splits.val, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.store(), b.model.store());
}

#[test]
fn stops_after_patience_epochs_without_strict_improvement() {
    let (splits, n) = small_splits();
    let cfg = TrainConfig {
        learning_rate: 1e-12,
        max_epochs: 50,
        patience: 3,
        ..quick(TrainConfig::default())
    };
    let m = Model::new(model_config(EncoderKind::Gru), n, 4).unwrap();
    let r = fit(m, &splits.train, &splits.val, &cfg).unwrap();
    assert_eq!(r.best_epoch, 1);
    assert_eq!(r.log.len(), 1 + 3);
}

#[test]
fn zero_weighted_terms_leave_the_trajectory_unchanged() {
    let (splits, n) = small_splits();
    let base = quick(TrainConfig {
        gamma1: 0.0,
        gamma2: 0.0,
        ..TrainConfig::default()
    });
    let run = |compute_zero_weighted| {
        let m = Model::new(model_config(EncoderKind::SelfAttention), n, 4).unwrap();
        let cfg = TrainConfig {
            compute_zero_weighted,
            ..base.clone()
        };
        fit(m, &splits.train, &splits.val, &cfg).unwrap()
    };
    let (skip, compute) = (run(false), run(true));
    assert!(compute.log.iter().all(|e| e.dec.is_some() && e.mat.is_some()));
    assert!(skip.log.iter().all(|e| e.dec.is_none() && e.mat.is_none()));
    assert_eq!(skip.model.store(), compute.model.store());
}

#[test]
fn one_small_step_lowers_the_batch_objective() {
    let (splits, n) = small_splits();
    let mut model = Model::new(model_config(EncoderKind::SelfAttention), n, 4).unwrap();
    let index = MatchIndex::build(&splits.train, None);
    let cfg = TrainConfig::default();
    let batch: Vec<usize> = (0..64).collect();
    let objective = |model: &Model| {
        let mut tape = Tape::new();
        let p = model.store().bind(&mut tape);
        let mut rngs = TrainRngs::new(1);
        let l = batch_loss(model, &mut tape, &p, &splits.train, &batch, &index, &cfg, &mut rngs).unwrap();
        let value = tape.value(l.total).item();
        let mut grads = tape.backward(l.total).unwrap();
        (value, p.collect_grads(&mut grads, model.store()))
    };
    let (before, grads) = objective(&model);
    let mut adam = Adam::new(model.store());
    adam.step(model.store_mut(), &grads, 1e-3);
    let (after, _) = objective(&model);
    assert!(after < before, "{after} ≥ {before}");
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let (splits, n) = small_splits();
    let cfg = quick(TrainConfig::default());
    let m = Model::new(model_config(EncoderKind::SelfAttention), n, 4).unwrap();
    let r = fit(m, &splits.train, &splits.val, &cfg).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, r.model.store(), &serde_json::json!({})).unwrap();
    let (store, _) = read_checkpoint(buf.as_slice()).unwrap();
    let back = Model::from_store(r.model.config().clone(), n, &store).unwrap();
    assert_eq!(
        rank_metrics(&r.model, &splits.test, &[10, 20], 64).unwrap(),
        rank_metrics(&back, &splits.test, &[10, 20], 64).unwrap()
    );
}

#[test]
fn evaluation_batch_size_does_not_change_metrics() {
    let (splits, n) = small_splits();
    let m = Model::new(model_config(EncoderKind::Gru), n, 4).unwrap();
    let a = rank_metrics(&m, &splits.test, &[10, 20], 7).unwrap();
    let b = rank_metrics(&m, &splits.test, &[10, 20], 1000).unwrap();
    assert_eq!(a, b);
}
