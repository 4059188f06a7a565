//! Gradient of the complete training objective on a toy model with every loss
//! term active, checked against central differences of every parameter.

mod common;

use common::{grad_error, FD_STEP};
use srsupm::backbone::{EncoderConfig, EncoderKind};
use srsupm::corpus::Sample;
use srsupm::diffcore::Tape;
use srsupm::matching::MatchIndex;
use srsupm::model::{MatchNorm, Model, ModelConfig};
use srsupm::train::{batch_loss, TrainConfig, TrainRngs};

fn toy_samples() -> Vec<Sample> {
    let s = |user, history: &[usize], target, level| Sample {
        user,
        history: history.to_vec(),
        target,
        level,
    };
    vec![
        s(0, &[1, 2, 3], 5, 2),
        s(1, &[4, 2], 5, 2),
        s(2, &[6, 7, 8, 1], 3, 3),
        s(0, &[1, 2], 3, 3),
        s(1, &[4], 2, 1),
    ]
}

fn toy_model(kind: EncoderKind, norm: MatchNorm) -> Model {
    let config = ModelConfig {
        encoder: EncoderConfig {
            kind,
            d: 8,
            max_len: 4,
            layers: 1,
            heads: 2,
            dropout: 0.2,
        },
        levels: 3,
        sic_dropout: 0.1,
        match_norm: norm,
        ..ModelConfig::default()
    };
    Model::new(config, 8, 17).unwrap()
}

fn objective(model: &Model, samples: &[Sample], index: &MatchIndex, cfg: &TrainConfig) -> f64 {
    let mut tape = Tape::new();
    let p = model.store().bind(&mut tape);
    let batch: Vec<usize> = (0..samples.len()).collect();
    let mut rngs = TrainRngs::new(5);
    let loss = batch_loss(model, &mut tape, &p, samples, &batch, index, cfg, &mut rngs).unwrap();
    tape.value(loss.total).item()
}

fn check(kind: EncoderKind, norm: MatchNorm) {
    let model = toy_model(kind, norm);
    let samples = toy_samples();
    let index = MatchIndex::build(&samples, None);
    let cfg = TrainConfig {
        gamma1: 0.4,
        gamma2: 0.5,
        aug_dropout: 0.1,
        ..TrainConfig::default()
    };

    let mut tape = Tape::new();
    let p = model.store().bind(&mut tape);
    let batch: Vec<usize> = (0..samples.len()).collect();
    let mut rngs = TrainRngs::new(5);
    let loss = batch_loss(&model, &mut tape, &p, &samples, &batch, &index, &cfg, &mut rngs).unwrap();
    assert!(loss.dec.is_some() && loss.mat.is_some(), "all three terms must be active");
    assert_eq!(loss.skipped, 1);
    let mut grads = tape.backward(loss.total).unwrap();
    let analytic = p.collect_grads(&mut grads, model.store());

    // The key bias only shifts each query's logits by a constant, so its true
    // gradient is zero; the floor in `grad_error` covers it.
    let ids: Vec<_> = model.store().ids().collect();
    for (id, g) in ids.into_iter().zip(&analytic) {
        let name = model.store().iter().find(|(i, _, _)| *i == id).unwrap().1.to_string();
        let mut work = model.clone();
        let n = work.store().get(id).len();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work.store().get(id).data()[j];
            work.store_mut().get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = objective(&work, &samples, &index, &cfg);
            work.store_mut().get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = objective(&work, &samples, &index, &cfg);
            work.store_mut().get_mut(id).data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let err = grad_error(g.data(), &numeric);
        assert!(err < 1e-4, "{kind:?}/{norm:?} {name}: relative error {err:e}");
    }
}

#[test]
fn self_attention_objective_gradient() {
    check(EncoderKind::SelfAttention, MatchNorm::L2);
}

#[test]
fn gru_objective_gradient_with_layernorm_matching() {
    check(EncoderKind::Gru, MatchNorm::Layernorm);
}
