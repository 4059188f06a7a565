//! Mini-batch training with Adam and early stopping on validation Recall@10.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sample;
use crate::diffcore::{DiffError, ParamStore, Tape, Tensor, Var};
use crate::eval;
use crate::matching::MatchIndex;
use crate::model::{self, HeadKind, Model, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training samples")]
    EmptyTrain,
    #[error("no validation samples")]
    EmptyValidation,
    #[error("loss diverged at epoch {epoch}, batch {batch}: rec={rec}, dec={dec:?}, mat={mat:?}")]
    Diverged {
        epoch: usize,
        batch: usize,
        rec: f64,
        dec: Option<f64>,
        mat: Option<f64>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Average each term over the samples contributing to it.
    Mean,
    /// Sum each term over the batch.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Weight of the decomposition loss.
    pub gamma1: f64,
    /// Weight of the matching loss.
    pub gamma2: f64,
    /// Dropout producing the augmented view.
    pub aug_dropout: f64,
    pub seed: u64,
    /// Replaces every sample's shift level during training when set.
    pub fixed_shift_level: Option<usize>,
    pub loss_reduction: LossReduction,
    /// Global gradient-norm ceiling; no clipping when unset.
    pub max_grad_norm: Option<f64>,
    pub eval_batch_size: usize,
    /// Evaluate zero-weighted loss terms anyway (they then add exact zeros).
    pub compute_zero_weighted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 128,
            max_epochs: 200,
            patience: 10,
            gamma1: 0.4,
            gamma2: 0.5,
            aug_dropout: 0.1,
            seed: 42,
            fixed_shift_level: None,
            loss_reduction: LossReduction::Mean,
            max_grad_norm: None,
            eval_batch_size: 256,
            compute_zero_weighted: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be positive".into());
        }
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return bad("gamma1 and gamma2 must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.aug_dropout) {
            return bad(format!("aug_dropout {} outside [0, 1)", self.aug_dropout));
        }
        if model.head == HeadKind::Single && self.gamma1 > 0.0 {
            return bad("the decomposition loss needs the multi-branch head (set gamma1 = 0)".into());
        }
        if let Some(b) = self.fixed_shift_level {
            if !(1..=model.levels).contains(&b) {
                return bad(format!("fixed_shift_level {b} outside 1..={}", model.levels));
            }
        }
        if let Some(c) = self.max_grad_norm {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("max_grad_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    fn wants_dec(&self, model: &Model) -> bool {
        model.config().head == HeadKind::Multi && (self.gamma1 > 0.0 || self.compute_zero_weighted)
    }

    fn wants_mat(&self) -> bool {
        self.gamma2 > 0.0 || self.compute_zero_weighted
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `grads` is indexed like the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their joint Euclidean norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Independent random streams used during training.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub shuffle: ChaCha8Rng,
    /// Dropout in the anchor forward pass.
    pub model: ChaCha8Rng,
    /// Dropout in the partner forward pass.
    pub partner: ChaCha8Rng,
    /// Partner sampling and the augmentation dropout.
    pub matching: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            shuffle: stream(1),
            model: stream(2),
            partner: stream(3),
            matching: stream(4),
        }
    }
}

/// Loss handles and values for one batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub rec: f64,
    pub dec: Option<f64>,
    pub mat: Option<f64>,
    /// Samples without a usable matching partner.
    pub skipped: usize,
}

/// Records the full objective for `batch` (indices into `samples`) on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    params: &crate::diffcore::BoundParams,
    samples: &[Sample],
    batch: &[usize],
    index: &MatchIndex,
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
) -> Result<BatchLoss, TrainError> {
    let hs: Vec<&[usize]> = batch.iter().map(|&i| samples[i].history.as_slice()).collect();
    let targets: Vec<usize> = batch.iter().map(|&i| samples[i].target).collect();
    let fwd = model.forward(tape, params, &hs, true, &mut rngs.model)?;
    let dots = model.candidate_dots(tape, params, fwd.reprs)?;
    let scores = model.scores_from_dots(tape, dots)?;
    let n = batch.len() as f64;
    let sum = cfg.loss_reduction == LossReduction::Sum;

    let mut rec = model::recommendation_loss(tape, scores, &targets)?;
    if sum {
        rec = tape.scale(rec, n);
    }

    let dec = if cfg.wants_dec(model) {
        let levels: Vec<usize> = batch
            .iter()
            .map(|&i| cfg.fixed_shift_level.unwrap_or(samples[i].level))
            .collect();
        let td = model.target_dots(tape, dots, &targets)?;
        let d = model::decomposition_loss(tape, td, &levels)?;
        Some(if sum { tape.scale(d, n) } else { d })
    } else {
        None
    };

    let mut skipped = 0;
    let mat = if cfg.wants_mat() {
        let mut anchors = Vec::new();
        let mut partners = Vec::new();
        for (pos, &i) in batch.iter().enumerate() {
            match index.partner(i, &mut rngs.matching) {
                Some(p) => {
                    anchors.push(pos);
                    partners.push(p);
                }
                None => skipped += 1,
            }
        }
        if anchors.len() >= 2 {
            let m = anchors.len();
            let d = tape.shape(fwd.reprs)[2];
            let ph: Vec<&[usize]> = partners.iter().map(|&p| samples[p].history.as_slice()).collect();
            let pf = model.forward(tape, params, &ph, true, &mut rngs.partner)?;
            let hh = tape.sum(pf.reprs, 1)?;
            let cn = tape.sum(fwd.reprs, 1)?;
            let cn_anchor = tape.embedding(cn, &anchors, &[m])?;
            debug_assert_eq!(tape.shape(cn_anchor), &[m, d]);
            let mq = tape.dropout(cn_anchor, cfg.aug_dropout, &mut rngs.matching, true);
            let l = model::matching_loss(tape, mq, hh, model.config().match_norm)?;
            Some(if sum { tape.scale(l, m as f64) } else { l })
        } else {
            skipped += anchors.len();
            None
        }
    } else {
        None
    };

    let total = model::total_loss(tape, rec, dec, mat, cfg.gamma1, cfg.gamma2)?;
    Ok(BatchLoss {
        total,
        rec: tape.value(rec).item(),
        dec: dec.map(|v| tape.value(v).item()),
        mat: mat.map(|v| tape.value(v).item()),
        skipped,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub rec: f64,
    pub dec: Option<f64>,
    pub mat: Option<f64>,
    pub val_recall10: f64,
    pub skipped: usize,
}

pub fn write_log_csv<W: Write>(mut w: W, log: &[EpochLog]) -> std::io::Result<()> {
    writeln!(w, "epoch,l_rs,l_dec,l_mat,val_recall10,skipped")?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in log {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch,
            r.rec,
            opt(r.dec),
            opt(r.mat),
            r.val_recall10,
            r.skipped
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters of the epoch with the best validation Recall@10.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_recall10: f64,
}

/// Trains `model` on `train`, keeping the parameters of the best validation epoch.
pub fn fit(model: Model, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<FitResult, TrainError> {
    fit_with(model, train, val, cfg, |_| {})
}

/// [`fit`] with a callback invoked after every epoch.
pub fn fit_with(
    mut model: Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitResult, TrainError> {
    cfg.validate(model.config())?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if val.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let index = MatchIndex::build(train, cfg.fixed_shift_level);
    let mut rngs = TrainRngs::new(cfg.seed);
    let mut adam = Adam::new(model.store());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rngs.shuffle);
        let (mut rec_sum, mut dec_sum, mut mat_sum) = (0.0, 0.0, 0.0);
        let (mut dec_n, mut mat_n, mut skipped) = (0usize, 0usize, 0usize);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let params = model.store().bind(&mut tape);
            let loss = batch_loss(&model, &mut tape, &params, train, batch, &index, cfg, &mut rngs)?;
            let total = tape.value(loss.total).item();
            if !total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    rec: loss.rec,
                    dec: loss.dec,
                    mat: loss.mat,
                });
            }
            let mut grads = tape.backward(loss.total)?;
            let mut g = params.collect_grads(&mut grads, model.store());
            if let Some(c) = cfg.max_grad_norm {
                clip_grad_norm(&mut g, c);
            }
            adam.step(model.store_mut(), &g, cfg.learning_rate);
            rec_sum += loss.rec * batch.len() as f64;
            if let Some(d) = loss.dec {
                dec_sum += d * batch.len() as f64;
                dec_n += batch.len();
            }
            if let Some(m) = loss.mat {
                mat_sum += m * batch.len() as f64;
                mat_n += batch.len();
            }
            skipped += loss.skipped;
        }
        let val_recall10 = eval::rank_metrics(&model, val, &[10], cfg.eval_batch_size)?.recall_at(10);
        log.push(EpochLog {
            epoch,
            rec: rec_sum / train.len() as f64,
            dec: (dec_n > 0).then(|| dec_sum / dec_n as f64),
            mat: (mat_n > 0).then(|| mat_sum / mat_n as f64),
            val_recall10,
            skipped,
        });
        on_epoch(log.last().expect("just pushed"));
        if best.as_ref().is_none_or(|(_, b, _)| val_recall10 > *b) {
            best = Some((epoch, val_recall10, model.store().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_recall10, store) = best.expect("at least one epoch");
    model.store_mut().load_from(&store)?;
    Ok(FitResult {
        model,
        log,
        best_epoch,
        best_val_recall10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::vector(vec![1.0, -2.0]));
        let before = s.clone();
        let mut adam = Adam::new(&s);
        adam.step(&mut s, &[Tensor::zeros(&[2])], 0.01);
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.3, -5.0, 1e-3] {
            let mut s = ParamStore::new();
            s.register("w", Tensor::scalar(0.0));
            let mut adam = Adam::new(&s);
            adam.step(&mut s, &[Tensor::scalar(g)], 0.01);
            let moved = s.get(s.id_of("w").unwrap()).item();
            // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε).
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-15, "{moved} vs {expected}");
            assert!((moved.abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].item() - 0.6).abs() < 1e-15);
        assert!((g[1].item() - 0.8).abs() < 1e-15);
    }
}
