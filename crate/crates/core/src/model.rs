//! The shift-aware head on top of a backbone: V residual branches, the shift
//! distribution over branches, candidate scoring, and the three training losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{linear, uniform, Encoder, EncoderConfig};
use crate::diffcore::{BoundParams, DiffError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("no in-batch negatives: matching needs at least 2 pairs, got {0}")]
    NoNegatives(usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Branch layout of the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One branch per shift level.
    Multi,
    /// A single branch; scores are plain dot products.
    Single,
}

/// How branch representations combine into a candidate score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// Weight branches by the per-candidate shift distribution.
    ShiftWeighted,
    /// Average the branches.
    Mean,
}

/// Normalization applied to both views before the matching similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchNorm {
    L2,
    Layernorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Number of shift levels V.
    pub levels: usize,
    pub head: HeadKind,
    pub scoring: Scoring,
    /// Dropout inside each branch.
    pub sic_dropout: f64,
    pub match_norm: MatchNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            levels: 5,
            head: HeadKind::Multi,
            scoring: Scoring::ShiftWeighted,
            sic_dropout: 0.1,
            match_norm: MatchNorm::L2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate().map_err(ModelError::Config)?;
        if self.levels < 3 {
            return Err(ModelError::Config(format!("levels must be ≥ 3, got {}", self.levels)));
        }
        if !(0.0..1.0).contains(&self.sic_dropout) {
            return Err(ModelError::Config(format!("sic_dropout {} outside [0, 1)", self.sic_dropout)));
        }
        Ok(())
    }

    /// Branch count actually instantiated.
    pub fn branches(&self) -> usize {
        match self.head {
            HeadKind::Multi => self.levels,
            HeadKind::Single => 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Branch {
    w: ParamId,
    b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    num_items: usize,
    store: ParamStore,
    encoder: Encoder,
    branches: Vec<Branch>,
}

/// Tape handles for one batch.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Backbone output `[B, d]`.
    pub user: Var,
    /// Branch representations `[B, V, d]`.
    pub reprs: Var,
}

impl Model {
    /// Fresh model with parameters drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, num_items: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if num_items == 0 {
            return Err(ModelError::Config("catalog has no items".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::register(&config.encoder, num_items, &mut store, &mut rng);
        let d = config.encoder.d;
        let bound = 1.0 / (d as f64).sqrt();
        let branches = (0..config.branches())
            .map(|v| Branch {
                w: store.register(format!("sic{v}.w"), uniform(&mut rng, &[d, d], bound)),
                b: store.register(format!("sic{v}.b"), Tensor::zeros(&[d])),
                ln_g: store.register(format!("sic{v}.ln.g"), Tensor::full(&[d], 1.0)),
                ln_b: store.register(format!("sic{v}.ln.b"), Tensor::zeros(&[d])),
            })
            .collect();
        Ok(Self {
            config,
            num_items,
            store,
            encoder,
            branches,
        })
    }

    /// Rebuilds a model and loads `store` into it; names and shapes must match.
    pub fn from_store(config: ModelConfig, num_items: usize, store: &ParamStore) -> Result<Self, ModelError> {
        let mut model = Self::new(config, num_items, 0)?;
        model.store.load_from(store)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    /// Parameter handles of branch `v`: `(W, b, ln gain, ln bias)`.
    pub fn branch_params(&self, v: usize) -> (ParamId, ParamId, ParamId, ParamId) {
        let b = &self.branches[v];
        (b.w, b.b, b.ln_g, b.ln_b)
    }

    /// One residual branch: `LN(Dropout(z + zW + b))` over `[B, d]`.
    pub fn branch_forward<R: Rng>(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        z: Var,
        v: usize,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, DiffError> {
        let br = &self.branches[v];
        let proj = linear(tape, z, p.var(br.w), p.var(br.b))?;
        let a = tape.add(z, proj)?;
        let a = tape.dropout(a, self.config.sic_dropout, rng, train);
        tape.layer_norm(a, p.var(br.ln_g), p.var(br.ln_b))
    }

    /// Stacks every branch applied to `z [B, d]` into `[B, V, d]`.
    pub fn shift_representations<R: Rng>(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        z: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, DiffError> {
        let (b, d) = (tape.shape(z)[0], tape.shape(z)[1]);
        let mut outs = Vec::with_capacity(self.branches.len());
        for v in 0..self.branches.len() {
            let r = self.branch_forward(tape, p, z, v, train, rng)?;
            outs.push(tape.reshape(r, &[b, 1, d])?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat(&outs, 1)
        }
    }

    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        histories: &[&[usize]],
        train: bool,
        rng: &mut R,
    ) -> Result<Forward, DiffError> {
        let user = self.encoder.encode(tape, p, histories, train, rng)?;
        let reprs = self.shift_representations(tape, p, user, train, rng)?;
        Ok(Forward { user, reprs })
    }

    /// Branch–candidate dot products `[B, V, N]` against every real item.
    pub fn candidate_dots(&self, tape: &mut Tape, p: &BoundParams, reprs: Var) -> Result<Var, DiffError> {
        let table = tape.narrow(p.var(self.encoder.item_embedding()), 0, 1, self.num_items)?;
        tape.matmul(reprs, table, true)
    }

    /// Candidate scores `[B, N]` from the dot products `[B, V, N]`.
    pub fn scores_from_dots(&self, tape: &mut Tape, dots: Var) -> Result<Var, DiffError> {
        match self.config.scoring {
            Scoring::Mean => tape.mean(dots, 1),
            Scoring::ShiftWeighted => {
                let f = tape.softmax(dots, 1)?;
                let weighted = tape.mul(f, dots)?;
                tape.sum(weighted, 1)
            }
        }
    }

    /// Dot products `[B, V]` of each branch with each sample's target item.
    pub fn target_dots(&self, tape: &mut Tape, dots: Var, targets: &[usize]) -> Result<Var, DiffError> {
        let v = tape.shape(dots)[1];
        let idx: Vec<usize> = targets
            .iter()
            .flat_map(|&t| std::iter::repeat_n(t - 1, v))
            .collect();
        tape.gather_last(dots, &idx)
    }

    /// Evaluation-mode scores `[B, N]`; column `j` is item `j + 1`.
    pub fn score_items(&self, histories: &[&[usize]]) -> Result<Tensor, DiffError> {
        let (mut tape, p) = self.eval_tape();
        let fwd = self.forward(&mut tape, &p, histories, false, &mut NoRng)?;
        let dots = self.candidate_dots(&mut tape, &p, fwd.reprs)?;
        let s = self.scores_from_dots(&mut tape, dots)?;
        Ok(tape.value(s).clone())
    }

    /// Evaluation-mode shift distribution `[B, V]` at each sample's target.
    pub fn target_distribution(&self, histories: &[&[usize]], targets: &[usize]) -> Result<Tensor, DiffError> {
        let (mut tape, p) = self.eval_tape();
        let fwd = self.forward(&mut tape, &p, histories, false, &mut NoRng)?;
        let td = self.target_dots_direct(&mut tape, &p, fwd.reprs, targets)?;
        let f = tape.softmax(td, 1)?;
        Ok(tape.value(f).clone())
    }

    /// Evaluation-mode backbone outputs `[B, d]`.
    pub fn user_vectors(&self, histories: &[&[usize]]) -> Result<Tensor, DiffError> {
        let (mut tape, p) = self.eval_tape();
        let user = self.encoder.encode(&mut tape, &p, histories, false, &mut NoRng)?;
        Ok(tape.value(user).clone())
    }

    /// Evaluation-mode basic views `[B, d]`: the sum over branches.
    pub fn basic_views(&self, histories: &[&[usize]]) -> Result<Tensor, DiffError> {
        let (mut tape, p) = self.eval_tape();
        let fwd = self.forward(&mut tape, &p, histories, false, &mut NoRng)?;
        let cn = tape.sum(fwd.reprs, 1)?;
        Ok(tape.value(cn).clone())
    }

    /// `[B, V]` target dots without materializing every candidate.
    pub fn target_dots_direct(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        reprs: Var,
        targets: &[usize],
    ) -> Result<Var, DiffError> {
        let (b, v) = (tape.shape(reprs)[0], tape.shape(reprs)[1]);
        let x = tape.embedding(p.var(self.encoder.item_embedding()), targets, &[b, 1])?;
        let dots = tape.matmul(reprs, x, true)?;
        tape.reshape(dots, &[b, v])
    }

    fn eval_tape(&self) -> (Tape, BoundParams) {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        (tape, p)
    }
}

/// Generator for evaluation passes, where dropout never draws.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation passes draw no random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation passes draw no random numbers")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("evaluation passes draw no random numbers")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> Result<(), rand::Error> {
        unreachable!("evaluation passes draw no random numbers")
    }
}

/// Mean over samples of `−log softmax(target_dots)[level]`; levels are 1-based.
pub fn decomposition_loss(tape: &mut Tape, target_dots: Var, levels: &[usize]) -> Result<Var, DiffError> {
    let idx: Vec<usize> = levels.iter().map(|&b| b - 1).collect();
    tape.cross_entropy(target_dots, &idx)
}

/// Mean over samples of `−log softmax(scores)[target]`; targets are item
/// indices (1-based, column `target − 1`).
pub fn recommendation_loss(tape: &mut Tape, scores: Var, targets: &[usize]) -> Result<Var, DiffError> {
    let idx: Vec<usize> = targets.iter().map(|&t| t - 1).collect();
    tape.cross_entropy(scores, &idx)
}

fn normalize_views(tape: &mut Tape, x: Var, norm: MatchNorm) -> Result<Var, DiffError> {
    match norm {
        MatchNorm::L2 => tape.l2_normalize(x),
        MatchNorm::Layernorm => {
            let d = *tape.shape(x).last().expect("rank 2");
            let g = tape.constant(Tensor::full(&[d], 1.0));
            let b = tape.constant(Tensor::zeros(&[d]));
            tape.layer_norm(x, g, b)
        }
    }
}

/// Symmetric InfoNCE over `M` positive pairs `(mq[i], hh[i])` with in-batch
/// negatives. Each direction is averaged over the pairs; the two are summed.
pub fn matching_loss(tape: &mut Tape, mq: Var, hh: Var, norm: MatchNorm) -> Result<Var, ModelError> {
    let m = tape.shape(mq)[0];
    if m < 2 {
        return Err(ModelError::NoNegatives(m));
    }
    let a = normalize_views(tape, mq, norm)?;
    let b = normalize_views(tape, hh, norm)?;
    let diag: Vec<usize> = (0..m).collect();
    let ab = tape.matmul(a, b, true)?;
    let ba = tape.matmul(b, a, true)?;
    let l1 = tape.cross_entropy(ab, &diag)?;
    let l2 = tape.cross_entropy(ba, &diag)?;
    Ok(tape.add(l1, l2)?)
}

/// `rec + γ1·dec + γ2·mat`; absent terms contribute nothing.
pub fn total_loss(
    tape: &mut Tape,
    rec: Var,
    dec: Option<Var>,
    mat: Option<Var>,
    gamma1: f64,
    gamma2: f64,
) -> Result<Var, DiffError> {
    let mut total = rec;
    for (term, w) in [(dec, gamma1), (mat, gamma2)] {
        if let Some(t) = term {
            let t = tape.scale(t, w);
            total = tape.add(total, t)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderKind;

    fn small(head: HeadKind, levels: usize) -> Model {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                kind: EncoderKind::SelfAttention,
                d: 6,
                max_len: 4,
                layers: 1,
                heads: 2,
                dropout: 0.0,
            },
            levels,
            head,
            ..ModelConfig::default()
        };
        Model::new(cfg, 7, 3).unwrap()
    }

    fn scalar_loss(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.value(v).item()
    }

    #[test]
    fn decomposition_uniform_is_log_v() {
        let l = scalar_loss(|t| {
            let d = t.constant(Tensor::new(vec![1, 4], vec![0.3; 4]).unwrap());
            decomposition_loss(t, d, &[2]).unwrap()
        });
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn decomposition_two_levels_hand_value() {
        let l = scalar_loss(|t| {
            let d = t.constant(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap());
            decomposition_loss(t, d, &[1]).unwrap()
        });
        let e2 = 2f64.exp();
        assert!((l - -(e2 / (e2 + 1.0)).ln()).abs() < 1e-12);
        assert!((l - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn recommendation_loss_hand_value() {
        let l = scalar_loss(|t| {
            let s = t.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
            // Item 4 sits in column 3.
            recommendation_loss(t, s, &[4]).unwrap()
        });
        assert!((l - 0.4402).abs() < 1e-4);
        let u = scalar_loss(|t| {
            let s = t.constant(Tensor::zeros(&[1, 9]));
            recommendation_loss(t, s, &[5]).unwrap()
        });
        assert!((u - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matching_orthogonal_pairs() {
        let l = scalar_loss(|t| {
            let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
            matching_loss(t, a, a, MatchNorm::L2).unwrap()
        });
        let per_dir = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((per_dir - 0.3133).abs() < 1e-4);
        assert!((l - 2.0 * per_dir).abs() < 1e-12);
    }

    #[test]
    fn matching_identical_representations() {
        for m in [2usize, 5] {
            let l = scalar_loss(|t| {
                let a = t.constant(Tensor::full(&[m, 3], 0.7));
                matching_loss(t, a, a, MatchNorm::L2).unwrap()
            });
            // Every similarity equals 1, so each direction is log(1 + |A|).
            assert!((l - 2.0 * (m as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn matching_needs_negatives() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            matching_loss(&mut t, a, a, MatchNorm::L2),
            Err(ModelError::NoNegatives(1))
        ));
    }

    #[test]
    fn total_loss_combination() {
        let l = scalar_loss(|t| {
            let r = t.constant(Tensor::scalar(1.0));
            let d = t.constant(Tensor::scalar(2.0));
            let m = t.constant(Tensor::scalar(3.0));
            total_loss(t, r, Some(d), Some(m), 0.4, 0.5).unwrap()
        });
        assert!((l - 3.3).abs() < 1e-12);
    }

    #[test]
    fn zero_projection_branch_is_layer_norm() {
        let mut model = small(HeadKind::Multi, 3);
        let (w, _, _, _) = model.branch_params(0);
        model.store_mut().get_mut(w).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = model.store().bind(&mut tape);
        let z = tape.constant(Tensor::new(vec![1, 6], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5]).unwrap());
        let out = model.branch_forward(&mut tape, &p, z, 0, false, &mut NoRng).unwrap();
        let g = tape.constant(Tensor::full(&[6], 1.0));
        let b = tape.constant(Tensor::zeros(&[6]));
        let ln = tape.layer_norm(z, g, b).unwrap();
        assert_eq!(tape.value(out), tape.value(ln));
        let other = model.branch_forward(&mut tape, &p, z, 1, false, &mut NoRng).unwrap();
        assert_ne!(tape.value(out), tape.value(other));
    }

    #[test]
    fn branch_gradients_are_independent() {
        let model = small(HeadKind::Multi, 3);
        let mut tape = Tape::new();
        let p = model.store().bind(&mut tape);
        let z = tape.constant(Tensor::new(vec![1, 6], vec![0.2, -0.4, 0.9, 0.1, -1.0, 0.3]).unwrap());
        let reprs = model.shift_representations(&mut tape, &p, z, false, &mut NoRng).unwrap();
        assert_eq!(tape.shape(reprs), &[1, 3, 6]);
        let b1 = tape.select(reprs, 1, 1).unwrap();
        let w = tape.constant(Tensor::new(vec![1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let prod = tape.mul(b1, w).unwrap();
        let loss = tape.sum_all(prod);
        let g = tape.backward(loss).unwrap();
        for v in [0, 2] {
            let (wv, _, _, _) = model.branch_params(v);
            assert!(g.get(p.var(wv)).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
        }
        let (w1, _, _, _) = model.branch_params(1);
        assert!(g.get(p.var(w1)).unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn shift_distribution_sums_to_one() {
        let model = small(HeadKind::Multi, 5);
        let f = model
            .target_distribution(&[&[1, 2], &[3], &[4, 5, 6, 7]], &[3, 4, 1])
            .unwrap();
        assert_eq!(f.shape(), &[3, 5]);
        for row in f.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn target_dot_paths_agree() {
        let model = small(HeadKind::Multi, 4);
        let mut tape = Tape::new();
        let p = model.store().bind(&mut tape);
        let fwd = model.forward(&mut tape, &p, &[&[1, 2], &[5, 6, 7]], false, &mut NoRng).unwrap();
        let dots = model.candidate_dots(&mut tape, &p, fwd.reprs).unwrap();
        let a = model.target_dots(&mut tape, dots, &[3, 7]).unwrap();
        let b = model.target_dots_direct(&mut tape, &p, fwd.reprs, &[3, 7]).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_head_has_one_branch() {
        let model = small(HeadKind::Single, 5);
        assert_eq!(model.num_branches(), 1);
        let s = model.score_items(&[&[1, 2, 3]]).unwrap();
        assert_eq!(s.shape(), &[1, 7]);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let model = small(HeadKind::Multi, 3);
        let a = model.score_items(&[&[1, 4]]).unwrap();
        let b = model.score_items(&[&[1, 4]]).unwrap();
        assert_eq!(a, b);
    }
}
