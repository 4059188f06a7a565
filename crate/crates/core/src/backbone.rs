//! Sequence encoders mapping a left-padded item history to a user vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD;
use crate::diffcore::{BoundParams, DiffError, ParamId, ParamStore, Tape, Tensor, Var};

/// Fill value for masked attention logits.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Gru,
    SelfAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Embedding width.
    pub d: usize,
    /// Maximum history length.
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::SelfAttention,
            d: 64,
            max_len: 50,
            layers: 2,
            heads: 2,
            dropout: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d == 0 || self.max_len == 0 || self.layers == 0 {
            return Err("encoder d, max_len and layers must be positive".into());
        }
        if self.kind == EncoderKind::SelfAttention && (self.heads == 0 || !self.d.is_multiple_of(self.heads)) {
            return Err(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("encoder dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct AttentionBlock {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct GruLayer {
    wx: ParamId,
    bx: ParamId,
    wh: ParamId,
    bh: ParamId,
}

#[derive(Debug, Clone)]
enum Layers {
    Attention {
        pos: ParamId,
        blocks: Vec<AttentionBlock>,
        final_g: ParamId,
        final_b: ParamId,
    },
    Gru(Vec<GruLayer>),
}

/// Encoder parameter handles; the values live in the model's [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    item_emb: ParamId,
    layers: Layers,
}

pub(crate) fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl Encoder {
    /// Registers the item table `[num_items + 1, d]` (row 0 is padding) and the
    /// encoder weights, drawn uniformly from `±1/√d`; layer-norm gains start at 1.
    pub fn register<R: Rng>(
        config: &EncoderConfig,
        num_items: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let d = config.d;
        let bound = 1.0 / (d as f64).sqrt();
        let mut emb = uniform(rng, &[num_items + 1, d], bound);
        emb.data_mut()[..d].fill(0.0);
        let item_emb = store.register("item_emb", emb);
        let ones = || Tensor::full(&[d], 1.0);
        let zeros = |n: usize| Tensor::zeros(&[n]);
        let layers = match config.kind {
            EncoderKind::SelfAttention => {
                let pos = store.register("pos_emb", uniform(rng, &[config.max_len + 1, d], bound));
                let blocks = (0..config.layers)
                    .map(|l| {
                        let mut reg = |name: &str, t: Tensor| store.register(format!("sa{l}.{name}"), t);
                        AttentionBlock {
                            ln1_g: reg("ln1.g", ones()),
                            ln1_b: reg("ln1.b", zeros(d)),
                            wq: reg("wq", uniform(rng, &[d, d], bound)),
                            bq: reg("bq", zeros(d)),
                            wk: reg("wk", uniform(rng, &[d, d], bound)),
                            bk: reg("bk", zeros(d)),
                            wv: reg("wv", uniform(rng, &[d, d], bound)),
                            bv: reg("bv", zeros(d)),
                            ln2_g: reg("ln2.g", ones()),
                            ln2_b: reg("ln2.b", zeros(d)),
                            w1: reg("ffn.w1", uniform(rng, &[d, d], bound)),
                            b1: reg("ffn.b1", zeros(d)),
                            w2: reg("ffn.w2", uniform(rng, &[d, d], bound)),
                            b2: reg("ffn.b2", zeros(d)),
                        }
                    })
                    .collect();
                Layers::Attention {
                    pos,
                    blocks,
                    final_g: store.register("sa.final.g", ones()),
                    final_b: store.register("sa.final.b", zeros(d)),
                }
            }
            EncoderKind::Gru => Layers::Gru(
                (0..config.layers)
                    .map(|l| GruLayer {
                        wx: store.register(format!("gru{l}.wx"), uniform(rng, &[d, 3 * d], bound)),
                        bx: store.register(format!("gru{l}.bx"), zeros(3 * d)),
                        wh: store.register(format!("gru{l}.wh"), uniform(rng, &[d, 3 * d], bound)),
                        bh: store.register(format!("gru{l}.bh"), zeros(3 * d)),
                    })
                    .collect(),
            ),
        };
        Self {
            config: config.clone(),
            item_emb,
            layers,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn item_embedding(&self) -> ParamId {
        self.item_emb
    }

    /// Encodes a batch of histories, each at most `max_len` long and holding at
    /// least one real item, into `[B, d]`.
    pub fn encode<R: Rng>(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        histories: &[&[usize]],
        train: bool,
        rng: &mut R,
    ) -> Result<Var, DiffError> {
        let seq = self.encode_sequence(tape, params, histories, train, rng)?;
        tape.select(seq, 1, self.config.max_len - 1)
    }

    /// Per-position representations `[B, max_len, d]` of the left-padded batch.
    /// Rows at padding positions carry no meaning.
    pub fn encode_sequence<R: Rng>(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        histories: &[&[usize]],
        train: bool,
        rng: &mut R,
    ) -> Result<Var, DiffError> {
        let o = self.config.max_len;
        if histories.is_empty() {
            return Err(DiffError::EmptyInput("encode"));
        }
        let mut items = Vec::with_capacity(histories.len() * o);
        for h in histories {
            if h.len() > o {
                return Err(DiffError::IndexOutOfRange {
                    op: "encode",
                    index: h.len(),
                    len: o,
                });
            }
            if h.iter().all(|&i| i == PAD) {
                return Err(DiffError::EmptyInput("encode (all-padding history)"));
            }
            items.extend(std::iter::repeat_n(PAD, o - h.len()));
            items.extend_from_slice(h);
        }
        match &self.layers {
            Layers::Attention {
                pos,
                blocks,
                final_g,
                final_b,
            } => self.encode_attention(tape, params, &items, histories.len(), *pos, blocks, (*final_g, *final_b), train, rng),
            Layers::Gru(layers) => self.encode_gru(tape, params, &items, histories.len(), layers, train, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn encode_attention<R: Rng>(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        items: &[usize],
        batch: usize,
        pos: ParamId,
        blocks: &[AttentionBlock],
        final_ln: (ParamId, ParamId),
        train: bool,
        rng: &mut R,
    ) -> Result<Var, DiffError> {
        let EncoderConfig {
            d,
            max_len: o,
            heads,
            dropout,
            ..
        } = self.config;
        let dh = d / heads;
        let is_pad: Vec<bool> = items.iter().map(|&i| i == PAD).collect();
        // Positions count from 1 at the first real item; padding gets row 0.
        let positions: Vec<usize> = is_pad
            .chunks(o)
            .flat_map(|row| {
                let first = row.iter().position(|&p| !p).unwrap_or(o);
                (0..o).map(move |j| if j < first { 0 } else { j - first + 1 })
            })
            .collect();
        let pad_rows: Vec<bool> = is_pad.iter().flat_map(|&p| std::iter::repeat_n(p, d)).collect();
        // Attention mask over [B, o(query), o(key)]: future keys and padding keys.
        let attn_mask: Vec<bool> = (0..batch)
            .flat_map(|b| {
                let is_pad = &is_pad;
                (0..o).flat_map(move |q| (0..o).map(move |k| k > q || is_pad[b * o + k]))
            })
            .collect();
        let head_mask: Vec<bool> = attn_mask.clone();

        let emb = tape.embedding(p.var(self.item_emb), items, &[batch, o])?;
        let emb = tape.scale(emb, (d as f64).sqrt());
        let pe = tape.embedding(p.var(pos), &positions, &[batch, o])?;
        let mut x = tape.add(emb, pe)?;
        x = tape.dropout(x, dropout, rng, train);
        x = tape.mask_fill(x, &pad_rows, 0.0)?;

        for blk in blocks {
            let q = tape.layer_norm(x, p.var(blk.ln1_g), p.var(blk.ln1_b))?;
            let qp = linear(tape, q, p.var(blk.wq), p.var(blk.bq))?;
            let kp = linear(tape, x, p.var(blk.wk), p.var(blk.bk))?;
            let vp = linear(tape, x, p.var(blk.wv), p.var(blk.bv))?;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.narrow(qp, 2, h * dh, dh)?;
                let kh = tape.narrow(kp, 2, h * dh, dh)?;
                let vh = tape.narrow(vp, 2, h * dh, dh)?;
                let logits = tape.matmul(qh, kh, true)?;
                let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
                let logits = tape.mask_fill(logits, &head_mask, MASKED_LOGIT)?;
                let attn = tape.softmax(logits, 2)?;
                let attn = tape.dropout(attn, dropout, rng, train);
                outs.push(tape.matmul(attn, vh, false)?);
            }
            let mha = if heads == 1 { outs[0] } else { tape.concat(&outs, 2)? };
            x = tape.add(q, mha)?;
            x = tape.layer_norm(x, p.var(blk.ln2_g), p.var(blk.ln2_b))?;
            let hidden = linear(tape, x, p.var(blk.w1), p.var(blk.b1))?;
            let hidden = tape.relu(hidden);
            let hidden = tape.dropout(hidden, dropout, rng, train);
            let ffn = linear(tape, hidden, p.var(blk.w2), p.var(blk.b2))?;
            let ffn = tape.dropout(ffn, dropout, rng, train);
            x = tape.add(x, ffn)?;
            x = tape.mask_fill(x, &pad_rows, 0.0)?;
        }
        tape.layer_norm(x, p.var(final_ln.0), p.var(final_ln.1))
    }

    #[allow(clippy::too_many_arguments)]
    fn encode_gru<R: Rng>(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        items: &[usize],
        batch: usize,
        layers: &[GruLayer],
        train: bool,
        rng: &mut R,
    ) -> Result<Var, DiffError> {
        let EncoderConfig {
            d,
            max_len: o,
            dropout,
            ..
        } = self.config;
        // First step at which any sequence in the batch holds a real item.
        let start = (0..o)
            .find(|&t| (0..batch).any(|b| items[b * o + t] != PAD))
            .unwrap_or(o);
        let step_masks: Vec<Var> = (0..o)
            .map(|t| {
                let m: Vec<f64> = (0..batch)
                    .flat_map(|b| {
                        let v = if items[b * o + t] == PAD { 0.0 } else { 1.0 };
                        std::iter::repeat_n(v, d)
                    })
                    .collect();
                tape.constant(Tensor::new(vec![batch, d], m).expect("mask shape"))
            })
            .collect();
        let emb = tape.embedding(p.var(self.item_emb), items, &[batch, o])?;
        let mut input = tape.dropout(emb, dropout, rng, train);
        for (l, layer) in layers.iter().enumerate() {
            let xw = linear(tape, input, p.var(layer.wx), p.var(layer.bx))?;
            let mut h = tape.constant(Tensor::zeros(&[batch, d]));
            let mut outputs = Vec::new();
            for (t, &mask) in step_masks.iter().enumerate() {
                if t >= start {
                    let xt = tape.select(xw, 1, t)?;
                    let hu = linear(tape, h, p.var(layer.wh), p.var(layer.bh))?;
                    let gate = |tape: &mut Tape, g: usize| -> Result<(Var, Var), DiffError> {
                        Ok((tape.narrow(xt, 1, g * d, d)?, tape.narrow(hu, 1, g * d, d)?))
                    };
                    let (xr, hr) = gate(tape, 0)?;
                    let (xz, hz) = gate(tape, 1)?;
                    let (xn, hn) = gate(tape, 2)?;
                    let r = tape.add(xr, hr)?;
                    let r = tape.sigmoid(r);
                    let z = tape.add(xz, hz)?;
                    let z = tape.sigmoid(z);
                    let rn = tape.mul(r, hn)?;
                    let n = tape.add(xn, rn)?;
                    let n = tape.tanh(n);
                    // h' = n + z ⊙ (h − n); padded steps keep h.
                    let diff = tape.sub(h, n)?;
                    let zd = tape.mul(z, diff)?;
                    let h_new = tape.add(n, zd)?;
                    let delta = tape.sub(h_new, h)?;
                    let delta = tape.mul(mask, delta)?;
                    h = tape.add(h, delta)?;
                }
                outputs.push(tape.reshape(h, &[batch, 1, d])?);
            }
            input = tape.concat(&outputs, 1)?;
            if l + 1 < layers.len() {
                input = tape.dropout(input, dropout, rng, train);
            }
        }
        Ok(input)
    }
}

/// `x · W + b` over the last axis.
pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
    let shape = tape.shape(x).to_vec();
    let din = *shape.last().expect("rank ≥ 1");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let x2 = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, din])? };
    let y = tape.matmul(x2, w, false)?;
    let y = tape.add(y, b)?;
    if shape.len() == 2 {
        Ok(y)
    } else {
        let mut out = shape;
        *out.last_mut().expect("rank ≥ 1") = tape.shape(w)[1];
        tape.reshape(y, &out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: EncoderKind, o: usize) -> (Encoder, ParamStore) {
        let cfg = EncoderConfig {
            kind,
            d: 8,
            max_len: o,
            layers: 2,
            heads: 2,
            dropout: 0.3,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (Encoder::register(&cfg, 12, &mut store, &mut rng), store)
    }

    fn run(enc: &Encoder, store: &ParamStore, hs: &[&[usize]]) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = enc.encode(&mut tape, &p, hs, false, &mut rng).unwrap();
        tape.value(z).clone()
    }

    #[test]
    fn output_shape_and_padding_invariance() {
        for kind in [EncoderKind::Gru, EncoderKind::SelfAttention] {
            let (enc, store) = setup(kind, 6);
            let a = run(&enc, &store, &[&[3, 4, 5]]);
            assert_eq!(a.shape(), &[1, 8]);
            assert!(a.is_finite());
            let b = run(&enc, &store, &[&[0, 0, 3, 4, 5]]);
            let c = run(&enc, &store, &[&[7, 1], &[3, 4, 5]]);
            for j in 0..8 {
                assert!((a.data()[j] - b.data()[j]).abs() < 1e-10, "{kind:?}");
                assert!((a.data()[j] - c.row(1)[j]).abs() < 1e-10, "{kind:?}");
            }
        }
    }

    #[test]
    fn order_matters() {
        for kind in [EncoderKind::Gru, EncoderKind::SelfAttention] {
            let (enc, store) = setup(kind, 6);
            let a = run(&enc, &store, &[&[1, 2, 3, 4, 5]]);
            let b = run(&enc, &store, &[&[3, 1, 4, 2, 5]]);
            assert!(a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-6));
        }
    }

    #[test]
    fn appending_an_item_keeps_earlier_positions() {
        for kind in [EncoderKind::Gru, EncoderKind::SelfAttention] {
            let (enc, store) = setup(kind, 6);
            let prefix = run(&enc, &store, &[&[2, 9, 4]]);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let seq = enc.encode_sequence(&mut tape, &p, &[&[2, 9, 4, 7]], false, &mut rng).unwrap();
            let at_c = tape.select(seq, 1, 4).unwrap();
            for (x, y) in prefix.data().iter().zip(tape.value(at_c).data()) {
                assert!((x - y).abs() < 1e-10, "{kind:?}");
            }
        }
    }

    #[test]
    fn later_positions_get_no_gradient() {
        for kind in [EncoderKind::Gru, EncoderKind::SelfAttention] {
            let (enc, store) = setup(kind, 5);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let seq = enc.encode_sequence(&mut tape, &p, &[&[3, 5, 8, 11]], false, &mut rng).unwrap();
            // Position 2 holds item 5; items 8 and 11 come later.
            let at = tape.select(seq, 1, 2).unwrap();
            let loss = tape.sum_all(at);
            let g = tape.backward(loss).unwrap();
            let ge = g.get(p.var(enc.item_embedding())).unwrap();
            assert!(ge.row(5).iter().any(|&v| v != 0.0));
            assert!(ge.row(8).iter().chain(ge.row(11)).all(|&v| v == 0.0), "{kind:?}");
        }
    }

    #[test]
    fn all_padding_is_rejected() {
        let (enc, store) = setup(EncoderKind::Gru, 4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(enc.encode(&mut tape, &p, &[&[0, 0]], false, &mut rng).is_err());
        assert!(enc.encode(&mut tape, &p, &[&[1, 2, 3, 4, 5]], false, &mut rng).is_err());
    }

    #[test]
    fn bad_head_count_is_rejected() {
        let cfg = EncoderConfig {
            d: 10,
            heads: 3,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
