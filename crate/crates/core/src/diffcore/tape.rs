use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{axis_extents, Tensor};
use super::DiffError;

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-8;
const L2_NORM_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { a: Var, scale: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Act { a: Var, kind: Activation },
    Embedding { table: Var, indices: Vec<usize> },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout { a: Var, mask: Vec<f64> },
    Sum { a: Var, axis: usize, scale: f64 },
    SumAll { a: Var },
    MaskFill { a: Var, mask: Vec<bool> },
    Reshape { a: Var },
    Narrow { a: Var, axis: usize, start: usize },
    L2Normalize { a: Var, norms: Vec<f64> },
    GatherLast { a: Var, indices: Vec<usize> },
    Dot { a: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. A fresh tape is built per forward pass; calling
/// [`Tape::backward`] on a scalar yields gradients for every leaf that
/// requires them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), DiffError> {
    if axis >= shape.len() {
        return Err(DiffError::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a · b` or `a · bᵀ` over the last two axes. `b` is either rank 2 and
    /// shared across all leading axes of `a`, or has the same leading axes.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, DiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_rhs {
                if trans_b {
                    gemm_nt(av, bv, &mut out, batch * m, k, n);
                } else {
                    gemm_nn(av, bv, &mut out, batch * m, k, n);
                }
            } else {
                for t in 0..batch {
                    let ablk = &av[t * m * k..(t + 1) * m * k];
                    let bblk = &bv[t * k * n..(t + 1) * k * n];
                    let oblk = &mut out[t * m * n..(t + 1) * m * n];
                    if trans_b {
                        gemm_nt(ablk, bblk, oblk, m, k, n);
                    } else {
                        gemm_nn(ablk, bblk, oblk, m, k, n);
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        ))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, DiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !is_suffix(sa, sb) {
            return Err(mismatch(name, sa, sb));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let width = bv.len().max(1);
        let data = av
            .data()
            .chunks(width)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` broadcasts over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// `a - b` with the same broadcasting as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product; `b` broadcasts over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| scale * x + shift).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Affine { a, scale }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = inputs.first().ok_or(DiffError::EmptyInput("concat"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let v = self.value(a);
        let f: fn(f64) -> f64 = match kind {
            Activation::Tanh => f64::tanh,
            Activation::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => |x| x.max(0.0),
        };
        let data = v.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Act { a, kind }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    /// Gathers rows of `table` (axis 0). The output shape is
    /// `index_shape ++ table.shape[1..]`.
    pub fn embedding(
        &mut self,
        table: Var,
        indices: &[usize],
        index_shape: &[usize],
    ) -> Result<Var, DiffError> {
        let ts = self.shape(table).to_vec();
        if ts.is_empty() {
            return Err(mismatch("embedding", &ts, index_shape));
        }
        if index_shape.iter().product::<usize>() != indices.len() {
            return Err(mismatch("embedding", &[indices.len()], index_shape));
        }
        let rows = ts[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(DiffError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                len: rows,
            });
        }
        let tv = self.value(table);
        let width: usize = ts[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&tv.data()[i * width..(i + 1) * width]);
        }
        let mut shape = index_shape.to_vec();
        shape.extend_from_slice(&ts[1..]);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let v = self.value(a);
        check_axis("softmax", v.shape(), axis)?;
        let out = softmax_along(v, axis, false);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let v = self.value(a);
        check_axis("log_softmax", v.shape(), axis)?;
        let out = softmax_along(v, axis, true);
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax { a, axis }, rg))
    }

    /// Layer normalization over the last axis with learned `gain` and `bias`
    /// of the last axis' width.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, DiffError> {
        let xs = self.shape(x).to_vec();
        let w = *xs.last().ok_or_else(|| mismatch("layer_norm", &xs, &[]))?;
        if self.shape(gain) != [w] {
            return Err(mismatch("layer_norm", &xs, self.shape(gain)));
        }
        if self.shape(bias) != [w] {
            return Err(mismatch("layer_norm", &xs, self.shape(bias)));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / w.max(1);
        let mut normed = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let nv = (v - mean) * is;
                normed.push(nv);
                out.push(nv * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Outside training, or at rate 0, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, train: bool) -> Var {
        if !train || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| {
                if rate < 1.0 && rng.gen::<f64>() >= rate {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Dropout { a: x, mask }, rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("dot", sa, sb));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot { a, b }, rg))
    }

    fn reduce(&mut self, a: Var, axis: usize, scale: f64, name: &'static str) -> Result<Var, DiffError> {
        let v = self.value(a);
        check_axis(name, v.shape(), axis)?;
        let (outer, len, inner) = axis_extents(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|x| *x *= scale);
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sum { a, axis, scale }, rg))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        self.reduce(a, axis, 1.0, "sum")
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let len = self.shape(a).get(axis).copied().unwrap_or(1);
        self.reduce(a, axis, 1.0 / len.max(1) as f64, "mean")
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Overwrites positions where `mask` is true with `value`.
    pub fn mask_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var, DiffError> {
        let v = self.value(a);
        if mask.len() != v.len() {
            return Err(mismatch("mask_fill", v.shape(), &[mask.len()]));
        }
        let data = v
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::MaskFill {
                a,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.len() {
            return Err(mismatch("reshape", v.shape(), shape));
        }
        let out = v.clone().with_shape(shape.to_vec());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        let v = self.value(a);
        check_axis("narrow", v.shape(), axis)?;
        let (outer, alen, inner) = axis_extents(v.shape(), axis);
        if start + len > alen {
            return Err(DiffError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                len: alen,
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow { a, axis, start }, rg))
    }

    /// Index `idx` along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, idx: usize) -> Result<Var, DiffError> {
        let n = self.narrow(a, axis, idx, 1)?;
        let mut shape = self.shape(n).to_vec();
        shape.remove(axis);
        self.reshape(n, &shape)
    }

    /// Scales every vector along the last axis to unit Euclidean length.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, DiffError> {
        let v = self.value(a);
        let w = *v
            .shape()
            .last()
            .ok_or_else(|| mismatch("l2_normalize", v.shape(), &[]))?;
        let mut norms = Vec::with_capacity(v.len() / w.max(1));
        let mut data = Vec::with_capacity(v.len());
        for row in v.data().chunks(w) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(L2_NORM_FLOOR);
            norms.push(n);
            data.extend(row.iter().map(|x| x / n));
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::L2Normalize { a, norms }, rg))
    }

    /// Picks one entry per row along the last axis.
    pub fn gather_last(&mut self, a: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let v = self.value(a);
        let w = *v
            .shape()
            .last()
            .ok_or_else(|| mismatch("gather_last", v.shape(), &[]))?;
        let rows = v.len() / w.max(1);
        if indices.len() != rows {
            return Err(mismatch("gather_last", v.shape(), &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= w) {
            return Err(DiffError::IndexOutOfRange {
                op: "gather_last",
                index: bad,
                len: w,
            });
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| v.data()[r * w + i])
            .collect();
        let shape = v.shape()[..v.rank() - 1].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::GatherLast {
                a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits[rows, classes]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, DiffError> {
        let axis = self
            .shape(logits)
            .len()
            .checked_sub(1)
            .ok_or_else(|| mismatch("cross_entropy", &[], &[targets.len()]))?;
        let lsm = self.log_softmax(logits, axis)?;
        let picked = self.gather_last(lsm, targets)?;
        let n = targets.len().max(1) as f64;
        let total = self.sum_all(picked);
        Ok(self.scale(total, -1.0 / n))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let rs = self.shape(root);
        if rs.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarRoot(rs.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rs, 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.rg(a) {
                    let mut da = vec![0.0; av.len()];
                    if shared_rhs {
                        if trans_b {
                            gemm_nn(gd, bv, &mut da, batch * m, n, k);
                        } else {
                            gemm_nt(gd, bv, &mut da, batch * m, n, k);
                        }
                    } else {
                        for t in 0..batch {
                            let gblk = &gd[t * m * n..(t + 1) * m * n];
                            let bblk = &bv[t * k * n..(t + 1) * k * n];
                            let dblk = &mut da[t * m * k..(t + 1) * m * k];
                            if trans_b {
                                gemm_nn(gblk, bblk, dblk, m, n, k);
                            } else {
                                gemm_nt(gblk, bblk, dblk, m, n, k);
                            }
                        }
                    }
                    let t = Tensor::new(self.shape(a).to_vec(), da).expect("shape");
                    self.accumulate(grads, a, t);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; bv.len()];
                    if shared_rhs {
                        if trans_b {
                            gemm_tn(gd, av, &mut db, batch * m, n, k);
                        } else {
                            gemm_tn(av, gd, &mut db, batch * m, k, n);
                        }
                    } else {
                        for t in 0..batch {
                            let gblk = &gd[t * m * n..(t + 1) * m * n];
                            let ablk = &av[t * m * k..(t + 1) * m * k];
                            let dblk = &mut db[t * k * n..(t + 1) * k * n];
                            if trans_b {
                                gemm_tn(gblk, ablk, dblk, m, n, k);
                            } else {
                                gemm_tn(ablk, gblk, dblk, m, k, n);
                            }
                        }
                    }
                    let t = Tensor::new(self.shape(b).to_vec(), db).expect("shape");
                    self.accumulate(grads, b, t);
                }
            }
            &Op::Add { a, b } => {
                if self.rg(a) {
                    self.accumulate(grads, a, g.clone());
                }
                if self.rg(b) {
                    let sb = self.shape(b).to_vec();
                    let width = sb.iter().product::<usize>().max(1);
                    let mut db = vec![0.0; width];
                    for chunk in gd.chunks(width) {
                        for (d, x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(sb, db).expect("shape"));
                }
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let width = bv.len().max(1);
                if self.rg(a) {
                    let da = gd
                        .chunks(width)
                        .flat_map(|c| c.iter().zip(bv).map(|(x, y)| x * y))
                        .collect();
                    let t = Tensor::new(self.shape(a).to_vec(), da).expect("shape");
                    self.accumulate(grads, a, t);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; width];
                    for (gc, ac) in gd.chunks(width).zip(av.chunks(width)) {
                        for ((d, x), y) in db.iter_mut().zip(gc).zip(ac) {
                            *d += x * y;
                        }
                    }
                    let t = Tensor::new(self.shape(b).to_vec(), db).expect("shape");
                    self.accumulate(grads, b, t);
                }
            }
            &Op::Affine { a, scale } => {
                let da = gd.iter().map(|x| x * scale).collect();
                let t = Tensor::new(g.shape().to_vec(), da).expect("shape");
                self.accumulate(grads, a, t);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let s = self.shape(v).to_vec();
                    let len = s[*axis];
                    if self.rg(v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accumulate(grads, v, Tensor::new(s, dv).expect("shape"));
                    }
                    offset += len;
                }
            }
            &Op::Act { a, kind } => {
                let yv = out.data();
                let xv = self.value(a).data();
                let da = gd
                    .iter()
                    .zip(yv)
                    .zip(xv)
                    .map(|((g, y), x)| match kind {
                        Activation::Tanh => g * (1.0 - y * y),
                        Activation::Sigmoid => g * y * (1.0 - y),
                        Activation::Relu => {
                            if *x > 0.0 {
                                *g
                            } else {
                                0.0
                            }
                        }
                    })
                    .collect();
                let t = Tensor::new(g.shape().to_vec(), da).expect("shape");
                self.accumulate(grads, a, t);
            }
            Op::Embedding { table, indices } => {
                let ts = self.shape(*table).to_vec();
                let width: usize = ts[1..].iter().product();
                let mut dt = vec![0.0; ts.iter().product()];
                for (r, &i) in indices.iter().enumerate() {
                    let src = &gd[r * width..(r + 1) * width];
                    for (d, x) in dt[i * width..(i + 1) * width].iter_mut().zip(src) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(ts, dt).expect("shape"));
            }
            &Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_extents(out.shape(), axis);
                let y = out.data();
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let s: f64 = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            da[at(l)] = y[at(l)] * (gd[at(l)] - s);
                        }
                    }
                }
                let t = Tensor::new(out.shape().to_vec(), da).expect("shape");
                self.accumulate(grads, a, t);
            }
            &Op::LogSoftmax { a, axis } => {
                let (outer, len, inner) = axis_extents(out.shape(), axis);
                let y = out.data();
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let s: f64 = (0..len).map(|l| gd[at(l)]).sum();
                        for l in 0..len {
                            da[at(l)] = gd[at(l)] - y[at(l)].exp() * s;
                        }
                    }
                }
                let t = Tensor::new(out.shape().to_vec(), da).expect("shape");
                self.accumulate(grads, a, t);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let w = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; w];
                    let mut db = vec![0.0; w];
                    for (gr, nr) in gd.chunks(w).zip(normed.chunks(w)) {
                        for j in 0..w {
                            dg[j] += gr[j] * nr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::vector(dg));
                    self.accumulate(grads, *bias, Tensor::vector(db));
                }
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(gd.len());
                    for ((gr, nr), is) in gd.chunks(w).zip(normed.chunks(w)).zip(inv_std) {
                        let dn: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dn = dn.iter().sum::<f64>() / w as f64;
                        let mean_dn_n =
                            dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        dx.extend(
                            dn.iter()
                                .zip(nr)
                                .map(|(d, nv)| is * (d - mean_dn - nv * mean_dn_n)),
                        );
                    }
                    let t = Tensor::new(self.shape(*x).to_vec(), dx).expect("shape");
                    self.accumulate(grads, *x, t);
                }
            }
            Op::Dropout { a, mask } => {
                let da = gd.iter().zip(mask).map(|(x, m)| x * m).collect();
                let t = Tensor::new(g.shape().to_vec(), da).expect("shape");
                self.accumulate(grads, *a, t);
            }
            &Op::Sum { a, axis, scale } => {
                let sa = self.shape(a).to_vec();
                let (outer, len, inner) = axis_extents(&sa, axis);
                let mut da = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        da.extend(src.iter().map(|x| x * scale));
                    }
                }
                self.accumulate(grads, a, Tensor::new(sa, da).expect("shape"));
            }
            &Op::SumAll { a } => {
                let t = Tensor::full(self.shape(a), gd[0]);
                self.accumulate(grads, a, t);
            }
            Op::MaskFill { a, mask } => {
                let da = gd
                    .iter()
                    .zip(mask)
                    .map(|(&x, &m)| if m { 0.0 } else { x })
                    .collect();
                let t = Tensor::new(g.shape().to_vec(), da).expect("shape");
                self.accumulate(grads, *a, t);
            }
            &Op::Reshape { a } => {
                let t = g.clone().with_shape(self.shape(a).to_vec());
                self.accumulate(grads, a, t);
            }
            &Op::Narrow { a, axis, start } => {
                let sa = self.shape(a).to_vec();
                let (outer, alen, inner) = axis_extents(&sa, axis);
                let len = out.shape()[axis];
                let mut da = vec![0.0; sa.iter().product()];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, a, Tensor::new(sa, da).expect("shape"));
            }
            Op::L2Normalize { a, norms } => {
                let w = *out.shape().last().expect("rank >= 1");
                let mut da = Vec::with_capacity(gd.len());
                for ((gr, yr), n) in gd.chunks(w).zip(out.data().chunks(w)).zip(norms) {
                    let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    da.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * gy) / n));
                }
                let t = Tensor::new(out.shape().to_vec(), da).expect("shape");
                self.accumulate(grads, *a, t);
            }
            Op::GatherLast { a, indices } => {
                let sa = self.shape(*a).to_vec();
                let w = *sa.last().expect("rank >= 1");
                let mut da = vec![0.0; sa.iter().product()];
                for (r, &i) in indices.iter().enumerate() {
                    da[r * w + i] += gd[r];
                }
                self.accumulate(grads, *a, Tensor::new(sa, da).expect("shape"));
            }
            &Op::Dot { a, b } => {
                let s = gd[0];
                if self.rg(a) {
                    let da = self.value(b).data().iter().map(|x| x * s).collect();
                    let t = Tensor::new(self.shape(a).to_vec(), da).expect("shape");
                    self.accumulate(grads, a, t);
                }
                if self.rg(b) {
                    let db = self.value(a).data().iter().map(|x| x * s).collect();
                    let t = Tensor::new(self.shape(b).to_vec(), db).expect("shape");
                    self.accumulate(grads, b, t);
                }
            }
        }
    }
}

fn softmax_along(v: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = axis_extents(v.shape(), axis);
    let x = v.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for l in 0..len {
                let e = (x[at(l)] - max).exp();
                out[at(l)] = e;
                sum += e;
            }
            if log {
                let lse = max + sum.ln();
                for l in 0..len {
                    out[at(l)] = x[at(l)] - lse;
                }
            } else {
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
    }
    Tensor::new(v.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0; 3]));
        let s = t.softmax(x, 0).unwrap();
        assert!(close(t.value(s).data(), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![3.0, -1.0, 0.5, 10.0]));
        let shifted = t.affine(x, 1.0, 123.0);
        let a = t.softmax(x, 0).unwrap();
        let b = t.softmax(shifted, 0).unwrap();
        let total: f64 = t.value(a).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(close(t.value(a).data(), t.value(b).data(), 1e-12));
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![4.2; 5]));
        let g = t.constant(Tensor::full(&[5], 1.0));
        let b = t.constant(Tensor::zeros(&[5]));
        let y = t.layer_norm(x, g, b).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        assert_eq!(t.dropout(x, 0.0, &mut rng, true), x);
        assert_eq!(t.dropout(x, 0.5, &mut rng, false), x);
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::new();
        let n = 100_000;
        let x = t.constant(Tensor::full(&[n], 2.0));
        let y = t.dropout(x, 0.3, &mut rng, true);
        let mean = t.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.01, "mean {mean}");
    }

    #[test]
    fn grad_of_self_dot() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let d = t.dot(x, x).unwrap();
        let g = t.backward(d).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_grad_at_uniform_logits() {
        let c = 4;
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![1, c], vec![0.0; c]).unwrap());
        let loss = t.cross_entropy(x, &[2]).unwrap();
        assert!((t.value(loss).item() - (c as f64).ln()).abs() < 1e-12);
        let g = t.backward(loss).unwrap();
        let gd = g.get(x).unwrap().data();
        assert!((gd[2] - (1.0 / c as f64 - 1.0)).abs() < 1e-12);
        assert!((gd[0] - 1.0 / c as f64).abs() < 1e-12);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = t.constant(Tensor::zeros(&[4]));
        assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let y = t.tanh(x);
        assert!(matches!(t.backward(y), Err(DiffError::NonScalarRoot(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let d = t.dot(x, c).unwrap();
        let g = t.backward(d).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn identical_seeds_give_identical_passes() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut t = Tape::new();
            let x = t.param(Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
            let d = t.dropout(x, 0.4, &mut rng, true);
            let s = t.softmax(d, 1).unwrap();
            let l = t.sum_all(s);
            let l = t.mul(l, l).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(s).clone(), g.get(x).unwrap().clone())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }
}
