//! Every primitive's backward rule against central finite differences over
//! randomized shapes and values.

mod common;

use common::max_grad_error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srsupm::diffcore::{Tape, Tensor, Var};

const INSTANCES: u64 = 100;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Values bounded away from zero so relu kinks are never straddled.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Projects `out` onto a fixed random direction so every output element matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = rand_tensor(&mut rng, &shape);
    let w = tape.constant(w);
    tape.dot(out, w).unwrap()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..5)
}

fn check_all<F>(name: &str, mut make: F)
where
    F: FnMut(&mut ChaCha8Rng, u64) -> f64,
{
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        worst = worst.max(make(&mut rng, seed));
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn matmul_plain_and_transposed() {
    check_all("matmul", |rng, seed| {
        let (m, k, n) = (dim(rng), dim(rng), dim(rng));
        let a = rand_tensor(rng, &[m, k]);
        let b = rand_tensor(rng, &[k, n]);
        let bt = rand_tensor(rng, &[n, k]);
        let e1 = max_grad_error(&[a.clone(), b], |t, v| {
            let o = t.matmul(v[0], v[1], false).unwrap();
            project(t, o, seed)
        });
        let e2 = max_grad_error(&[a, bt], |t, v| {
            let o = t.matmul(v[0], v[1], true).unwrap();
            project(t, o, seed)
        });
        e1.max(e2)
    });
}

#[test]
fn matmul_batched_and_shared_rhs() {
    check_all("batched matmul", |rng, seed| {
        let (bt, m, k, n) = (dim(rng), dim(rng), dim(rng), dim(rng));
        let a = rand_tensor(rng, &[bt, m, k]);
        let b = rand_tensor(rng, &[bt, n, k]);
        let shared = rand_tensor(rng, &[k, n]);
        let e1 = max_grad_error(&[a.clone(), b], |t, v| {
            let o = t.matmul(v[0], v[1], true).unwrap();
            project(t, o, seed)
        });
        let e2 = max_grad_error(&[a, shared], |t, v| {
            let o = t.matmul(v[0], v[1], false).unwrap();
            project(t, o, seed)
        });
        e1.max(e2)
    });
}

#[test]
fn add_mul_affine_with_broadcast() {
    check_all("add/mul/affine", |rng, seed| {
        let (a0, a1, a2) = (dim(rng), dim(rng), dim(rng));
        let a = rand_tensor(rng, &[a0, a1, a2]);
        let b = rand_tensor(rng, &[a1, a2]);
        let c = rand_tensor(rng, &[a0, a1, a2]);
        max_grad_error(&[a, b, c], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let p = t.mul(s, v[2]).unwrap();
            let q = t.mul(p, v[1]).unwrap();
            let r = t.affine(q, -0.7, 0.3);
            let d = t.sub(r, v[0]).unwrap();
            project(t, d, seed)
        })
    });
}

#[test]
fn concat_narrow_reshape_select() {
    check_all("concat/narrow", |rng, seed| {
        let (r, c1, c2) = (dim(rng), dim(rng), dim(rng));
        let axis = rng.gen_range(0..2);
        let (sa, sb) = if axis == 1 {
            (vec![r, c1], vec![r, c2])
        } else {
            (vec![c1, r], vec![c2, r])
        };
        let a = rand_tensor(rng, &sa);
        let b = rand_tensor(rng, &sb);
        max_grad_error(&[a, b], |t, v| {
            let c = t.concat(&[v[0], v[1]], axis).unwrap();
            let total = t.shape(c)[axis];
            let n = t.narrow(c, axis, total / 3, total - total / 3).unwrap();
            let flat: usize = t.shape(n).iter().product();
            let re = t.reshape(n, &[flat]).unwrap();
            let s = t.select(c, axis, 0).unwrap();
            let p1 = project(t, re, seed);
            let p2 = project(t, s, seed + 1);
            t.add(p1, p2).unwrap()
        })
    });
}

#[test]
fn elementwise_activations() {
    check_all("tanh/sigmoid/relu", |rng, seed| {
        let shape = [dim(rng), dim(rng)];
        let x = rand_away_from_zero(rng, &shape);
        max_grad_error(&[x], |t, v| {
            let a = t.tanh(v[0]);
            let b = t.sigmoid(v[0]);
            let c = t.relu(v[0]);
            let s = t.add(a, b).unwrap();
            let s = t.mul(s, c).unwrap();
            let s = t.add(s, c).unwrap();
            project(t, s, seed)
        })
    });
}

#[test]
fn embedding_lookup_with_repeats() {
    check_all("embedding", |rng, seed| {
        let rows = rng.gen_range(2..6);
        let width = dim(rng);
        let table = rand_tensor(rng, &[rows, width]);
        let idx: Vec<usize> = (0..6).map(|_| rng.gen_range(0..rows)).collect();
        max_grad_error(&[table], |t, v| {
            let e = t.embedding(v[0], &idx, &[2, 3]).unwrap();
            project(t, e, seed)
        })
    });
}

#[test]
fn softmax_and_log_softmax_each_axis() {
    check_all("softmax", |rng, seed| {
        let shape = [dim(rng) + 1, dim(rng) + 1, dim(rng)];
        let axis = rng.gen_range(0..3);
        let x = rand_tensor(rng, &shape);
        max_grad_error(&[x], |t, v| {
            let s = t.softmax(v[0], axis).unwrap();
            let l = t.log_softmax(v[0], axis).unwrap();
            let p1 = project(t, s, seed);
            let p2 = project(t, l, seed + 7);
            t.add(p1, p2).unwrap()
        })
    });
}

#[test]
fn layer_norm_all_inputs() {
    check_all("layer_norm", |rng, seed| {
        let w = rng.gen_range(3..8);
        let r = dim(rng);
        let x = rand_tensor(rng, &[r, w]);
        let g = rand_tensor(rng, &[w]);
        let b = rand_tensor(rng, &[w]);
        max_grad_error(&[x, g, b], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            project(t, y, seed)
        })
    });
}

#[test]
fn dropout_with_fixed_mask() {
    check_all("dropout", |rng, seed| {
        let shape = [dim(rng), dim(rng)];
        let x = rand_tensor(rng, &shape);
        max_grad_error(&[x], |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let y = t.dropout(v[0], 0.3, &mut r, true);
            project(t, y, seed)
        })
    });
}

#[test]
fn reductions_and_dot() {
    check_all("sum/mean/dot", |rng, seed| {
        let shape = [dim(rng), dim(rng), dim(rng)];
        let axis = rng.gen_range(0..3);
        let x = rand_tensor(rng, &shape);
        let y = rand_tensor(rng, &shape);
        max_grad_error(&[x, y], |t, v| {
            let s = t.sum(v[0], axis).unwrap();
            let m = t.mean(v[1], axis).unwrap();
            let p = t.mul(s, m).unwrap();
            let p = project(t, p, seed);
            let d = t.dot(v[0], v[1]).unwrap();
            let all = t.sum_all(v[0]);
            let ma = t.mean_all(v[1]);
            let q = t.add(d, all).unwrap();
            let q = t.add(q, ma).unwrap();
            let q = t.mul(q, q).unwrap();
            t.add(p, q).unwrap()
        })
    });
}

#[test]
fn mask_fill_blocks_gradient() {
    check_all("mask_fill", |rng, seed| {
        let shape = [dim(rng), dim(rng) + 1];
        let n: usize = shape.iter().product();
        let mask: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let x = rand_tensor(rng, &shape);
        max_grad_error(&[x], |t, v| {
            let m = t.mask_fill(v[0], &mask, -1e9).unwrap();
            let s = t.softmax(m, 1).unwrap();
            project(t, s, seed)
        })
    });
}

#[test]
fn l2_normalize_and_gather() {
    check_all("l2_normalize/gather_last", |rng, seed| {
        let (r, c) = (dim(rng), dim(rng) + 1);
        let x = rand_away_from_zero(rng, &[r, c]);
        let idx: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
        max_grad_error(&[x], |t, v| {
            let n = t.l2_normalize(v[0]).unwrap();
            let g = t.gather_last(n, &idx).unwrap();
            let p1 = project(t, n, seed);
            let p2 = project(t, g, seed + 3);
            t.add(p1, p2).unwrap()
        })
    });
}

#[test]
fn cross_entropy_composite() {
    check_all("cross_entropy", |rng, _seed| {
        let (r, c) = (dim(rng), dim(rng) + 1);
        let x = rand_tensor(rng, &[r, c]);
        let idx: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
        max_grad_error(&[x], |t, v| t.cross_entropy(v[0], &idx).unwrap())
    });
}
