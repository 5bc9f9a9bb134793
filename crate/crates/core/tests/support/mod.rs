//! Fixtures and independent f64 oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use capvec_core::autodiff::{Graph, NodeId};
use capvec_core::orth::OrthPenalty;
use capvec_core::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut impl Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rand_vec(rng, n, scale)).unwrap()
}

/// Values bounded away from zero by `gap`, for ops with a kink there.
pub fn rand_away_from_zero(rng: &mut impl Rng, shape: &[usize], scale: f32, gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..scale);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Three tensors with random shapes under fixed names.
pub fn rand_checkpoint(rng: &mut impl Rng) -> ParamSet {
    let mut p = ParamSet::new();
    let r = rng.random_range(1..6);
    let c = rng.random_range(1..6);
    p.insert("layer.0.weight", rand_tensor(rng, &[r, c], 2.0)).unwrap();
    p.insert("layer.0.bias", rand_tensor(rng, &[r], 2.0)).unwrap();
    p.insert("head.scale", rand_tensor(rng, &[], 2.0)).unwrap();
    p
}

/// Same names and shapes as `like`, fresh values.
pub fn rand_like(rng: &mut impl Rng, like: &ParamSet) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, t) in like.iter() {
        p.insert(name.clone(), rand_tensor(rng, t.shape(), 2.0)).unwrap();
    }
    p
}

pub fn ulp_distance(a: f32, b: f32) -> u32 {
    if a == b {
        return 0;
    }
    let key = |x: f32| {
        let i = x.to_bits() as i32;
        if i < 0 {
            i32::MIN.wrapping_sub(i)
        } else {
            i
        }
    };
    key(a).abs_diff(key(b))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

// ---------------------------------------------------------------------------
// f64 reference math, written independently of the library.

pub fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn ref_transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub fn ref_orth(gamma: &[f64], disp: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..gamma.len() {
        s += (gamma[i] * disp[i]).abs();
    }
    s
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Gradient checking against central differences of the f64 reference.

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

type Build = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;
type Reference = dyn Fn(&[Vec<f64>]) -> f64;
type Skip = dyn Fn(&[Vec<f64>], usize, usize) -> bool;

pub struct GradCase {
    pub op: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<Build>,
    pub reference: Box<Reference>,
    /// Components too close to a kink to compare.
    pub skip: Box<Skip>,
}

impl GradCase {
    pub fn check(&self, h: f64) -> GradCheck {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(&format!("x{i}"), t.clone()).unwrap())
            .collect();
        let root = (self.build)(&mut g, &ids);
        let grads = g.backward(root).unwrap();

        let base: Vec<Vec<f64>> = self.inputs.iter().map(to_f64).collect();
        let mut out = GradCheck::default();
        for (i, t) in self.inputs.iter().enumerate() {
            let analytic = grads[&format!("x{i}")].data();
            for j in 0..t.numel() {
                if (self.skip)(&base, i, j) {
                    continue;
                }
                let mut hi = base.clone();
                hi[i][j] += h;
                let mut lo = base.clone();
                lo[i][j] -= h;
                let numeric = ((self.reference)(&hi) - (self.reference)(&lo)) / (2.0 * h);
                let a = analytic[j] as f64;
                if numeric.abs() <= 1e-6 && a.abs() <= 1e-6 {
                    continue;
                }
                out.max_rel_err = out.max_rel_err.max(rel_err(a, numeric));
                out.checked += 1;
            }
        }
        out
    }
}

fn never(_: &[Vec<f64>], _: usize, _: usize) -> bool {
    false
}

/// Weighted sum of a tensor-valued node, so every output element carries a
/// distinct upstream gradient.
fn weighted(g: &mut Graph, out: NodeId, w: &Tensor) -> NodeId {
    let wn = g.constant(w.clone());
    let m = g.mul(out, wn).unwrap();
    g.sum(m).unwrap()
}

pub const GRAD_OPS: [&str; 18] = [
    "add", "sub", "mul", "scale", "matmul", "transpose", "relu", "tanh", "abs", "sum", "mean",
    "expand_rows", "row_sum", "expand_cols", "l1_loss", "mse_loss", "orth_penalty", "two_layer",
];

/// A random instance of the `k`-th op in [`GRAD_OPS`].
pub fn grad_case(k: usize, rng: &mut ChaCha8Rng) -> GradCase {
    let m = rng.random_range(1..5);
    let n = rng.random_range(1..5);
    let op = GRAD_OPS[k % GRAD_OPS.len()];
    let w = rand_tensor(rng, &[m, n], 1.0);
    let wv = to_f64(&w);
    match op {
        "add" | "sub" | "mul" => {
            let a = rand_tensor(rng, &[m, n], 2.0);
            let b = rand_tensor(rng, &[m, n], 2.0);
            let (w2, wv2) = (w.clone(), wv.clone());
            GradCase {
                op,
                inputs: vec![a, b],
                build: Box::new(move |g, x| {
                    let o = match op {
                        "add" => g.add(x[0], x[1]),
                        "sub" => g.sub(x[0], x[1]),
                        _ => g.mul(x[0], x[1]),
                    }
                    .unwrap();
                    weighted(g, o, &w2)
                }),
                reference: Box::new(move |v| {
                    let o: Vec<f64> = v[0]
                        .iter()
                        .zip(&v[1])
                        .map(|(a, b)| match op {
                            "add" => a + b,
                            "sub" => a - b,
                            _ => a * b,
                        })
                        .collect();
                    dot(&o, &wv2)
                }),
                skip: Box::new(never),
            }
        }
        "scale" => {
            let c = rng.random_range(-3.0f32..3.0);
            GradCase {
                op,
                inputs: vec![rand_tensor(rng, &[m, n], 2.0)],
                build: Box::new(move |g, x| {
                    let o = g.scale(c, x[0]).unwrap();
                    weighted(g, o, &w)
                }),
                reference: Box::new(move |v| {
                    let o: Vec<f64> = v[0].iter().map(|a| c as f64 * a).collect();
                    dot(&o, &wv)
                }),
                skip: Box::new(never),
            }
        }
        "matmul" => {
            let k = rng.random_range(1..5);
            GradCase {
                op,
                inputs: vec![rand_tensor(rng, &[m, k], 2.0), rand_tensor(rng, &[k, n], 2.0)],
                build: Box::new(move |g, x| {
                    let o = g.matmul(x[0], x[1]).unwrap();
                    weighted(g, o, &w)
                }),
                reference: Box::new(move |v| dot(&ref_matmul(&v[0], &v[1], m, k, n), &wv)),
                skip: Box::new(never),
            }
        }
        "transpose" => GradCase {
            op,
            inputs: vec![rand_tensor(rng, &[n, m], 2.0)],
            build: Box::new(move |g, x| {
                let o = g.transpose(x[0]).unwrap();
                weighted(g, o, &w)
            }),
            reference: Box::new(move |v| dot(&ref_transpose(&v[0], n, m), &wv)),
            skip: Box::new(never),
        },
        "relu" | "tanh" | "abs" => {
            let x = if op == "tanh" {
                rand_tensor(rng, &[m, n], 2.0)
            } else {
                rand_away_from_zero(rng, &[m, n], 2.0, 0.05)
            };
            GradCase {
                op,
                inputs: vec![x],
                build: Box::new(move |g, x| {
                    let o = match op {
                        "relu" => g.relu(x[0]),
                        "tanh" => g.tanh(x[0]),
                        _ => g.abs(x[0]),
                    }
                    .unwrap();
                    weighted(g, o, &w)
                }),
                reference: Box::new(move |v| {
                    let o: Vec<f64> = v[0]
                        .iter()
                        .map(|&a| match op {
                            "relu" => a.max(0.0),
                            "tanh" => a.tanh(),
                            _ => a.abs(),
                        })
                        .collect();
                    dot(&o, &wv)
                }),
                skip: Box::new(move |v, _, j| op != "tanh" && v[0][j].abs() < 0.05),
            }
        }
        "sum" | "mean" => {
            let c = rng.random_range(0.5f32..2.0);
            GradCase {
                op,
                inputs: vec![rand_tensor(rng, &[m, n], 2.0)],
                build: Box::new(move |g, x| {
                    let o = if op == "sum" { g.sum(x[0]) } else { g.mean(x[0]) }.unwrap();
                    g.scale(c, o).unwrap()
                }),
                reference: Box::new(move |v| {
                    let s: f64 = v[0].iter().sum();
                    c as f64 * if op == "sum" { s } else { s / (m * n) as f64 }
                }),
                skip: Box::new(never),
            }
        }
        "expand_rows" => GradCase {
            op,
            inputs: vec![rand_tensor(rng, &[n], 2.0)],
            build: Box::new(move |g, x| {
                let o = g.expand_rows(x[0], m).unwrap();
                weighted(g, o, &w)
            }),
            reference: Box::new(move |v| {
                let o: Vec<f64> = (0..m * n).map(|i| v[0][i % n]).collect();
                dot(&o, &wv)
            }),
            skip: Box::new(never),
        },
        "row_sum" => {
            let w1 = rand_tensor(rng, &[m, 1], 1.0);
            let wv1 = to_f64(&w1);
            GradCase {
                op,
                inputs: vec![rand_tensor(rng, &[m, n], 2.0)],
                build: Box::new(move |g, x| {
                    let o = g.row_sum(x[0]).unwrap();
                    weighted(g, o, &w1)
                }),
                reference: Box::new(move |v| {
                    let o: Vec<f64> = (0..m).map(|i| v[0][i * n..(i + 1) * n].iter().sum()).collect();
                    dot(&o, &wv1)
                }),
                skip: Box::new(never),
            }
        }
        "expand_cols" => GradCase {
            op,
            inputs: vec![rand_tensor(rng, &[m, 1], 2.0)],
            build: Box::new(move |g, x| {
                let o = g.expand_cols(x[0], n).unwrap();
                weighted(g, o, &w)
            }),
            reference: Box::new(move |v| {
                let o: Vec<f64> = (0..m * n).map(|i| v[0][i / n]).collect();
                dot(&o, &wv)
            }),
            skip: Box::new(never),
        },
        "l1_loss" | "mse_loss" => {
            let p = rand_tensor(rng, &[m, n], 2.0);
            // Offsets bounded away from zero keep L1 off its kinks.
            let off = rand_away_from_zero(rng, &[m, n], 1.0, 0.05);
            let t = p.add(&off).unwrap();
            GradCase {
                op,
                inputs: vec![p, t],
                build: Box::new(move |g, x| {
                    if op == "l1_loss" {
                        g.l1_loss(x[0], x[1]).unwrap()
                    } else {
                        g.mse_loss(x[0], x[1]).unwrap()
                    }
                }),
                reference: Box::new(move |v| {
                    let s: f64 = v[0]
                        .iter()
                        .zip(&v[1])
                        .map(|(a, b)| if op == "l1_loss" { (a - b).abs() } else { (a - b) * (a - b) })
                        .sum();
                    s / (m * n) as f64
                }),
                skip: Box::new(move |v, _, j| op == "l1_loss" && (v[0][j] - v[1][j]).abs() < 0.05),
            }
        }
        "orth_penalty" => {
            let gamma = rand_tensor(rng, &[m, n], 2.0);
            let anchor = rand_tensor(rng, &[m, n], 2.0);
            let cur = anchor.add(&rand_away_from_zero(rng, &[m, n], 1.0, 0.05)).unwrap();
            let mut gp = ParamSet::new();
            gp.insert("x0", gamma.clone()).unwrap();
            let mut ap = ParamSet::new();
            ap.insert("x0", anchor.clone()).unwrap();
            let pen = Arc::new(OrthPenalty::new(&gp, &ap).unwrap());
            let (gv, av) = (to_f64(&gamma), to_f64(&anchor));
            let av2 = av.clone();
            GradCase {
                op,
                inputs: vec![cur],
                build: Box::new(move |g, x| {
                    let nodes = [("x0".to_string(), x[0])].into_iter().collect();
                    pen.attach(g, &nodes).unwrap()
                }),
                reference: Box::new(move |v| {
                    let d: Vec<f64> = v[0].iter().zip(&av).map(|(c, a)| c - a).collect();
                    ref_orth(&gv, &d)
                }),
                skip: Box::new(move |v, _, j| (v[0][j] - av2[j]).abs() < 0.05),
            }
        }
        _ => two_layer_case(rng),
    }
}

/// `mse(tanh(x·W1ᵀ + b1)·W2ᵀ + b2, y)` with all four parameters trainable.
pub fn two_layer_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (bsz, i, h, o) = (5, 3, 4, 2);
    let x = rand_tensor(rng, &[bsz, i], 1.0);
    let y = rand_tensor(rng, &[bsz, o], 1.0);
    let (xv, yv) = (to_f64(&x), to_f64(&y));
    GradCase {
        op: "two_layer",
        inputs: vec![
            rand_tensor(rng, &[h, i], 1.0),
            rand_tensor(rng, &[h], 0.5),
            rand_tensor(rng, &[o, h], 1.0),
            rand_tensor(rng, &[o], 0.5),
        ],
        build: Box::new(move |g, p| {
            let xn = g.constant(x.clone());
            let yn = g.constant(y.clone());
            let w1t = g.transpose(p[0]).unwrap();
            let z = g.matmul(xn, w1t).unwrap();
            let b1 = g.expand_rows(p[1], bsz).unwrap();
            let z = g.add(z, b1).unwrap();
            let a = g.tanh(z).unwrap();
            let w2t = g.transpose(p[2]).unwrap();
            let out = g.matmul(a, w2t).unwrap();
            let b2 = g.expand_rows(p[3], bsz).unwrap();
            let out = g.add(out, b2).unwrap();
            g.mse_loss(out, yn).unwrap()
        }),
        reference: Box::new(move |p| {
            let z = ref_matmul(&xv, &ref_transpose(&p[0], h, i), bsz, i, h);
            let a: Vec<f64> = z.iter().enumerate().map(|(k, v)| (v + p[1][k % h]).tanh()).collect();
            let out = ref_matmul(&a, &ref_transpose(&p[2], o, h), bsz, h, o);
            let s: f64 = out
                .iter()
                .enumerate()
                .map(|(k, v)| (v + p[3][k % o] - yv[k]).powi(2))
                .sum();
            s / (bsz * o) as f64
        }),
        skip: Box::new(never),
    }
}
