//! Orthogonal regularization between a frozen capability vector γ and the
//! downstream displacement Δ' = θ − θ_meta:
//!
//! ```text
//! L_orth = Σ_p Σ_ij |γ_ij · Δ'_ij|        L = L_action + λ · L_orth
//! ```
//!
//! The sum is unnormalized, so the effective strength of λ grows with the
//! number of paired elements. One-dimensional parameters (biases) are
//! included with a single index.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::{Graph, NodeId, ScalarOp};
use crate::checkpoint::ParamSet;
use crate::error::{AlignmentConflict, Error, Result};
use crate::lora::{orth_param_selection, LoraAdapterSet};
use crate::tensor::Tensor;

/// Orthogonality weight that performed best in the original λ sweep.
pub const DEFAULT_LAMBDA: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct OrthPair {
    pub name: String,
    pub gamma: Tensor,
    pub displacement: Tensor,
}

/// Pairs `(γ^(p), Δ'^(p))`, kept sorted by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrthPairList {
    pairs: Vec<OrthPair>,
}

impl OrthPairList {
    pub fn new(pairs: impl IntoIterator<Item = (String, Tensor, Tensor)>) -> Result<Self> {
        let mut out: Vec<OrthPair> = Vec::new();
        for (name, gamma, displacement) in pairs {
            if gamma.shape() != displacement.shape() {
                return Err(Error::ShapeMismatch {
                    op: "orth pair",
                    left: gamma.shape().to_vec(),
                    right: displacement.shape().to_vec(),
                });
            }
            out.push(OrthPair {
                name,
                gamma,
                displacement,
            });
        }
        out.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = out.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(Error::DuplicateKey(w[0].name.clone()));
        }
        Ok(Self { pairs: out })
    }

    pub fn iter(&self) -> impl Iterator<Item = &OrthPair> {
        self.pairs.iter()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Total number of paired elements.
    pub fn num_elements(&self) -> usize {
        self.pairs.iter().map(|p| p.gamma.numel()).sum()
    }
}

/// `Σ_i |g_i·d(i)|`, accumulated in f64 in row-major order.
#[inline]
fn abs_product_sum(g: &[f32], d: impl Fn(usize) -> f32) -> f64 {
    let mut s = 0.0f64;
    for (i, &gi) in g.iter().enumerate() {
        s += (gi as f64 * d(i) as f64).abs();
    }
    s
}

fn pair_loss(gamma: &[f32], disp: &[f32]) -> f64 {
    abs_product_sum(gamma, |i| disp[i])
}

/// `Σ_p Σ_ij |γ_ij Δ'_ij|`, reduced in name order then row-major order.
pub fn orth_loss(pairs: &OrthPairList) -> f64 {
    pairs
        .iter()
        .map(|p| pair_loss(p.gamma.data(), p.displacement.data()))
        .sum()
}

/// Per-parameter contributions, split into matrices and vectors.
pub fn orth_loss_by_param(pairs: &OrthPairList) -> Vec<(String, f64, bool)> {
    pairs
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                pair_loss(p.gamma.data(), p.displacement.data()),
                p.gamma.rank() < 2,
            )
        })
        .collect()
}

fn pair_grad(gamma: &Tensor, disp: &Tensor) -> Tensor {
    let data = gamma
        .data()
        .iter()
        .zip(disp.data())
        .map(|(&g, &d)| {
            if d > 0.0 {
                g.abs()
            } else if d < 0.0 {
                -g.abs()
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(disp.shape().to_vec(), data).expect("finite by construction")
}

/// Subgradient with respect to each displacement: `|γ|·sign(Δ')`, zero at
/// `Δ' = 0`.
pub fn orth_loss_grad(pairs: &OrthPairList) -> BTreeMap<String, Tensor> {
    pairs
        .iter()
        .map(|p| (p.name.clone(), pair_grad(&p.gamma, &p.displacement)))
        .collect()
}

/// `⟨γ^(p), Δ'^(p)⟩` per parameter.
pub fn inner_product_residual(pairs: &OrthPairList) -> BTreeMap<String, f64> {
    pairs
        .iter()
        .map(|p| {
            let ip = p
                .gamma
                .data()
                .iter()
                .zip(p.displacement.data())
                .map(|(&g, &d)| g as f64 * d as f64)
                .sum();
            (p.name.clone(), ip)
        })
        .collect()
}

/// Multiply-adds spent on the penalty per evaluation: one per paired element.
pub fn orth_mac_count(pairs: &OrthPairList) -> usize {
    pairs.num_elements()
}

/// A frozen γ together with the anchor (θ_meta) displacements are measured
/// from. Plugs into a [`Graph`] as a single scalar node.
#[derive(Debug, Clone)]
pub struct OrthPenalty {
    // Shared so attaching to a fresh graph every step copies nothing.
    op: Arc<PenaltyOp>,
}

impl OrthPenalty {
    /// Full-tuning form: every γ key, anchored at the same key of θ_meta.
    pub fn new(gamma: &ParamSet, anchor: &ParamSet) -> Result<Self> {
        let mut entries = Vec::with_capacity(gamma.len());
        let mut conflicts = Vec::new();
        for (name, g) in gamma.iter() {
            match anchor.get(name) {
                Some(a) if a.shape() == g.shape() => {
                    entries.push((name.clone(), g.clone(), a.clone()))
                }
                Some(a) => conflicts.push(AlignmentConflict::Shape {
                    name: name.clone(),
                    left: g.shape().to_vec(),
                    right: a.shape().to_vec(),
                }),
                None => conflicts.push(AlignmentConflict::MissingRight(name.clone())),
            }
        }
        if !conflicts.is_empty() {
            return Err(Error::Alignment(conflicts));
        }
        Ok(Self::from_entries(entries))
    }

    /// LoRA form: only the `A` factors of each adapted layer are paired.
    pub fn lora(gamma: &ParamSet, anchor: &ParamSet) -> Result<Self> {
        let g = LoraAdapterSet::from_params(gamma)?;
        let a = LoraAdapterSet::from_params(anchor)?;
        let sel = orth_param_selection(&g, &a, &a)?;
        let entries = sel
            .into_iter()
            .map(|(name, ga, _)| {
                let anchor_a = anchor.get(&name).unwrap().clone();
                (name, ga, anchor_a)
            })
            .collect::<Vec<_>>();
        let mut entries = entries;
        entries.sort_by(|x, y| x.0.cmp(&y.0));
        Ok(Self::from_entries(entries))
    }

    fn from_entries(entries: Vec<(String, Tensor, Tensor)>) -> Self {
        let magnitudes = entries
            .iter()
            .map(|(_, g, _)| g.data().iter().map(|v| v.abs()).collect())
            .collect();
        Self {
            op: Arc::new(PenaltyOp { entries, magnitudes }),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.op.entries.iter().map(|(n, _, _)| n)
    }

    pub fn num_elements(&self) -> usize {
        self.op.entries.iter().map(|(_, g, _)| g.numel()).sum()
    }

    /// Pairs at the given current parameters.
    pub fn pairs_at(&self, current: &ParamSet) -> Result<OrthPairList> {
        let mut v = Vec::with_capacity(self.op.entries.len());
        for (name, g, a) in self.op.entries.iter() {
            let cur = current.get(name).ok_or_else(|| {
                Error::Alignment(vec![AlignmentConflict::MissingRight(name.clone())])
            })?;
            v.push((name.clone(), g.clone(), cur.sub(a)?));
        }
        OrthPairList::new(v)
    }

    /// Adds the penalty as a node whose inputs are the current parameter
    /// nodes, looked up by name.
    pub fn attach(&self, g: &mut Graph, nodes: &BTreeMap<String, NodeId>) -> Result<NodeId> {
        let mut inputs = Vec::with_capacity(self.op.entries.len());
        for (name, _, _) in self.op.entries.iter() {
            let id = nodes.get(name).ok_or_else(|| {
                Error::Alignment(vec![AlignmentConflict::MissingRight(name.clone())])
            })?;
            inputs.push(*id);
        }
        g.custom(&inputs, self.op.clone())
    }
}

#[derive(Debug)]
struct PenaltyOp {
    entries: Vec<(String, Tensor, Tensor)>,
    // |γ| per entry, for the gradient.
    magnitudes: Vec<Vec<f32>>,
}

// Fused so no displacement tensors are materialized; sums in the same order
// as `orth_loss` over `pairs_at`.
impl ScalarOp for PenaltyOp {
    fn name(&self) -> &'static str {
        "orth_penalty"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<f32> {
        let mut total = 0.0f64;
        for ((_, g, a), cur) in self.entries.iter().zip(inputs) {
            let (a, c) = (a.data(), cur.data());
            total += abs_product_sum(g.data(), |i| c[i] - a[i]);
        }
        Ok(total as f32)
    }

    fn backward_into(&self, inputs: &[&Tensor], index: usize, upstream: f32, out: &mut [f32]) {
        // d(cur - anchor)/d(cur) is the identity, so the displacement
        // gradient is the parameter gradient.
        let a = self.entries[index].2.data();
        let mag = &self.magnitudes[index];
        let cur = inputs[index].data();
        for (((o, &m), &ai), &ci) in out.iter_mut().zip(mag).zip(a).zip(cur) {
            let d = ci - ai;
            let sign = (d > 0.0) as i32 as f32 - (d < 0.0) as i32 as f32;
            *o += upstream * m * sign;
        }
    }
}

/// `L_action + λ·L_orth`. With `λ = 0` the action node is returned as is, so
/// the gradient is exactly the action gradient.
pub fn total_loss(g: &mut Graph, action: NodeId, orth: NodeId, lambda: f32) -> Result<NodeId> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(Error::NegativeLambda(lambda as f64));
    }
    if lambda == 0.0 {
        return Ok(action);
    }
    let weighted = g.scale(lambda, orth)?;
    g.add(action, weighted)
}
