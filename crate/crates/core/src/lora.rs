//! Low-rank adapters: `ΔW = s · B·A` with `A: [r×k]`, `B: [d×r]`.
//!
//! In a [`ParamSet`] an adapter for layer `L` is stored as `L.lora_A` and
//! `L.lora_B`; its scaling lives in meta under `L.scaling` (falling back to a
//! set-wide `scaling` key).

use std::collections::BTreeMap;

use crate::checkpoint::ParamSet;
use crate::error::{AlignmentConflict, Error, Result};
use crate::tensor::Tensor;

pub const A_SUFFIX: &str = ".lora_A";
pub const B_SUFFIX: &str = ".lora_B";

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: Tensor,
    b: Tensor,
    scaling: f32,
}

impl LoraAdapter {
    pub fn new(a: Tensor, b: Tensor, scaling: f32) -> Result<Self> {
        let (r, _k) = a.dims2()?;
        let (_d, rb) = b.dims2()?;
        if r == 0 {
            return Err(Error::InvalidConfig("LoRA rank must be positive".into()));
        }
        if rb != r {
            return Err(Error::ShapeMismatch {
                op: "lora factors",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        if !scaling.is_finite() {
            return Err(Error::NonFinite(format!("LoRA scaling {scaling}")));
        }
        Ok(Self { a, b, scaling })
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scaling(&self) -> f32 {
        self.scaling
    }

    /// Shape `[d, k]` of the layer this adapter updates.
    pub fn target_shape(&self) -> [usize; 2] {
        [self.b.shape()[0], self.a.shape()[1]]
    }

    /// `s · B·A`.
    pub fn delta(&self) -> Result<Tensor> {
        self.b.matmul(&self.a)?.scale(self.scaling)
    }
}

/// Adapters keyed by target layer name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoraAdapterSet {
    layers: BTreeMap<String, LoraAdapter>,
}

impl LoraAdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: impl Into<String>, adapter: LoraAdapter) {
        self.layers.insert(layer.into(), adapter);
    }

    pub fn get(&self, layer: &str) -> Option<&LoraAdapter> {
        self.layers.get(layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LoraAdapter)> {
        self.layers.iter()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Collects every `*.lora_A` / `*.lora_B` pair from a parameter set.
    pub fn from_params(p: &ParamSet) -> Result<Self> {
        let mut set = Self::new();
        for (name, a) in p.iter() {
            let Some(layer) = name.strip_suffix(A_SUFFIX) else {
                continue;
            };
            let b = p.get(&format!("{layer}{B_SUFFIX}")).ok_or_else(|| {
                Error::Alignment(vec![AlignmentConflict::MissingRight(format!(
                    "{layer}{B_SUFFIX}"
                ))])
            })?;
            let scaling = p
                .meta_value(&format!("{layer}.scaling"))
                .or_else(|| p.meta_value("scaling"))
                .map(|s| {
                    s.parse::<f32>()
                        .map_err(|_| Error::Format(format!("bad scaling '{s}' for {layer}")))
                })
                .transpose()?
                .unwrap_or(1.0);
            set.insert(layer, LoraAdapter::new(a.clone(), b.clone(), scaling)?);
        }
        for name in p.names() {
            if let Some(layer) = name.strip_suffix(B_SUFFIX) {
                if !set.layers.contains_key(layer) {
                    return Err(Error::Alignment(vec![AlignmentConflict::MissingRight(
                        format!("{layer}{A_SUFFIX}"),
                    )]));
                }
            }
        }
        Ok(set)
    }

    /// Writes the factors and their rank/scaling meta.
    pub fn to_params(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for (layer, ad) in &self.layers {
            p.insert(format!("{layer}{A_SUFFIX}"), ad.a.clone())?;
            p.insert(format!("{layer}{B_SUFFIX}"), ad.b.clone())?;
            p.set_meta(format!("{layer}.rank"), ad.rank().to_string());
            p.set_meta(format!("{layer}.scaling"), ad.scaling.to_string());
        }
        let ranks: Vec<usize> = self.layers.values().map(LoraAdapter::rank).collect();
        if let Some(&r) = ranks.first() {
            if ranks.iter().all(|&x| x == r) {
                p.set_meta("rank", r.to_string());
            }
        }
        let scales: Vec<f32> = self.layers.values().map(|a| a.scaling).collect();
        if let Some(&s) = scales.first() {
            if scales.iter().all(|&x| x == s) {
                p.set_meta("scaling", s.to_string());
            }
        }
        Ok(p)
    }
}

/// One materialized `s·B·A` per layer, named `<layer>.delta`.
pub fn effective_delta(adapters: &LoraAdapterSet) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (layer, ad) in adapters.iter() {
        out.insert(format!("{layer}.delta"), ad.delta()?)?;
    }
    Ok(out)
}

/// Pairs each layer's capability `A` factor with the current `A`
/// displacement from the merged starting point. `B` factors never appear.
pub fn orth_param_selection(
    gamma: &LoraAdapterSet,
    current: &LoraAdapterSet,
    anchor: &LoraAdapterSet,
) -> Result<Vec<(String, Tensor, Tensor)>> {
    let mut conflicts = Vec::new();
    for layer in gamma.layers.keys() {
        if !current.layers.contains_key(layer) {
            conflicts.push(AlignmentConflict::MissingRight(layer.clone()));
        }
        if !anchor.layers.contains_key(layer) {
            conflicts.push(AlignmentConflict::MissingRight(format!("{layer} (anchor)")));
        }
    }
    for layer in current.layers.keys() {
        if !gamma.layers.contains_key(layer) {
            conflicts.push(AlignmentConflict::MissingLeft(layer.clone()));
        }
    }
    if !conflicts.is_empty() {
        return Err(Error::Alignment(conflicts));
    }

    let mut out = Vec::with_capacity(gamma.len());
    for (layer, g) in &gamma.layers {
        let cur = &current.layers[layer];
        let anc = &anchor.layers[layer];
        for other in [cur, anc] {
            if other.rank() != g.rank() {
                return Err(Error::RankMismatch {
                    name: layer.clone(),
                    left: g.rank(),
                    right: other.rank(),
                });
            }
        }
        let disp = cur.a.sub(&anc.a)?;
        out.push((format!("{layer}{A_SUFFIX}"), g.a.clone(), disp));
    }
    Ok(out)
}
