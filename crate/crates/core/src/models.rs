//! Small differentiable models with a tapped hidden layer, the auxiliary
//! alignment objective, and a linear capability probe.
//!
//! `widths` lists every layer boundary, input first and action output last,
//! so `[16, 32, 4]` is two layers. The hidden tap is the pre-activation
//! output of layer `hidden_tap`. Parameters up to and including the tap live
//! under `encoder.`, the rest under `head.`. Weights are stored `[out × in]`.
//!
//! `tiny_attn` replaces layer 0 with one softmax-free attention block over
//! two tokens (the two halves of the observation).

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::ParamSet;
use crate::error::{Error, Result};
use crate::lora::{A_SUFFIX, B_SUFFIX};
use crate::synth::TaskFamily;
use crate::tensor::Tensor;

pub const PROBE_SEED: u64 = 0x5052_4F42;
pub const PROBE_RIDGE: f64 = 1e-3;
pub const PROBE_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    TinyAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    /// Makes the whole network linear; used by closed-form fixtures.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TuningMode {
    Full,
    Lora { rank: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub widths: Vec<usize>,
    pub hidden_tap: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_tuning")]
    pub tuning_mode: TuningMode,
    #[serde(default = "default_scaling")]
    pub lora_scaling: f32,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_tuning() -> TuningMode {
    TuningMode::Full
}

fn default_scaling() -> f32 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::mlp(vec![16, 32, 8, 4], 1)
    }
}

impl ModelConfig {
    pub fn mlp(widths: Vec<usize>, hidden_tap: usize) -> Self {
        Self {
            architecture: Architecture::Mlp,
            widths,
            hidden_tap,
            activation: Activation::Tanh,
            tuning_mode: TuningMode::Full,
            lora_scaling: 1.0,
        }
    }

    pub fn tiny_attn(widths: Vec<usize>, hidden_tap: usize) -> Self {
        Self {
            architecture: Architecture::TinyAttn,
            ..Self::mlp(widths, hidden_tap)
        }
    }

    pub fn with_lora(mut self, rank: usize) -> Self {
        self.tuning_mode = TuningMode::Lora { rank };
        self
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn obs_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn action_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn tap_width(&self) -> usize {
        self.widths[self.hidden_tap + 1]
    }

    pub fn is_lora(&self) -> bool {
        matches!(self.tuning_mode, TuningMode::Lora { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.widths.len() < 3 {
            return bad(format!(
                "widths needs input, at least one hidden and output size, got {:?}",
                self.widths
            ));
        }
        if self.widths.contains(&0) {
            return bad("widths must be positive".into());
        }
        if self.hidden_tap + 1 >= self.num_layers() {
            return bad(format!(
                "hidden_tap {} must index a non-output layer (layers: {})",
                self.hidden_tap,
                self.num_layers()
            ));
        }
        if self.architecture == Architecture::TinyAttn && self.widths[0] % 2 != 0 {
            return bad("tiny_attn needs an even observation width".into());
        }
        if let TuningMode::Lora { rank } = self.tuning_mode {
            if rank == 0 {
                return bad("LoRA rank must be >= 1".into());
            }
        }
        if !self.lora_scaling.is_finite() {
            return bad("lora_scaling must be finite".into());
        }
        Ok(())
    }

    /// Checks the end widths against a task family.
    pub fn check_dims(&self, obs_dim: usize, action_dim: usize) -> Result<()> {
        self.validate()?;
        if self.obs_dim() != obs_dim || self.action_dim() != action_dim {
            return Err(Error::InvalidConfig(format!(
                "model maps {}→{} but the family has {}→{}",
                self.obs_dim(),
                self.action_dim(),
                obs_dim,
                action_dim
            )));
        }
        Ok(())
    }
}

fn prefix(cfg: &ModelConfig, layer: usize) -> &'static str {
    if layer <= cfg.hidden_tap {
        "encoder"
    } else {
        "head"
    }
}

/// Base parameter names and shapes in initialization order.
fn base_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for k in 0..cfg.num_layers() {
        let p = format!("{}.{k}", prefix(cfg, k));
        let (i, o) = (cfg.widths[k], cfg.widths[k + 1]);
        if k == 0 && cfg.architecture == Architecture::TinyAttn {
            let t = i / 2;
            for w in ["wq", "wk", "wv"] {
                out.push((format!("{p}.{w}"), vec![o, t]));
            }
            out.push((format!("{p}.wo0"), vec![o, o]));
            out.push((format!("{p}.wo1"), vec![o, o]));
        } else {
            out.push((format!("{p}.weight"), vec![o, i]));
        }
        out.push((format!("{p}.bias"), vec![o]));
    }
    out
}

fn is_adapter(name: &str) -> bool {
    name.ends_with(A_SUFFIX) || name.ends_with(B_SUFFIX)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
}

/// Graph handles for one bound parameter set.
pub struct Bound {
    pub nodes: BTreeMap<String, NodeId>,
}

pub fn init_model(config: &ModelConfig, seed: u64) -> Result<(Model, ParamSet)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let shapes = base_shapes(config);
    for (name, shape) in &shapes {
        let t = if shape.len() == 1 {
            Tensor::zeros(shape)
        } else {
            let std = 1.0 / (shape[1] as f32).sqrt();
            let data = (0..shape[0] * shape[1])
                .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
                .collect();
            Tensor::new(shape.clone(), data)?
        };
        p.insert(name.clone(), t)?;
    }
    if let TuningMode::Lora { rank } = config.tuning_mode {
        let mut frozen = Vec::new();
        for (name, shape) in &shapes {
            frozen.push(name.clone());
            if shape.len() != 2 {
                continue;
            }
            let (d, k) = (shape[0], shape[1]);
            let std = 1.0 / (k as f32).sqrt();
            let a = (0..rank * k)
                .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
                .collect();
            p.insert(format!("{name}{A_SUFFIX}"), Tensor::new(vec![rank, k], a)?)?;
            p.insert(format!("{name}{B_SUFFIX}"), Tensor::zeros(&[d, rank]))?;
        }
        p.set_meta("frozen", frozen.join(","));
        p.set_meta("rank", rank.to_string());
        p.set_meta("scaling", config.lora_scaling.to_string());
    }
    p.set_meta("model", serde_json::to_string(config)?);
    p.set_meta("init_seed", seed.to_string());
    Ok((Model::new(config.clone())?, p))
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tap_width(&self) -> usize {
        self.config.tap_width()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.config.is_lora() || is_adapter(name)
    }

    pub fn trainable_names(&self, params: &ParamSet) -> Vec<String> {
        params
            .names()
            .filter(|n| self.is_trainable(n))
            .cloned()
            .collect()
    }

    /// Number of trainable scalars in a parameter set for this model.
    pub fn trainable_count(&self, params: &ParamSet) -> usize {
        params
            .iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// `Σ(in·out + out)` style count of the base parameters.
    pub fn base_param_count(&self) -> usize {
        base_shapes(&self.config)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Adds every parameter as a leaf; frozen ones become constants.
    pub fn bind(&self, g: &mut Graph, params: &ParamSet) -> Result<Bound> {
        let mut nodes = BTreeMap::new();
        for (name, t) in params.iter() {
            let id = if self.is_trainable(name) {
                g.param(name, t.clone())?
            } else {
                g.constant(t.clone())
            };
            nodes.insert(name.clone(), id);
        }
        Ok(Bound { nodes })
    }

    fn node(&self, bound: &Bound, name: &str) -> Result<NodeId> {
        bound
            .nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    /// Base weight plus `s·B·A` when an adapter is present.
    fn weight(&self, g: &mut Graph, bound: &Bound, name: &str) -> Result<NodeId> {
        let w = self.node(bound, name)?;
        if !self.config.is_lora() {
            return Ok(w);
        }
        let (Some(&a), Some(&b)) = (
            bound.nodes.get(&format!("{name}{A_SUFFIX}")),
            bound.nodes.get(&format!("{name}{B_SUFFIX}")),
        ) else {
            return Ok(w);
        };
        let ba = g.matmul(b, a)?;
        let scaled = g.scale(self.config.lora_scaling, ba)?;
        g.add(w, scaled)
    }

    fn linear(&self, g: &mut Graph, bound: &Bound, x: NodeId, p: &str) -> Result<NodeId> {
        let w = self.weight(g, bound, &format!("{p}.weight"))?;
        let wt = g.transpose(w)?;
        let y = g.matmul(x, wt)?;
        let rows = g.value(x).shape()[0];
        let b = self.node(bound, &format!("{p}.bias"))?;
        let b = g.expand_rows(b, rows)?;
        g.add(y, b)
    }

    fn attention(&self, g: &mut Graph, bound: &Bound, x: NodeId, p: &str) -> Result<NodeId> {
        let (rows, d_in) = g.value(x).dims2()?;
        let t = d_in / 2;
        let width = self.config.widths[1];
        let mut tokens = Vec::with_capacity(2);
        for half in 0..2 {
            let mut sel = Tensor::zeros(&[d_in, t]).into_data();
            for i in 0..t {
                sel[(half * t + i) * t + i] = 1.0;
            }
            let s = g.constant(Tensor::new(vec![d_in, t], sel)?);
            tokens.push(g.matmul(x, s)?);
        }
        let proj = |g: &mut Graph, w: &str| -> Result<Vec<NodeId>> {
            let w = self.weight(g, bound, &format!("{p}.{w}"))?;
            let wt = g.transpose(w)?;
            tokens.iter().map(|&tok| g.matmul(tok, wt)).collect()
        };
        let q = proj(g, "wq")?;
        let k = proj(g, "wk")?;
        let v = proj(g, "wv")?;
        let inv = 1.0 / (width as f32).sqrt();
        let mut out: Option<NodeId> = None;
        for (i, &qi) in q.iter().enumerate() {
            let mut att: Option<NodeId> = None;
            for (&kj, &vj) in k.iter().zip(&v) {
                let qk = g.mul(qi, kj)?;
                let s = g.row_sum(qk)?;
                let s = g.scale(inv, s)?;
                let s = g.expand_cols(s, width)?;
                let term = g.mul(s, vj)?;
                att = Some(match att {
                    Some(a) => g.add(a, term)?,
                    None => term,
                });
            }
            let wo = self.weight(g, bound, &format!("{p}.wo{i}"))?;
            let wot = g.transpose(wo)?;
            let y = g.matmul(att.expect("two tokens"), wot)?;
            out = Some(match out {
                Some(o) => g.add(o, y)?,
                None => y,
            });
        }
        let b = self.node(bound, &format!("{p}.bias"))?;
        let b = g.expand_rows(b, rows)?;
        g.add(out.expect("two tokens"), b)
    }

    /// Returns `(hidden_tap, action_prediction)`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> Result<(NodeId, NodeId)> {
        let cfg = &self.config;
        let mut h = x;
        let mut tap = None;
        let last = cfg.num_layers() - 1;
        for k in 0..=last {
            let p = format!("{}.{k}", prefix(cfg, k));
            h = if k == 0 && cfg.architecture == Architecture::TinyAttn {
                self.attention(g, bound, h, &p)?
            } else {
                self.linear(g, bound, h, &p)?
            };
            if k == cfg.hidden_tap {
                tap = Some(h);
            }
            if k < last {
                h = match cfg.activation {
                    Activation::Tanh => g.tanh(h)?,
                    Activation::Relu => g.relu(h)?,
                    Activation::Identity => h,
                };
            }
        }
        Ok((tap.expect("tap validated"), h))
    }

    /// Inference without gradients: `(hidden_tap, prediction)`.
    pub fn predict(&self, params: &ParamSet, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let mut nodes = BTreeMap::new();
        for (name, t) in params.iter() {
            nodes.insert(name.clone(), g.constant(t.clone()));
        }
        let bound = Bound { nodes };
        let xi = g.constant(x.clone());
        let (h, y) = self.forward(&mut g, &bound, xi)?;
        Ok((g.value(h).clone(), g.value(y).clone()))
    }

    /// Forward multiply-adds for one batch, from a shape walk.
    pub fn forward_macs(&self, batch: usize) -> usize {
        let cfg = &self.config;
        let mut macs = 0;
        for k in 0..cfg.num_layers() {
            let (i, o) = (cfg.widths[k], cfg.widths[k + 1]);
            if k == 0 && cfg.architecture == Architecture::TinyAttn {
                let t = i / 2;
                macs += batch * i * t; // token selection
                macs += 3 * 2 * batch * t * o; // q, k, v
                macs += 2 * 2 * batch * o * 2; // scores and weighting
                macs += 2 * batch * o * o; // output projections
            } else {
                macs += batch * i * o;
            }
            if let TuningMode::Lora { rank } = cfg.tuning_mode {
                let n = if k == 0 && cfg.architecture == Architecture::TinyAttn {
                    3 * o * rank * (i / 2) + 2 * o * rank * o
                } else {
                    o * rank * i
                };
                macs += n;
            }
        }
        macs
    }
}

/// Frozen map from the latent state to the tapped width.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherProjection {
    matrix: Tensor,
}

impl TeacherProjection {
    /// A random map with orthonormal rows or columns (whichever is shorter).
    pub fn new(width: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if width == 0 || latent_dim == 0 {
            return Err(Error::InvalidConfig("teacher dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tall, short) = (width.max(latent_dim), width.min(latent_dim));
        let g = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
        let q = g.qr().q();
        let data = if width >= latent_dim {
            (0..width)
                .flat_map(|r| (0..latent_dim).map(move |c| (r, c)))
                .map(|(r, c)| q[(r, c)] as f32)
                .collect()
        } else {
            (0..width)
                .flat_map(|r| (0..latent_dim).map(move |c| (r, c)))
                .map(|(r, c)| q[(c, r)] as f32)
                .collect()
        };
        Ok(Self {
            matrix: Tensor::new(vec![width, latent_dim], data)?,
        })
    }

    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        matrix.dims2()?;
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn width(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// `latent · Tᵀ`, `[B×ℓ] → [B×width]`.
    pub fn project(&self, latent: &Tensor) -> Result<Tensor> {
        latent.matmul(&self.matrix.transpose()?)
    }
}

/// Mean absolute error.
pub fn action_loss(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    g.l1_loss(pred, target)
}

/// Mean squared error between the tapped activations and the teacher's
/// embedding of the true latent. The teacher enters as a constant.
pub fn aux_alignment_loss(
    g: &mut Graph,
    hidden: NodeId,
    latent: &Tensor,
    teacher: &TeacherProjection,
) -> Result<NodeId> {
    let target = teacher.project(latent)?;
    if target.shape() != g.value(hidden).shape() {
        return Err(Error::ShapeMismatch {
            op: "aux_alignment_loss",
            left: g.value(hidden).shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let t = g.constant(target);
    g.mse_loss(hidden, t)
}

/// Held-out R² of a ridge readout from features to targets, clipped to
/// [0, 1]. Rows are split 80/20 after a seeded shuffle.
pub fn ridge_r2(features: &Tensor, targets: &Tensor, ridge: f64, seed: u64) -> Result<f64> {
    let (n, f) = features.dims2()?;
    let (nt, m) = targets.dims2()?;
    if n != nt {
        return Err(Error::ShapeMismatch {
            op: "ridge_r2",
            left: features.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let n_train = ((n as f64) * PROBE_TRAIN_FRACTION).round() as usize;
    if n_train < 2 || n - n_train < 2 {
        return Err(Error::InvalidConfig(format!("too few probe samples: {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, te) = idx.split_at(n_train);

    let x = |rows: &[usize]| {
        DMatrix::<f64>::from_fn(rows.len(), f, |r, c| features.data()[rows[r] * f + c] as f64)
    };
    let y = |rows: &[usize]| {
        DMatrix::<f64>::from_fn(rows.len(), m, |r, c| targets.data()[rows[r] * m + c] as f64)
    };
    let (xtr, ytr, xte, yte) = (x(tr), y(tr), x(te), y(te));
    let xmean = xtr.row_mean();
    let ymean = ytr.row_mean();
    let center = |mut a: DMatrix<f64>, mean: &nalgebra::RowDVector<f64>| {
        for mut row in a.row_iter_mut() {
            row -= mean;
        }
        a
    };
    let xc = center(xtr, &xmean);
    let yc = center(ytr, &ymean);
    let gram = xc.transpose() * &xc + DMatrix::<f64>::identity(f, f) * ridge;
    let rhs = xc.transpose() * &yc;
    let w = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NonFinite("singular probe system".into()))?,
    };
    let pred = center(xte, &xmean) * w;
    let test_mean = yte.row_mean();
    let mut sse = 0.0;
    let mut sst = 0.0;
    for r in 0..yte.nrows() {
        for c in 0..m {
            let yv = yte[(r, c)];
            sse += (yv - (pred[(r, c)] + ymean[c])).powi(2);
            sst += (yv - test_mean[c]).powi(2);
        }
    }
    if sst == 0.0 {
        return Ok(if sse == 0.0 { 1.0 } else { 0.0 });
    }
    Ok((1.0 - sse / sst).clamp(0.0, 1.0))
}

/// How well the tapped layer linearly encodes the true latent on `n`
/// fixed samples of `family`. Higher means more retained capability.
pub fn probe_capability(
    model: &Model,
    params: &ParamSet,
    family: &TaskFamily,
    teacher: &TeacherProjection,
    n: usize,
) -> Result<f64> {
    if n < 100 {
        return Err(Error::InvalidConfig(format!("probe needs n >= 100, got {n}")));
    }
    if teacher.width() != model.tap_width() || teacher.latent_dim() != family.latent_dim() {
        return Err(Error::InvalidConfig(format!(
            "teacher is {}×{} but the tap is {} wide and the latent {}",
            teacher.width(),
            teacher.latent_dim(),
            model.tap_width(),
            family.latent_dim()
        )));
    }
    let batch = family.sample_mixed(n, PROBE_SEED)?;
    let (hidden, _) = model.predict(params, &batch.observations)?;
    ridge_r2(&hidden, &batch.latent, PROBE_RIDGE, PROBE_SEED)
}
