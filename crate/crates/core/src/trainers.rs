//! Training loops: plain SFT, SFT with the auxiliary alignment objective,
//! and downstream SFT from a merged model under the orthogonal penalty.
//!
//! Every step draws a task-mixed batch seeded by `(cfg.seed, step)`, so two
//! runs with the same seed see the same data in the same order. Training is
//! single-threaded and bit-reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::capvec::CapabilityVector;
use crate::checkpoint::ParamSet;
use crate::error::{Error, Result};
use crate::models::{action_loss, aux_alignment_loss, Model, TeacherProjection};
use crate::orth::{inner_product_residual, orth_loss, total_loss, OrthPenalty};
use crate::synth::{mix_seed, TaskFamily};
use crate::tensor::Tensor;

pub const EVAL_SEED: u64 = 0xE7A1_0000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f32,
    pub optimizer: Optimizer,
    pub lambda_orth: f32,
    pub aux_weight: f32,
    pub seed: u64,
    pub log_every: usize,
    pub trajectory_log: bool,
    /// Steps after which a parameter snapshot is kept.
    pub checkpoints: Vec<usize>,
    /// Record wall time per step (not reproducible).
    pub time_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            learning_rate: 1e-2,
            optimizer: Optimizer::Sgd,
            lambda_orth: 0.0,
            aux_weight: 0.0,
            seed: 0,
            log_every: 50,
            trajectory_log: false,
            checkpoints: Vec::new(),
            time_steps: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.lambda_orth < 0.0 || self.lambda_orth.is_nan() {
            return Err(Error::NegativeLambda(self.lambda_orth as f64));
        }
        if !(self.aux_weight.is_finite() && self.aux_weight >= 0.0) {
            return bad("aux_weight must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub action: f64,
    pub orth: Option<f64>,
    pub aux: Option<f64>,
    pub total: f64,
    /// `Σ_p ⟨γ, Δ'⟩` at this step.
    pub residual: Option<f64>,
    pub probe: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
    /// `(step, params)` after every step, starting with step 0.
    pub trajectory: Vec<(usize, ParamSet)>,
    pub snapshots: Vec<(usize, ParamSet)>,
    pub step_seconds: Vec<f64>,
}

/// CSV of logged records, one row per logged step.
pub fn records_csv(records: &[LossRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("step,l_action,l_orth,total,probe,l_aux,residual\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step,
            r.action,
            opt(r.orth),
            r.total,
            opt(r.probe),
            opt(r.aux),
            opt(r.residual)
        );
    }
    s
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        records_csv(&self.records)
    }

    pub fn snapshot(&self, step: usize) -> Option<&ParamSet> {
        self.snapshots
            .iter()
            .find(|(s, _)| *s == step)
            .map(|(_, p)| p)
    }

    pub fn final_record(&self) -> Option<&LossRecord> {
        self.records.last()
    }
}

enum Objective<'a> {
    Sft,
    Aux(&'a TeacherProjection),
    Orth(OrthPenalty),
}

impl Objective<'_> {
    fn role(&self) -> &'static str {
        match self {
            Objective::Sft => "sft",
            Objective::Aux(_) => "aux",
            Objective::Orth(_) => "orth",
        }
    }
}

struct AdamState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

fn diverged(step: usize, detail: impl Into<String>, last: &ParamSet) -> Error {
    Error::Divergence {
        step,
        detail: detail.into(),
        last_finite: Some(Box::new(last.clone())),
    }
}

fn apply_update(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    cfg: &TrainConfig,
    adam: &mut Option<AdamState>,
    step: usize,
) -> Result<()> {
    let lr = cfg.learning_rate;
    let mut updates = Vec::with_capacity(grads.len());
    for (name, g) in grads {
        let w = params
            .get(name)
            .ok_or_else(|| Error::Format(format!("gradient for unknown parameter {name}")))?;
        let data: Vec<f32> = match (cfg.optimizer, adam.as_mut()) {
            (Optimizer::Adam { beta1, beta2, eps }, Some(st)) => {
                let m = st.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
                let v = st.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
                let t = step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                w.data()
                    .iter()
                    .zip(g.data())
                    .enumerate()
                    .map(|(i, (&wi, &gi))| {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        wi - lr * mh / (vh.sqrt() + eps)
                    })
                    .collect()
            }
            _ => w
                .data()
                .iter()
                .zip(g.data())
                .map(|(&wi, &gi)| wi - lr * gi)
                .collect(),
        };
        let t = Tensor::new(w.shape().to_vec(), data)
            .map_err(|e| diverged(step, format!("update of {name}: {e}"), params))?;
        updates.push((name, t));
    }
    for (name, t) in updates {
        params.replace(name, t)?;
    }
    Ok(())
}

fn run(
    model: &Model,
    init: &ParamSet,
    family: &TaskFamily,
    cfg: &TrainConfig,
    objective: Objective<'_>,
) -> Result<(ParamSet, LossLog)> {
    cfg.validate()?;
    model
        .config()
        .check_dims(family.obs_dim(), family.action_dim())?;
    if let Objective::Aux(t) = &objective {
        if t.width() != model.tap_width() || t.latent_dim() != family.latent_dim() {
            return Err(Error::InvalidConfig(format!(
                "teacher is {}×{}, expected {}×{}",
                t.width(),
                t.latent_dim(),
                model.tap_width(),
                family.latent_dim()
            )));
        }
    }

    let mut params = init.clone();
    let mut log = LossLog::default();
    let mut adam = matches!(cfg.optimizer, Optimizer::Adam { .. }).then(|| AdamState {
        m: BTreeMap::new(),
        v: BTreeMap::new(),
    });
    if cfg.trajectory_log {
        log.trajectory.push((0, params.clone()));
    }

    for step in 1..=cfg.steps {
        let started = cfg.time_steps.then(Instant::now);
        let batch = family.sample_mixed(cfg.batch, mix_seed(cfg.seed, step as u64))?;

        let mut g = Graph::new();
        let bound = model.bind(&mut g, &params)?;
        let x = g.constant(batch.observations.clone());
        let y = g.constant(batch.targets.clone());
        let (hidden, pred) = model
            .forward(&mut g, &bound, x)
            .map_err(|e| diverged(step, format!("forward: {e}"), &params))?;
        let action = action_loss(&mut g, pred, y)?;

        let mut aux_value = None;
        let mut orth_value = None;
        let root = match &objective {
            Objective::Sft => action,
            Objective::Aux(teacher) => {
                let aux = aux_alignment_loss(&mut g, hidden, &batch.latent, teacher)?;
                aux_value = Some(g.scalar(aux) as f64);
                let w = g.scale(cfg.aux_weight, aux)?;
                g.add(action, w)?
            }
            Objective::Orth(pen) if cfg.lambda_orth > 0.0 => {
                let orth = pen.attach(&mut g, &bound.nodes)?;
                orth_value = Some(g.scalar(orth) as f64);
                total_loss(&mut g, action, orth, cfg.lambda_orth)?
            }
            Objective::Orth(_) => action,
        };
        let total = g.scalar(root);
        if !total.is_finite() {
            return Err(diverged(step, format!("loss {total}"), &params));
        }

        let should_log = step == 1 || step % cfg.log_every == 0 || step == cfg.steps;
        if should_log {
            let mut rec = LossRecord {
                step,
                action: g.scalar(action) as f64,
                orth: None,
                aux: aux_value,
                total: total as f64,
                residual: None,
                probe: None,
            };
            if let Objective::Orth(pen) = &objective {
                let pairs = pen.pairs_at(&params)?;
                rec.orth = Some(orth_value.unwrap_or_else(|| orth_loss(&pairs)));
                rec.residual = Some(inner_product_residual(&pairs).values().sum());
            }
            log.records.push(rec);
        }

        let grads = g
            .backward(root)
            .map_err(|e| diverged(step, format!("backward: {e}"), &params))?;
        apply_update(&mut params, &grads, cfg, &mut adam, step)?;

        if let Some(t) = started {
            log.step_seconds.push(t.elapsed().as_secs_f64());
        }
        if cfg.trajectory_log {
            log.trajectory.push((step, params.clone()));
        }
        if cfg.checkpoints.contains(&step) {
            log.snapshots.push((step, params.clone()));
        }
    }

    params.set_meta("parent", init.digest());
    params.set_meta("family", serde_json::to_string(&family.spec)?);
    params.set_meta("steps", cfg.steps.to_string());
    params.set_meta("batch", cfg.batch.to_string());
    params.set_meta("learning_rate", cfg.learning_rate.to_string());
    params.set_meta("train_seed", cfg.seed.to_string());
    params.set_meta("role", objective.role());
    match objective {
        Objective::Aux(_) => params.set_meta("aux_weight", cfg.aux_weight.to_string()),
        Objective::Orth(_) => params.set_meta("lambda_orth", cfg.lambda_orth.to_string()),
        Objective::Sft => {}
    }
    Ok((params, log))
}

/// Standard SFT on the action loss only.
pub fn train_sft(
    model: &Model,
    init: &ParamSet,
    family: &TaskFamily,
    cfg: &TrainConfig,
) -> Result<(ParamSet, LossLog)> {
    if cfg.aux_weight != 0.0 || cfg.lambda_orth != 0.0 {
        return Err(Error::InvalidConfig(
            "train_sft needs aux_weight = 0 and lambda_orth = 0".into(),
        ));
    }
    run(model, init, family, cfg, Objective::Sft)
}

/// SFT on `L_action + aux_weight · L_aux`.
pub fn train_aux(
    model: &Model,
    init: &ParamSet,
    family: &TaskFamily,
    teacher: &TeacherProjection,
    cfg: &TrainConfig,
) -> Result<(ParamSet, LossLog)> {
    if cfg.aux_weight <= 0.0 || cfg.lambda_orth != 0.0 {
        return Err(Error::InvalidConfig(
            "train_aux needs aux_weight > 0 and lambda_orth = 0; use train_sft otherwise".into(),
        ));
    }
    run(model, init, family, cfg, Objective::Aux(teacher))
}

/// SFT from `theta_meta` on `L_action + λ·L_orth(γ, θ − θ_meta)`. In LoRA
/// mode only the adapter `A` factors are penalized.
pub fn train_downstream_orth(
    model: &Model,
    theta_meta: &ParamSet,
    gamma: &CapabilityVector,
    family_down: &TaskFamily,
    cfg: &TrainConfig,
) -> Result<(ParamSet, LossLog)> {
    if cfg.aux_weight != 0.0 {
        return Err(Error::InvalidConfig(
            "train_downstream_orth does not take an auxiliary objective".into(),
        ));
    }
    let penalty = if model.config().is_lora() {
        OrthPenalty::lora(&gamma.params, theta_meta)?
    } else {
        let frozen: Vec<&String> = gamma
            .params
            .names()
            .filter(|n| !model.is_trainable(n))
            .collect();
        if !frozen.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "capability vector covers frozen parameters: {frozen:?}"
            )));
        }
        OrthPenalty::new(&gamma.params, theta_meta)?
    };
    let (mut out, log) = run(model, theta_meta, family_down, cfg, Objective::Orth(penalty))?;
    out.set_meta("anchor", theta_meta.digest());
    out.set_meta("gamma", gamma.params.digest());
    Ok((out, log))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub mean_l1: f64,
    pub per_task: Vec<f64>,
}

/// Mean absolute action error on a fixed held-out draw of at least `n`
/// samples, split evenly over tasks.
pub fn evaluate(
    model: &Model,
    params: &ParamSet,
    family: &TaskFamily,
    n: usize,
) -> Result<EvalMetrics> {
    if n < 100 {
        return Err(Error::InvalidConfig(format!("evaluate needs n >= 100, got {n}")));
    }
    let per = n.div_ceil(family.num_tasks());
    let mut per_task = Vec::with_capacity(family.num_tasks());
    for t in 0..family.num_tasks() {
        let b = family.sample_batch(t, per, EVAL_SEED)?;
        let (_, pred) = model.predict(params, &b.observations)?;
        let err: f64 = pred
            .data()
            .iter()
            .zip(b.targets.data())
            .map(|(&p, &y)| (p as f64 - y as f64).abs())
            .sum();
        per_task.push(err / pred.numel() as f64);
    }
    let mean_l1 = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(EvalMetrics { mean_l1, per_task })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capvec::extract_capability;
    use crate::models::{init_model, ModelConfig};
    use crate::synth::{gen_family, FamilySpec};

    fn setup() -> (Model, ParamSet, TaskFamily) {
        let fam = gen_family(&FamilySpec::new(2, 5, 1.0, 0)).unwrap();
        let (m, p) = init_model(&ModelConfig::default(), 0).unwrap();
        (m, p, fam)
    }

    fn short() -> TrainConfig {
        TrainConfig {
            steps: 20,
            log_every: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (m, p, fam) = setup();
        let cfg = TrainConfig {
            steps: 1,
            learning_rate: 0.0,
            ..short()
        };
        let (out, _) = train_sft(&m, &p, &fam, &cfg).unwrap();
        assert!(out.bits_eq(&p));
    }

    #[test]
    fn runs_are_reproducible() {
        let (m, p, fam) = setup();
        let (a, la) = train_sft(&m, &p, &fam, &short()).unwrap();
        let (b, lb) = train_sft(&m, &p, &fam, &short()).unwrap();
        assert!(a.bits_eq(&b));
        assert_eq!(la.records, lb.records);
        assert_eq!(la.records.len(), 5);
    }

    #[test]
    fn role_preconditions() {
        let (m, p, fam) = setup();
        let t = TeacherProjection::new(8, 8, 0).unwrap();
        assert!(train_aux(&m, &p, &fam, &t, &short()).is_err());
        let with_aux = TrainConfig {
            aux_weight: 1.0,
            ..short()
        };
        assert!(train_sft(&m, &p, &fam, &with_aux).is_err());
        let neg = TrainConfig {
            lambda_orth: -1.0,
            ..short()
        };
        let gamma = extract_capability(&p, &p).unwrap();
        assert!(matches!(
            train_downstream_orth(&m, &p, &gamma, &fam, &neg),
            Err(Error::NegativeLambda(_))
        ));
    }

    #[test]
    fn divergence_is_reported_with_last_params() {
        let (_, _, fam) = setup();
        let relu = ModelConfig {
            activation: crate::models::Activation::Relu,
            ..ModelConfig::default()
        };
        let (m, p) = init_model(&relu, 0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e30,
            ..short()
        };
        match train_sft(&m, &p, &fam, &cfg) {
            Err(Error::Divergence { last_finite, .. }) => {
                assert!(last_finite.unwrap().iter().all(|(_, t)| t.is_finite()))
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn trajectory_endpoint_is_result_and_snapshots_kept() {
        let (m, p, fam) = setup();
        let cfg = TrainConfig {
            trajectory_log: true,
            checkpoints: vec![5, 20],
            ..short()
        };
        let (out, log) = train_sft(&m, &p, &fam, &cfg).unwrap();
        assert_eq!(log.trajectory.len(), 21);
        assert!(log.trajectory.last().unwrap().1.bits_eq(&out));
        assert!(log.snapshot(20).unwrap().bits_eq(&out));
        assert!(log.snapshot(5).is_some());
    }

    #[test]
    fn eval_is_deterministic_and_training_helps() {
        let (m, p, fam) = setup();
        let e0 = evaluate(&m, &p, &fam, 200).unwrap();
        assert_eq!(e0, evaluate(&m, &p, &fam, 200).unwrap());
        let (out, _) = train_sft(&m, &p, &fam, &TrainConfig { steps: 300, ..short() }).unwrap();
        assert!(evaluate(&m, &out, &fam, 200).unwrap().mean_l1 < e0.mean_l1);
        assert!(evaluate(&m, &p, &fam, 99).is_err());
    }

    #[test]
    fn csv_has_one_line_per_record() {
        let (m, p, fam) = setup();
        let (_, log) = train_sft(&m, &p, &fam, &short()).unwrap();
        let csv = log.to_csv();
        assert_eq!(csv.lines().count(), 1 + log.records.len());
        assert!(csv.starts_with("step,l_action,l_orth,total,probe"));
    }
}
