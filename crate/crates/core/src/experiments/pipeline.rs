use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::PipelineConfig;
use crate::capvec::{delta, diagnostics, extract_capability, merge, CapabilityVector};
use crate::checkpoint::{select_keys, ParamSet};
use crate::error::{Error, Result};
use crate::models::{init_model, probe_capability, Model, ModelConfig, TeacherProjection, TuningMode};
use crate::synth::{gen_family, mix_seed, FamilySpec, TaskFamily};
use crate::trainers::{evaluate, train_aux, train_downstream_orth, train_sft, LossRecord, TrainConfig};

/// The four downstream arms, compared on identical batch streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// (a) θ_ao finetuned plainly.
    AoPlain,
    /// (b) θ_pt finetuned plainly.
    PtPlain,
    /// (c) θ_meta finetuned with λ = 0.
    MetaNoOrth,
    /// (d) θ_meta finetuned with the configured λ.
    MetaOrth,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::AoPlain, Arm::PtPlain, Arm::MetaNoOrth, Arm::MetaOrth];

    pub fn letter(self) -> char {
        match self {
            Arm::AoPlain => 'a',
            Arm::PtPlain => 'b',
            Arm::MetaNoOrth => 'c',
            Arm::MetaOrth => 'd',
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::AoPlain => "a_ao_plain",
            Arm::PtPlain => "b_pt_plain",
            Arm::MetaNoOrth => "c_meta_no_orth",
            Arm::MetaOrth => "d_meta_orth",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointMetrics {
    pub step: usize,
    pub eval_l1: f64,
    pub per_task_l1: Vec<f64>,
    pub probe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub checkpoints: Vec<CheckpointMetrics>,
    /// Orth loss and `⟨γ, Δ'⟩` at the last logged step (θ_meta arms only).
    pub final_orth: Option<f64>,
    pub final_residual: Option<f64>,
    /// Global cosine between γ and the final displacement from the arm's
    /// starting point.
    pub gamma_cosine: f64,
    #[serde(skip)]
    pub log: Vec<LossRecord>,
}

impl ArmResult {
    pub fn at(&self, step: usize) -> Option<&CheckpointMetrics> {
        self.checkpoints.iter().find(|c| c.step == step)
    }

    pub fn last(&self) -> &CheckpointMetrics {
        self.checkpoints.last().expect("at least one checkpoint")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub arms: Vec<ArmResult>,
    /// Probe scores of the intermediate models on the downstream family.
    pub probes: BTreeMap<String, f64>,
    pub gamma_norm: f64,
    pub warnings: Vec<String>,
}

impl SeedResult {
    pub fn arm(&self, arm: Arm) -> &ArmResult {
        self.arms.iter().find(|a| a.arm == arm).expect("all arms run")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmAggregate {
    pub arm: Arm,
    pub step: usize,
    pub mean_eval: f64,
    pub std_eval: f64,
    pub mean_probe: f64,
    pub std_probe: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub seeds: Vec<SeedResult>,
    pub aggregates: Vec<ArmAggregate>,
    /// Wall-clock seconds; the only non-reproducible field.
    pub timing: BTreeMap<String, f64>,
    /// Files written alongside the report, by role.
    pub artifacts: BTreeMap<String, String>,
}

impl PipelineReport {
    pub fn aggregate(&self, arm: Arm, step: usize) -> Option<&ArmAggregate> {
        self.aggregates
            .iter()
            .find(|a| a.arm == arm && a.step == step)
    }
}

/// Sample mean and standard deviation (n − 1; zero for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn family_for(spec: &FamilySpec, seed: u64) -> Result<TaskFamily> {
    gen_family(&FamilySpec {
        seed: spec.seed.wrapping_add(seed),
        ..spec.clone()
    })
}

/// Everything before the downstream arms, for one seed.
pub struct BaseStage {
    pub seed: u64,
    pub model: Model,
    pub teacher: TeacherProjection,
    pub down: TaskFamily,
    pub ext: TaskFamily,
    pub theta_pt: ParamSet,
    pub theta_ft: ParamSet,
    pub theta_ao: ParamSet,
    pub gamma: CapabilityVector,
    pub timing: BTreeMap<String, f64>,
}

fn timed<T>(timing: &mut BTreeMap<String, f64>, key: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f();
    timing.insert(key.to_string(), t.elapsed().as_secs_f64());
    out
}

pub(crate) fn base_stage(cfg: &PipelineConfig, seed: u64) -> Result<BaseStage> {
    let ctx = |phase: &'static str| move |e: Error| e.in_phase(format!("seed {seed}: {phase}"));
    let mut timing = BTreeMap::new();
    let pretrain = family_for(&cfg.pretrain_family, seed).map_err(ctx("pretrain family"))?;
    let ext = family_for(&cfg.ext_family, seed).map_err(ctx("ext family"))?;
    let down = family_for(&cfg.down_family, seed).map_err(ctx("down family"))?;
    let teacher = TeacherProjection::new(cfg.model.tap_width(), down.latent_dim(), mix_seed(seed, 1))?;

    // θ_pt is always a full-parameter model; LoRA runs attach fresh adapters.
    let full = ModelConfig {
        tuning_mode: TuningMode::Full,
        ..cfg.model.clone()
    };
    let (full_model, init) = init_model(&full, mix_seed(seed, 2))?;
    let pt_cfg = TrainConfig {
        steps: cfg.steps.pretrain,
        batch: cfg.batch,
        learning_rate: cfg.learning_rate,
        optimizer: cfg.optimizer,
        seed: mix_seed(seed, 10),
        log_every: cfg.steps.pretrain,
        ..TrainConfig::default()
    };
    let (pt_full, _) = timed(&mut timing, "pretrain", || {
        train_sft(&full_model, &init, &pretrain, &pt_cfg)
    })
    .map_err(ctx("pretrain"))?;

    let (model, theta_pt) = if cfg.model.is_lora() {
        let (m, mut p) = init_model(&cfg.model, mix_seed(seed, 3))?;
        for (name, t) in pt_full.iter() {
            p.replace(name, t.clone())?;
        }
        p.set_meta("parent", pt_full.digest());
        (m, p)
    } else {
        (full_model, pt_full)
    };

    let ext_cfg = TrainConfig {
        steps: cfg.steps.ext,
        seed: mix_seed(seed, 20),
        log_every: cfg.steps.ext,
        ..pt_cfg.clone()
    };
    let (theta_ft, _) = timed(&mut timing, "ext_sft", || {
        train_sft(&model, &theta_pt, &ext, &ext_cfg)
    })
    .map_err(ctx("ext sft"))?;
    let aux_cfg = TrainConfig {
        aux_weight: cfg.aux_weight,
        ..ext_cfg
    };
    let (theta_ao, _) = timed(&mut timing, "ext_aux", || {
        train_aux(&model, &theta_pt, &ext, &teacher, &aux_cfg)
    })
    .map_err(ctx("ext aux"))?;
    let mut gamma = extract_capability(&theta_ao, &theta_ft).map_err(ctx("extract"))?;
    // A mask narrows the capability vector itself, so the penalty covers
    // exactly the merged parameters.
    if let Some(m) = &cfg.mask {
        gamma.params = select_keys(&gamma.params, m).map_err(ctx("mask"))?;
    }
    Ok(BaseStage {
        seed,
        model,
        teacher,
        down,
        ext,
        theta_pt,
        theta_ft,
        theta_ao,
        gamma,
        timing,
    })
}

pub(crate) fn meta_model(cfg: &PipelineConfig, st: &BaseStage, alpha: f32) -> Result<ParamSet> {
    merge(&st.theta_pt, &st.gamma, alpha, cfg.mask.as_deref())
        .map_err(|e| e.in_phase(format!("seed {}: merge", st.seed)))
}

pub(crate) fn down_config(cfg: &PipelineConfig, seed: u64, lambda: f32) -> TrainConfig {
    TrainConfig {
        steps: cfg.steps.down,
        batch: cfg.batch,
        learning_rate: cfg.learning_rate,
        optimizer: cfg.optimizer,
        lambda_orth: lambda,
        seed: mix_seed(seed, 30),
        log_every: (cfg.steps.down / 20).max(1),
        checkpoints: cfg.checkpoints.clone(),
        ..TrainConfig::default()
    }
}

/// Finetunes one arm downstream and measures it at every checkpoint.
pub(crate) fn run_arm(
    cfg: &PipelineConfig,
    st: &BaseStage,
    meta: &ParamSet,
    arm: Arm,
    lambda: f32,
) -> Result<ArmResult> {
    let seed = st.seed;
    let run = || -> Result<ArmResult> {
        let (start, out) = match arm {
            Arm::AoPlain => (
                &st.theta_ao,
                train_sft(&st.model, &st.theta_ao, &st.down, &down_config(cfg, seed, 0.0))?,
            ),
            Arm::PtPlain => (
                &st.theta_pt,
                train_sft(&st.model, &st.theta_pt, &st.down, &down_config(cfg, seed, 0.0))?,
            ),
            Arm::MetaNoOrth => (
                meta,
                train_downstream_orth(&st.model, meta, &st.gamma, &st.down, &down_config(cfg, seed, 0.0))?,
            ),
            Arm::MetaOrth => (
                meta,
                train_downstream_orth(&st.model, meta, &st.gamma, &st.down, &down_config(cfg, seed, lambda))?,
            ),
        };
        let (final_params, log) = out;
        let mut checkpoints = Vec::with_capacity(log.snapshots.len());
        for (step, p) in &log.snapshots {
            let ev = evaluate(&st.model, p, &st.down, cfg.eval_samples)?;
            let probe = probe_capability(&st.model, p, &st.down, &st.teacher, cfg.probe_samples)?;
            checkpoints.push(CheckpointMetrics {
                step: *step,
                eval_l1: ev.mean_l1,
                per_task_l1: ev.per_task,
                probe,
            });
        }
        let disp = delta(&final_params, start)?;
        let gamma_cosine = diagnostics(&st.gamma, &disp)?.global.cosine;
        let last = log.records.last();
        Ok(ArmResult {
            arm,
            checkpoints,
            final_orth: last.and_then(|r| r.orth),
            final_residual: last.and_then(|r| r.residual),
            gamma_cosine,
            log: log.records,
        })
    };
    run().map_err(|e| e.in_phase(format!("seed {seed}: arm {}", arm.label())))
}

fn run_seed(cfg: &PipelineConfig, seed: u64) -> Result<(SeedResult, BTreeMap<String, f64>)> {
    let st = base_stage(cfg, seed)?;
    let mut timing = st.timing.clone();
    let meta = meta_model(cfg, &st, cfg.alpha)?;
    let arms: Vec<(ArmResult, f64)> = Arm::ALL
        .par_iter()
        .map(|&arm| {
            let t = Instant::now();
            run_arm(cfg, &st, &meta, arm, cfg.lambda_orth).map(|r| (r, t.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()?;
    for (r, secs) in &arms {
        timing.insert(format!("arm_{}", r.arm.label()), *secs);
    }

    let probe = |p: &ParamSet| probe_capability(&st.model, p, &st.down, &st.teacher, cfg.probe_samples);
    let mut probes = BTreeMap::new();
    probes.insert("theta_pt".to_string(), probe(&st.theta_pt)?);
    probes.insert("theta_ft".to_string(), probe(&st.theta_ft)?);
    probes.insert("theta_ao".to_string(), probe(&st.theta_ao)?);
    probes.insert("theta_meta".to_string(), probe(&meta)?);
    let ext_probe = |p: &ParamSet| probe_capability(&st.model, p, &st.ext, &st.teacher, cfg.probe_samples);
    probes.insert("theta_ft_ext".to_string(), ext_probe(&st.theta_ft)?);
    probes.insert("theta_ao_ext".to_string(), ext_probe(&st.theta_ao)?);

    let result = SeedResult {
        seed,
        arms: arms.into_iter().map(|(r, _)| r).collect(),
        probes,
        gamma_norm: st.gamma.params.iter().map(|(_, t)| t.frobenius_norm().powi(2)).sum::<f64>().sqrt(),
        warnings: st.gamma.warnings.clone(),
    };
    Ok((result, timing))
}

pub(crate) fn pool(cfg: &PipelineConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.effective_jobs())
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

fn aggregate(cfg: &PipelineConfig, seeds: &[SeedResult]) -> Vec<ArmAggregate> {
    let mut out = Vec::new();
    for arm in Arm::ALL {
        for &step in &cfg.checkpoints {
            let evals: Vec<f64> = seeds
                .iter()
                .filter_map(|s| s.arm(arm).at(step).map(|c| c.eval_l1))
                .collect();
            let probes: Vec<f64> = seeds
                .iter()
                .filter_map(|s| s.arm(arm).at(step).map(|c| c.probe))
                .collect();
            let (mean_eval, std_eval) = mean_std(&evals);
            let (mean_probe, std_probe) = mean_std(&probes);
            out.push(ArmAggregate {
                arm,
                step,
                mean_eval,
                std_eval,
                mean_probe,
                std_probe,
                n: evals.len(),
            });
        }
    }
    out
}

/// Pretrain, extract γ on the extraction family, merge, and finetune the
/// four arms downstream, for every seed.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let started = Instant::now();
    let results: Vec<(SeedResult, BTreeMap<String, f64>)> =
        pool(cfg)?.install(|| cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect::<Result<_>>())?;
    let mut timing = BTreeMap::new();
    let mut seeds = Vec::with_capacity(results.len());
    for (r, t) in results {
        for (k, v) in t {
            timing.insert(format!("seed{}.{k}", r.seed), v);
        }
        seeds.push(r);
    }
    timing.insert("total".into(), started.elapsed().as_secs_f64());
    Ok(PipelineReport {
        aggregates: aggregate(cfg, &seeds),
        config: cfg.clone(),
        seeds,
        timing,
        artifacts: BTreeMap::new(),
    })
}
