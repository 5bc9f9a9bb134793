use serde::{Deserialize, Serialize};

use crate::capvec::DEFAULT_ALPHA;
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::orth::DEFAULT_LAMBDA;
use crate::synth::FamilySpec;
use crate::trainers::Optimizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSteps {
    pub pretrain: usize,
    pub ext: usize,
    pub down: usize,
}

/// Everything one pipeline run needs. Family seeds are offset by the run
/// seed, so each seed sees its own draw of every family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub pretrain_family: FamilySpec,
    pub ext_family: FamilySpec,
    pub down_family: FamilySpec,
    pub alpha: f32,
    pub lambda_orth: f32,
    pub aux_weight: f32,
    pub seeds: Vec<u64>,
    pub steps: PhaseSteps,
    /// Downstream steps at which arms are evaluated and probed.
    pub checkpoints: Vec<usize>,
    pub batch: usize,
    pub learning_rate: f32,
    #[serde(default = "sgd")]
    pub optimizer: Optimizer,
    /// Merge only parameters under these prefixes.
    #[serde(default)]
    pub mask: Option<Vec<String>>,
    pub eval_samples: usize,
    pub probe_samples: usize,
    /// Worker threads; 0 picks the machine's parallelism.
    #[serde(default)]
    pub jobs: usize,
}

fn sgd() -> Optimizer {
    Optimizer::Sgd
}

impl PipelineConfig {
    /// The bundled small configuration.
    pub fn quickstart() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain_family: FamilySpec {
                background_spread: 0.0,
                ..FamilySpec::new(4, 1, 0.0, 100)
            },
            ext_family: FamilySpec::new(4, 1000, 1.0, 200),
            down_family: FamilySpec::new(4, 100, 1.0, 300),
            alpha: DEFAULT_ALPHA,
            lambda_orth: DEFAULT_LAMBDA,
            aux_weight: 1.0,
            seeds: vec![0, 1, 2, 3, 4],
            steps: PhaseSteps {
                pretrain: 1000,
                ext: 1000,
                down: 400,
            },
            checkpoints: vec![50, 100, 200, 400],
            batch: 64,
            learning_rate: 1e-2,
            optimizer: Optimizer::Sgd,
            mask: None,
            eval_samples: 400,
            probe_samples: 500,
            jobs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.model.validate()?;
        for (name, f) in [
            ("pretrain_family", &self.pretrain_family),
            ("ext_family", &self.ext_family),
            ("down_family", &self.down_family),
        ] {
            f.validate()
                .map_err(|e| Error::InvalidConfig(format!("{name}: {e}")))?;
            if f.obs_dim() != self.model.obs_dim() || f.action_dim != self.model.action_dim() {
                return bad(format!(
                    "{name} is {}→{} but the model is {}→{}",
                    f.obs_dim(),
                    f.action_dim,
                    self.model.obs_dim(),
                    self.model.action_dim()
                ));
            }
            if f.latent_dim != self.down_family.latent_dim {
                return bad(format!("{name} latent_dim differs from down_family"));
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.steps.pretrain == 0 || self.steps.ext == 0 || self.steps.down == 0 {
            return bad("every phase needs at least one step".into());
        }
        if self.checkpoints.is_empty() {
            return bad("checkpoints must not be empty".into());
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1])
            || self.checkpoints[0] == 0
            || *self.checkpoints.last().unwrap() > self.steps.down
        {
            return bad(format!(
                "checkpoints must be strictly increasing within 1..={}",
                self.steps.down
            ));
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        if self.lambda_orth < 0.0 || self.lambda_orth.is_nan() {
            return Err(Error::NegativeLambda(self.lambda_orth as f64));
        }
        if !(self.aux_weight > 0.0 && self.aux_weight.is_finite()) {
            return bad("aux_weight must be > 0".into());
        }
        if self.batch == 0 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("batch and learning_rate must be positive".into());
        }
        if self.eval_samples < 100 || self.probe_samples < 100 {
            return bad("eval_samples and probe_samples must be >= 100".into());
        }
        if let Some(m) = &self.mask {
            if m.is_empty() {
                return bad("mask, when given, needs at least one prefix".into());
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Thread budget: `jobs` (or the machine) capped by `CAPVEC_THREADS`.
    pub fn effective_jobs(&self) -> usize {
        let machine = std::thread::available_parallelism().map_or(1, |n| n.get());
        let want = if self.jobs == 0 { machine } else { self.jobs };
        let cap = std::env::var("CAPVEC_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(usize::MAX);
        want.min(cap).max(1)
    }
}
