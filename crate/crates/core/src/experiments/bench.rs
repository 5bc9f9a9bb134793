use serde::Serialize;

use super::config::PipelineConfig;
use super::pipeline::{base_stage, down_config, meta_model};
use crate::error::{Error, Result};
use crate::orth::OrthPenalty;
use crate::trainers::{train_aux, train_downstream_orth, train_sft, TrainConfig};

/// Timed rounds per arm. Arms are interleaved round by round and overheads
/// are medians of per-round ratios, so drift in machine load cancels.
pub const BENCH_ROUNDS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub arm: String,
    /// Median seconds per step over every timed step. Non-deterministic.
    pub median_step_seconds: f64,
    /// Median over rounds of this arm's median step time relative to the
    /// plain arm's in the same round.
    pub overhead: f64,
    /// Counted multiply-adds per step: forward, backward (twice the forward)
    /// and the arm's extra objective.
    pub macs_per_step: usize,
    pub extra_macs_per_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchTable {
    pub steps_per_round: usize,
    pub rounds: usize,
    pub batch: usize,
    pub threads: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn row(&self, arm: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| arm | median step (µs) | overhead | MACs/step | extra MACs/step |\n|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.1} | {:+.2}% | {} | {} |\n",
                r.arm,
                r.median_step_seconds * 1e6,
                r.overhead * 100.0,
                r.macs_per_step,
                r.extra_macs_per_step
            ));
        }
        s
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Per-step wall time of plain SFT, SFT with the auxiliary objective and SFT
/// with the orth penalty, all from θ_meta on the downstream family of the
/// first seed. Runs on the calling thread only.
pub fn overhead_benchmark(cfg: &PipelineConfig, steps: usize) -> Result<BenchTable> {
    cfg.validate()?;
    if steps < 200 {
        return Err(Error::InvalidConfig(format!(
            "the benchmark times at least 200 steps per arm, got {steps}"
        )));
    }
    let seed = cfg.seeds[0];
    let st = base_stage(cfg, seed)?;
    let meta = meta_model(cfg, &st, cfg.alpha)?;
    let per_round = steps.div_ceil(BENCH_ROUNDS);
    let base = TrainConfig {
        steps: per_round,
        log_every: per_round,
        checkpoints: Vec::new(),
        time_steps: true,
        ..down_config(cfg, seed, 0.0)
    };
    let lambda = if cfg.lambda_orth > 0.0 { cfg.lambda_orth } else { crate::orth::DEFAULT_LAMBDA };

    let mut times: [Vec<f64>; 3] = Default::default();
    let mut round_medians: [Vec<f64>; 3] = Default::default();
    for round in 0..BENCH_ROUNDS {
        for k in 0..3 {
            let arm = (k + round) % 3;
            let log = match arm {
                0 => train_sft(&st.model, &meta, &st.down, &base)?.1,
                1 => {
                    let c = TrainConfig {
                        aux_weight: cfg.aux_weight,
                        ..base.clone()
                    };
                    train_aux(&st.model, &meta, &st.down, &st.teacher, &c)?.1
                }
                _ => {
                    let c = TrainConfig {
                        lambda_orth: lambda,
                        ..base.clone()
                    };
                    train_downstream_orth(&st.model, &meta, &st.gamma, &st.down, &c)?.1
                }
            };
            round_medians[arm].push(median(log.step_seconds.clone()));
            times[arm].extend(log.step_seconds);
        }
    }
    let overhead = |arm: usize| {
        median(
            round_medians[arm]
                .iter()
                .zip(&round_medians[0])
                .map(|(a, p)| a / p - 1.0)
                .collect(),
        )
    };
    let overheads = [0.0, overhead(1), overhead(2)];

    let forward = st.model.forward_macs(cfg.batch);
    let core = 3 * forward;
    // Teacher targets, the squared difference, and its gradient.
    let aux_extra = cfg.batch * st.teacher.width() * st.teacher.latent_dim() + 2 * cfg.batch * st.teacher.width();
    let penalty = if st.model.config().is_lora() {
        OrthPenalty::lora(&st.gamma.params, &meta)?
    } else {
        OrthPenalty::new(&st.gamma.params, &meta)?
    };
    let orth_extra = penalty.num_elements();

    let rows = ["plain", "aux", "orth"]
        .iter()
        .zip([0, aux_extra, orth_extra])
        .zip(times.into_iter().zip(overheads))
        .map(|((arm, extra), (t, overhead))| BenchRow {
            arm: arm.to_string(),
            median_step_seconds: median(t),
            overhead,
            macs_per_step: core + extra,
            extra_macs_per_step: extra,
        })
        .collect();
    Ok(BenchTable {
        steps_per_round: per_round,
        rounds: BENCH_ROUNDS,
        batch: cfg.batch,
        threads: 1,
        rows,
    })
}
