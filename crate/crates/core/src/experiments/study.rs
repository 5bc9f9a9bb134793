use rayon::prelude::*;
use serde::Serialize;

use super::config::PipelineConfig;
use super::pipeline::{base_stage, mean_std, meta_model, pool, run_arm, Arm};
use crate::error::{Error, Result};
use crate::synth::{disparity_score, diversity_score, gen_family, DiversityScore, FamilySpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub family: FamilySpec,
    pub diversity: DiversityScore,
    /// `None` for single-task families.
    pub disparity: Option<f64>,
    pub shortcut: bool,
    pub eval_per_seed: Vec<f64>,
    pub probe_per_seed: Vec<f64>,
    pub mean_eval: f64,
    pub std_eval: f64,
    pub mean_probe: f64,
    pub std_probe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyTable {
    pub seeds: Vec<u64>,
    pub step: usize,
    pub rows: Vec<StudyRow>,
}

/// Runs the pipeline once per extraction family with the downstream family
/// held fixed, and reads arm (d) at the last checkpoint.
pub fn diversity_disparity_study(base: &PipelineConfig, families: &[FamilySpec]) -> Result<StudyTable> {
    if families.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "the study compares at least two extraction families, got {}",
            families.len()
        )));
    }
    let configs: Vec<PipelineConfig> = families
        .iter()
        .map(|f| {
            let c = PipelineConfig {
                ext_family: f.clone(),
                ..base.clone()
            };
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    let step = *base.checkpoints.last().expect("validated");

    let cells: Vec<Vec<(f64, f64)>> = pool(base)?.install(|| -> Result<_> {
        configs
            .par_iter()
            .map(|cfg| {
                cfg.seeds
                    .par_iter()
                    .map(|&s| {
                        let st = base_stage(cfg, s)?;
                        let meta = meta_model(cfg, &st, cfg.alpha)?;
                        let r = run_arm(cfg, &st, &meta, Arm::MetaOrth, cfg.lambda_orth)?;
                        let c = r.last();
                        Ok((c.eval_l1, c.probe))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    })?;

    let mut rows = Vec::with_capacity(families.len());
    for (spec, cell) in families.iter().zip(cells) {
        let fam = gen_family(spec)?;
        let disparity = if fam.num_tasks() >= 2 {
            Some(disparity_score(&fam)?)
        } else {
            None
        };
        let evals: Vec<f64> = cell.iter().map(|c| c.0).collect();
        let probes: Vec<f64> = cell.iter().map(|c| c.1).collect();
        let (mean_eval, std_eval) = mean_std(&evals);
        let (mean_probe, std_probe) = mean_std(&probes);
        rows.push(StudyRow {
            family: spec.clone(),
            diversity: diversity_score(&fam),
            disparity,
            shortcut: spec.shortcut,
            eval_per_seed: evals,
            probe_per_seed: probes,
            mean_eval,
            std_eval,
            mean_probe,
            std_probe,
        });
    }
    Ok(StudyTable {
        seeds: base.seeds.clone(),
        step,
        rows,
    })
}

impl StudyTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "pairs_per_task,distinct_combinations,background_spread,disparity,shortcut,mean_eval,std_eval,mean_probe,std_probe\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.diversity.pairs_per_task,
                r.diversity.distinct_combinations,
                r.family.background_spread,
                r.disparity.map(|d| d.to_string()).unwrap_or_default(),
                r.shortcut,
                r.mean_eval,
                r.std_eval,
                r.mean_probe,
                r.std_probe
            ));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| pairs/task | spread | disparity | shortcut | eval L1 (mean ± std) | probe R² (mean ± std) |\n|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
                r.diversity.pairs_per_task,
                r.family.background_spread,
                r.disparity.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into()),
                r.shortcut,
                r.mean_eval,
                r.std_eval,
                r.mean_probe,
                r.std_probe
            ));
        }
        s
    }
}
