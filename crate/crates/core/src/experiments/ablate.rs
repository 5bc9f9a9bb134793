use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::pipeline::{base_stage, mean_std, meta_model, pool, run_arm, Arm, BaseStage};
use crate::error::{Error, Result};

/// Merge-weight grid from the original α ablation.
pub const ALPHA_GRID: [f32; 6] = [0.5, 0.7, 0.9, 1.1, 1.3, 1.5];
pub const LAMBDA_GRID: [f32; 4] = [0.0, 1e-5, 1e-4, 1e-3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Alpha,
    Lambda,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "lambda" => Ok(Self::Lambda),
            other => Err(Error::InvalidConfig(format!("unknown ablation axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: f32,
    pub eval_per_seed: Vec<f64>,
    pub probe_per_seed: Vec<f64>,
    pub mean_eval: f64,
    pub std_eval: f64,
    pub mean_probe: f64,
    pub std_probe: f64,
    /// Lowest mean downstream error in the table.
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
    /// Downstream step the values are read at.
    pub step: usize,
    pub rows: Vec<AblationRow>,
}

/// Arm (d) at every grid point and seed. The stages before merging do not
/// depend on α or λ and are shared across the grid.
pub fn ablate(cfg: &PipelineConfig, axis: AblationAxis, grid: &[f32]) -> Result<AblationTable> {
    cfg.validate()?;
    if grid.is_empty() {
        return Err(Error::InvalidConfig("ablation grid must not be empty".into()));
    }
    if let Some(v) = grid.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("grid value {v} is not finite")));
    }
    if axis == AblationAxis::Lambda {
        if let Some(v) = grid.iter().find(|v| **v < 0.0) {
            return Err(Error::NegativeLambda(*v as f64));
        }
    }
    let step = *cfg.checkpoints.last().expect("validated");
    let cells: Vec<Vec<(f64, f64)>> = pool(cfg)?.install(|| -> Result<_> {
        let stages: Vec<BaseStage> = cfg
            .seeds
            .par_iter()
            .map(|&s| base_stage(cfg, s))
            .collect::<Result<_>>()?;
        grid.par_iter()
            .map(|&v| {
                let (alpha, lambda) = match axis {
                    AblationAxis::Alpha => (v, cfg.lambda_orth),
                    AblationAxis::Lambda => (cfg.alpha, v),
                };
                stages
                    .par_iter()
                    .map(|st| {
                        let meta = meta_model(cfg, st, alpha)?;
                        let r = run_arm(cfg, st, &meta, Arm::MetaOrth, lambda)?;
                        let c = r.last();
                        Ok((c.eval_l1, c.probe))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    })?;

    let mut rows: Vec<AblationRow> = grid
        .iter()
        .zip(cells)
        .map(|(&value, cell)| {
            let evals: Vec<f64> = cell.iter().map(|c| c.0).collect();
            let probes: Vec<f64> = cell.iter().map(|c| c.1).collect();
            let (mean_eval, std_eval) = mean_std(&evals);
            let (mean_probe, std_probe) = mean_std(&probes);
            AblationRow {
                value,
                eval_per_seed: evals,
                probe_per_seed: probes,
                mean_eval,
                std_eval,
                mean_probe,
                std_probe,
                best: false,
            }
        })
        .collect();
    if let Some(best) = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean_eval.total_cmp(&b.1.mean_eval))
        .map(|(i, _)| i)
    {
        rows[best].best = true;
    }
    Ok(AblationTable {
        axis,
        seeds: cfg.seeds.clone(),
        step,
        rows,
    })
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let axis = match self.axis {
            AblationAxis::Alpha => "alpha",
            AblationAxis::Lambda => "lambda",
        };
        s.push_str(&format!(
            "{axis},mean_eval,std_eval,mean_probe,std_probe,best\n"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.value, r.mean_eval, r.std_eval, r.mean_probe, r.std_probe, r.best
            ));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let axis = match self.axis {
            AblationAxis::Alpha => "α",
            AblationAxis::Lambda => "λ",
        };
        let mut s = format!(
            "| {axis} | eval L1 (mean ± std) | probe R² (mean ± std) | best |\n|---|---|---|---|\n"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {} |\n",
                r.value,
                r.mean_eval,
                r.std_eval,
                r.mean_probe,
                r.std_probe,
                if r.best { "*" } else { "" }
            ));
        }
        s
    }
}
