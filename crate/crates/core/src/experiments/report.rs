use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::ablate::{AblationAxis, AblationTable};
use super::bench::BenchTable;
use super::pipeline::{Arm, PipelineReport};
use super::study::StudyTable;
use crate::error::Result;
use crate::trainers::records_csv;

/// Four-arm table: one row per arm and checkpoint.
pub fn summary_markdown(report: &PipelineReport) -> String {
    let mut s = String::from(
        "| arm | step | eval L1 (mean ± std) | probe R² (mean ± std) | n |\n|---|---|---|---|---|\n",
    );
    for a in &report.aggregates {
        let _ = writeln!(
            s,
            "| {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {} |",
            a.arm.label(),
            a.step,
            a.mean_eval,
            a.std_eval,
            a.mean_probe,
            a.std_probe,
            a.n
        );
    }
    s
}

pub fn fig2a_csv(report: &PipelineReport) -> String {
    let mut s = String::from("arm,step,mean_eval,std_eval,mean_probe,std_probe,n\n");
    for a in &report.aggregates {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            a.arm.label(),
            a.step,
            a.mean_eval,
            a.std_eval,
            a.mean_probe,
            a.std_probe,
            a.n
        );
    }
    s
}

fn pipeline_markdown(report: &PipelineReport) -> String {
    let c = &report.config;
    let mut s = String::from("# Pipeline report\n\n");
    let _ = writeln!(
        s,
        "α = {}, λ = {}, seeds = {:?}, steps (pretrain/ext/down) = {}/{}/{}, mask = {:?}\n",
        c.alpha, c.lambda_orth, c.seeds, c.steps.pretrain, c.steps.ext, c.steps.down, c.mask
    );
    s.push_str("## Arms\n\n");
    s.push_str(&summary_markdown(report));
    s.push_str("\n## Per seed, last checkpoint\n\n| seed | arm | eval L1 | probe R² | cos(γ, Δ') | L_orth |\n|---|---|---|---|---|---|\n");
    for r in &report.seeds {
        for arm in Arm::ALL {
            let a = r.arm(arm);
            let last = a.last();
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {:.4} | {:.4} | {} |",
                r.seed,
                arm.label(),
                last.eval_l1,
                last.probe,
                a.gamma_cosine,
                a.final_orth.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "-".into())
            );
        }
    }
    s.push_str("\n## Probes of intermediate models\n\n| seed | ‖γ‖ |");
    let keys: Vec<&String> = report
        .seeds
        .first()
        .map(|r| r.probes.keys().collect())
        .unwrap_or_default();
    for k in &keys {
        let _ = write!(s, " {k} |");
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|".repeat(keys.len()));
    s.push('\n');
    for r in &report.seeds {
        let _ = write!(s, "| {} | {:.4} |", r.seed, r.gamma_norm);
        for k in &keys {
            let _ = write!(s, " {:.4} |", r.probes[*k]);
        }
        s.push('\n');
    }
    let warnings: Vec<String> = report
        .seeds
        .iter()
        .flat_map(|r| r.warnings.iter().map(move |w| format!("- seed {}: {w}", r.seed)))
        .collect();
    if !warnings.is_empty() {
        s.push_str("\n## Warnings\n\n");
        s.push_str(&warnings.join("\n"));
        s.push('\n');
    }
    s.push_str("\n## Wall time (s, not reproducible)\n\n");
    if let Some(t) = report.timing.get("total") {
        let _ = writeln!(s, "total: {t:.2}");
    }
    s
}

/// Writes the JSON and Markdown reports, the checkpoint CSV and one loss CSV
/// per seed and arm under `dir`, recording every path in `artifacts`.
pub fn write_pipeline_report(report: &mut PipelineReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("losses"))?;
    report.artifacts.clear();
    for r in &report.seeds {
        for a in &r.arms {
            let rel = format!("losses/seed{}_{}.csv", r.seed, a.arm.label());
            fs::write(dir.join(&rel), records_csv(&a.log))?;
            report
                .artifacts
                .insert(format!("loss.seed{}.{}", r.seed, a.arm.label()), rel);
        }
    }
    fs::write(dir.join("fig2a.csv"), fig2a_csv(report))?;
    report.artifacts.insert("fig2a".into(), "fig2a.csv".into());
    report.artifacts.insert("markdown".into(), "report.md".into());
    report.artifacts.insert("json".into(), "report.json".into());
    fs::write(dir.join("report.md"), pipeline_markdown(report))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// `ablation_<axis>.{json,md,csv}`; the λ table doubles as `fig2b.csv`.
pub fn write_ablation(table: &AblationTable, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let axis = match table.axis {
        AblationAxis::Alpha => "alpha",
        AblationAxis::Lambda => "lambda",
    };
    let mut written = vec![
        format!("ablation_{axis}.json"),
        format!("ablation_{axis}.md"),
        format!("ablation_{axis}.csv"),
    ];
    fs::write(dir.join(&written[0]), serde_json::to_string_pretty(table)?)?;
    fs::write(dir.join(&written[1]), table.to_markdown())?;
    fs::write(dir.join(&written[2]), table.to_csv())?;
    if table.axis == AblationAxis::Lambda {
        fs::write(dir.join("fig2b.csv"), table.to_csv())?;
        written.push("fig2b.csv".into());
    }
    Ok(written)
}

/// `study.{json,md}` and `fig3.csv`.
pub fn write_study(table: &StudyTable, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("study.json"), serde_json::to_string_pretty(table)?)?;
    fs::write(dir.join("study.md"), table.to_markdown())?;
    fs::write(dir.join("fig3.csv"), table.to_csv())?;
    Ok(vec!["study.json".into(), "study.md".into(), "fig3.csv".into()])
}

pub fn write_bench(table: &BenchTable, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("bench.json"), serde_json::to_string_pretty(table)?)?;
    fs::write(dir.join("bench.md"), table.to_markdown())?;
    Ok(vec!["bench.json".into(), "bench.md".into()])
}
