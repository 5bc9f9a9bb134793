//! The end-to-end workflow and its sweeps, on the synthetic harness.

mod ablate;
mod bench;
mod config;
mod pipeline;
mod report;
mod study;

pub use ablate::{ablate, AblationAxis, AblationRow, AblationTable, ALPHA_GRID, LAMBDA_GRID};
pub use bench::{overhead_benchmark, BenchRow, BenchTable, BENCH_ROUNDS};
pub use config::{PhaseSteps, PipelineConfig};
pub use pipeline::{
    mean_std, run_pipeline, Arm, ArmAggregate, ArmResult, CheckpointMetrics, PipelineReport,
    SeedResult,
};
pub use report::{
    fig2a_csv, summary_markdown, write_ablation, write_bench, write_pipeline_report, write_study,
};
pub use study::{diversity_disparity_study, StudyRow, StudyTable};
