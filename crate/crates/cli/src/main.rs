//! `capvec`: extract, merge and finetune with capability vectors from the
//! command line.
//!
//! Exit codes: 0 success, 1 other failure, 2 key alignment, 3 checkpoint
//! format, 4 empty selection, 5 configuration, 6 training.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use capvec_core::capvec::{diagnostics, extract_capability, merge, CapabilityVector};
use capvec_core::checkpoint::select_keys;
use capvec_core::experiments::{
    ablate, diversity_disparity_study, overhead_benchmark, run_pipeline, summary_markdown,
    write_ablation, write_bench, write_pipeline_report, write_study, AblationAxis, PipelineConfig,
    ALPHA_GRID, LAMBDA_GRID,
};
use capvec_core::models::{init_model, Model, ModelConfig, TeacherProjection};
use capvec_core::synth::{gen_family, mix_seed, FamilySpec};
use capvec_core::trainers::{train_aux, train_downstream_orth, train_sft, Optimizer, TrainConfig};
use capvec_core::{load_checkpoint, save_checkpoint, Error, ParamSet};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "capvec", version, about = "Capability-vector extraction, merging and regularized finetuning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Machine-readable JSON on stdout instead of tables.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for every random draw the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores); CAPVEC_THREADS caps it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write `after - before` with provenance meta.
    Diff {
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write `base + alpha * capvec`, optionally on a name-prefix subset.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        capvec: PathBuf,
        #[arg(long, default_value_t = 1.1, allow_negative_numbers = true)]
        alpha: f32,
        #[arg(long, num_args = 1..)]
        mask: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the four-arm pipeline from a JSON config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 1..)]
        seeds: Option<Vec<u64>>,
    },
    /// Print a checkpoint's index and meta.
    Inspect { path: PathBuf },
    /// Train a single arm.
    Train(TrainArgs),
    /// Sweep alpha or lambda for arm (d).
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Defaults to the standard grid for the axis.
        #[arg(long, num_args = 1.., allow_negative_numbers = true)]
        grid: Option<Vec<f32>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 1..)]
        seeds: Option<Vec<u64>>,
    },
    /// Compare extraction families by diversity and disparity.
    Study {
        #[arg(long)]
        config: PathBuf,
        /// Family spec files; each holds one spec or an array of specs.
        #[arg(long, num_args = 1.., required = true)]
        families: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 1..)]
        seeds: Option<Vec<u64>>,
    },
    /// Time plain, auxiliary and orth-regularized steps.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit a synthetic task family as a checkpoint or CSV.
    Gen {
        /// Family spec file; knob flags below override it.
        #[arg(long)]
        family: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        spread: Option<f32>,
        #[arg(long)]
        shortcut: bool,
        /// Write samples as CSV instead of the generator checkpoint.
        #[arg(long)]
        csv: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Alpha,
    Lambda,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainArm {
    Sft,
    Aux,
    Orth,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    arm: TrainArm,
    /// Family spec JSON.
    #[arg(long)]
    family: PathBuf,
    /// Starting checkpoint; a fresh model is initialized when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Model config JSON, for fresh initialization.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Capability vector, required for `orth`.
    #[arg(long)]
    gamma: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f32,
    #[arg(long, default_value_t = 1e-4)]
    lambda: f32,
    #[arg(long, default_value_t = 1.0)]
    aux_weight: f32,
    #[arg(long)]
    adam: bool,
    #[arg(long)]
    out: PathBuf,
    /// Loss log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::Alignment(_) | Error::ShapeMismatch { .. } | Error::RankMismatch { .. } => 2,
            Error::Format(_) | Error::DuplicateKey(_) | Error::NonFinite(_) => 3,
            Error::EmptySelection(_) => 4,
            Error::InvalidConfig(_) | Error::Json(_) | Error::NegativeLambda(_) => 5,
            Error::Divergence { .. } => 6,
            _ => 1,
        };
        // Anything that failed inside a training phase is a training error.
        let code = match (&e, code) {
            (Error::Phase { .. }, 1..=3) => 6,
            _ => code,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 5,
        message: format!("{}: {e}", path.display()),
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> std::result::Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_failure(path, e))?;
    // serde_json's message already ends with the line and column.
    serde_json::from_str(&text).map_err(|e| config_failure(path, format_args!("malformed JSON: {e}")))
}

fn load_config(path: &Path, common: &Common, seeds: Option<Vec<u64>>) -> std::result::Result<PipelineConfig, Failure> {
    let mut cfg: PipelineConfig = read_json(path)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    } else if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    cfg.validate().map_err(|e| config_failure(path, e))?;
    Ok(cfg)
}

fn emit(common: &Common, value: &impl serde::Serialize, human: impl FnOnce() -> String) -> CmdResult {
    if common.json {
        let s = serde_json::to_string(value).map_err(Error::from)?;
        println!("{s}");
    } else {
        print!("{}", human());
    }
    Ok(())
}

fn cmd_diff(common: &Common, after: &Path, before: &Path, out: &Path) -> CmdResult {
    let a = load_checkpoint(after)?;
    let b = load_checkpoint(before)?;
    let cap = extract_capability(&a, &b)?;
    save_checkpoint(&cap.params, out)?;
    for w in &cap.warnings {
        eprintln!("warning: {w}");
    }
    let report = diagnostics(&cap, &cap.params)?;
    emit(common, &report, || {
        let mut s = format!(
            "wrote {} ({} tensors, ‖γ‖ = {:.6e})\n",
            out.display(),
            cap.params.len(),
            report.global.gamma_norm
        );
        for p in &report.per_param {
            s.push_str(&format!("  {:<32} ‖·‖ = {:.6e}\n", p.name, p.gamma_norm));
        }
        s
    })
}

fn cmd_merge(common: &Common, base: &Path, capvec: &Path, alpha: f32, mask: Option<&[String]>, out: &Path) -> CmdResult {
    let theta = load_checkpoint(base)?;
    let gamma = CapabilityVector::from_params(load_checkpoint(capvec)?);
    if let Some(m) = mask {
        select_keys(&gamma.params, m)?;
    }
    let merged = merge(&theta, &gamma, alpha, mask)?;
    save_checkpoint(&merged, out)?;
    let summary = serde_json::json!({
        "out": out.display().to_string(),
        // Shortest decimal form of the f32, not its widened f64 digits.
        "alpha": format!("{alpha}").parse::<f64>().unwrap_or(f64::NAN),
        "mask": mask,
        "tensors": merged.len(),
        "digest": merged.digest(),
    });
    emit(common, &summary, || {
        format!(
            "wrote {} (α = {alpha}, mask = {}, {} tensors)\n",
            out.display(),
            mask.map(|m| m.join(",")).unwrap_or_else(|| "none".into()),
            merged.len()
        )
    })
}

fn cmd_pipeline(common: &Common, config: &Path, out: &Path, seeds: Option<Vec<u64>>) -> CmdResult {
    let cfg = load_config(config, common, seeds)?;
    let mut report = run_pipeline(&cfg)?;
    write_pipeline_report(&mut report, out)?;
    emit(common, &report.aggregates, || summary_markdown(&report))
}

fn cmd_inspect(common: &Common, path: &Path) -> CmdResult {
    let p = load_checkpoint(path)?;
    let tensors: Vec<serde_json::Value> = p
        .iter()
        .map(|(n, t)| serde_json::json!({"name": n, "shape": t.shape(), "numel": t.numel()}))
        .collect();
    let summary = serde_json::json!({
        "tensors": tensors,
        "meta": p.meta(),
        "digest": p.digest(),
        "num_elements": p.num_elements(),
    });
    emit(common, &summary, || {
        let mut s = format!("{} tensors, {} elements\n", p.len(), p.num_elements());
        for (n, t) in p.iter() {
            s.push_str(&format!("  {n:<32} {:?}\n", t.shape()));
        }
        for (k, v) in p.meta() {
            s.push_str(&format!("  meta {k} = {v}\n"));
        }
        s
    })
}

fn model_from_meta(p: &ParamSet) -> std::result::Result<Model, Failure> {
    let text = p.meta_value("model").ok_or_else(|| Failure {
        code: 5,
        message: "checkpoint has no 'model' meta; pass --model".into(),
    })?;
    let cfg: ModelConfig = serde_json::from_str(text).map_err(Error::from)?;
    Ok(Model::new(cfg)?)
}

fn cmd_train(common: &Common, a: &TrainArgs) -> CmdResult {
    let seed = common.seed.unwrap_or(0);
    let spec: FamilySpec = read_json(&a.family)?;
    let family = gen_family(&spec)?;
    let (model, init) = match (&a.init, &a.model) {
        (Some(path), None) => {
            let p = load_checkpoint(path)?;
            (model_from_meta(&p)?, p)
        }
        (None, Some(path)) => {
            let cfg: ModelConfig = read_json(path)?;
            init_model(&cfg, mix_seed(seed, 2))?
        }
        (None, None) => init_model(&ModelConfig::default(), mix_seed(seed, 2))?,
        (Some(_), Some(_)) => {
            return Err(Failure {
                code: 5,
                message: "--init and --model are exclusive".into(),
            })
        }
    };
    model.config().check_dims(family.obs_dim(), family.action_dim())?;
    let cfg = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        learning_rate: a.lr,
        optimizer: if a.adam { Optimizer::adam() } else { Optimizer::Sgd },
        seed,
        log_every: (a.steps / 20).max(1),
        ..TrainConfig::default()
    };
    let (params, log) = match a.arm {
        TrainArm::Sft => train_sft(&model, &init, &family, &cfg),
        TrainArm::Aux => {
            let teacher = TeacherProjection::new(model.tap_width(), family.latent_dim(), mix_seed(seed, 1))?;
            let cfg = TrainConfig {
                aux_weight: a.aux_weight,
                ..cfg
            };
            train_aux(&model, &init, &family, &teacher, &cfg)
        }
        TrainArm::Orth => {
            let path = a.gamma.as_ref().ok_or_else(|| Failure {
                code: 5,
                message: "--arm orth needs --gamma".into(),
            })?;
            let gamma = CapabilityVector::from_params(load_checkpoint(path)?);
            let cfg = TrainConfig {
                lambda_orth: a.lambda,
                ..cfg
            };
            train_downstream_orth(&model, &init, &gamma, &family, &cfg)
        }
    }
    .map_err(|e| e.in_phase("train"))?;
    save_checkpoint(&params, &a.out)?;
    if let Some(path) = &a.log {
        fs::write(path, log.to_csv()).map_err(Error::from)?;
    }
    let last = log.final_record().cloned();
    emit(common, &last, || match &last {
        Some(r) => format!(
            "wrote {} after {} steps: L_action = {:.6}, total = {:.6}\n",
            a.out.display(),
            r.step,
            r.action,
            r.total
        ),
        None => format!("wrote {}\n", a.out.display()),
    })
}

fn cmd_ablate(common: &Common, config: &Path, axis: Axis, grid: Option<Vec<f32>>, out: &Path, seeds: Option<Vec<u64>>) -> CmdResult {
    let cfg = load_config(config, common, seeds)?;
    let (axis, default) = match axis {
        Axis::Alpha => (AblationAxis::Alpha, ALPHA_GRID.to_vec()),
        Axis::Lambda => (AblationAxis::Lambda, LAMBDA_GRID.to_vec()),
    };
    let table = ablate(&cfg, axis, &grid.unwrap_or(default))?;
    write_ablation(&table, out)?;
    emit(common, &table, || table.to_markdown())
}

fn read_families(paths: &[PathBuf]) -> std::result::Result<Vec<FamilySpec>, Failure> {
    let mut out = Vec::new();
    for p in paths {
        let v: serde_json::Value = read_json(p)?;
        let parsed = if v.is_array() {
            serde_json::from_value::<Vec<FamilySpec>>(v)
        } else {
            serde_json::from_value::<FamilySpec>(v).map(|f| vec![f])
        };
        out.extend(parsed.map_err(|e| config_failure(p, e))?);
    }
    Ok(out)
}

fn cmd_study(common: &Common, config: &Path, families: &[PathBuf], out: &Path, seeds: Option<Vec<u64>>) -> CmdResult {
    let cfg = load_config(config, common, seeds)?;
    let specs = read_families(families)?;
    let table = diversity_disparity_study(&cfg, &specs)?;
    write_study(&table, out)?;
    emit(common, &table, || table.to_markdown())
}

fn cmd_bench(common: &Common, config: &Path, steps: usize, out: Option<&Path>) -> CmdResult {
    let cfg = load_config(config, common, None)?;
    let table = overhead_benchmark(&cfg, steps)?;
    if let Some(dir) = out {
        write_bench(&table, dir)?;
    }
    emit(common, &table, || table.to_markdown())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    common: &Common,
    family: Option<&Path>,
    tasks: Option<usize>,
    pairs: Option<usize>,
    spread: Option<f32>,
    shortcut: bool,
    csv: Option<usize>,
    out: &Path,
) -> CmdResult {
    let mut spec = match family {
        Some(p) => read_json(p)?,
        None => FamilySpec::default(),
    };
    if let Some(t) = tasks {
        spec.num_tasks = t;
    }
    if let Some(p) = pairs {
        spec.pairs_per_task = p;
    }
    if let Some(s) = spread {
        spec.background_spread = s;
    }
    spec.shortcut |= shortcut;
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    let fam = gen_family(&spec)?;
    match csv {
        Some(per_task) => {
            let text = fam.to_csv(per_task, mix_seed(spec.seed, 0xC5))?;
            fs::write(out, text).map_err(Error::from)?;
        }
        None => save_checkpoint(&fam.to_params()?, out)?,
    }
    let summary = serde_json::json!({
        "out": out.display().to_string(),
        "spec": spec,
        "digest": fam.digest()?,
    });
    emit(common, &summary, || format!("wrote {} ({} tasks)\n", out.display(), fam.num_tasks()))
}

fn run(cli: Cli) -> CmdResult {
    let c = &cli.common;
    match cli.command {
        Command::Diff { after, before, out } => cmd_diff(c, &after, &before, &out),
        Command::Merge {
            base,
            capvec,
            alpha,
            mask,
            out,
        } => cmd_merge(c, &base, &capvec, alpha, mask.as_deref(), &out),
        Command::Pipeline { config, out, seeds } => cmd_pipeline(c, &config, &out, seeds),
        Command::Inspect { path } => cmd_inspect(c, &path),
        Command::Train(args) => cmd_train(c, &args),
        Command::Ablate {
            config,
            axis,
            grid,
            out,
            seeds,
        } => cmd_ablate(c, &config, axis, grid, &out, seeds),
        Command::Study {
            config,
            families,
            out,
            seeds,
        } => cmd_study(c, &config, &families, &out, seeds),
        Command::Bench { config, steps, out } => cmd_bench(c, &config, steps, out.as_deref()),
        Command::Gen {
            family,
            tasks,
            pairs,
            spread,
            shortcut,
            csv,
            out,
        } => cmd_gen(c, family.as_deref(), tasks, pairs, spread, shortcut, csv, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
