use std::path::Path;

use gkd_core::divergences::DivergenceSpec;
use gkd_core::gkd::{train, write_metrics_csv, MetricsRow, TrainSetup};
use gkd_core::oracle::{discretized_mixture, grid, mode_seeking_demo, write_trace_csv, DemoConfig};
use gkd_core::policies::{read_checkpoint, write_checkpoint, ParametricPolicy, Policy};
use gkd_core::rl_gkd::train_rl;
use gkd_core::rng::{stream, Stream};
use gkd_core::tasks::{
    evaluate_policy, generate_dataset, read_dataset, write_dataset, DataSource, Decode, EvalOptions, EvalReport, Task,
    TaskName,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{DemoTarget, EvalPolicy};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const CHECKPOINT_FILE: &str = "checkpoints/final.ckpt";

/// The student a run starts from: the task's architecture, initialized from
/// the run seed.
pub fn initial_student(cfg: &RunConfig, task: &Task) -> CliResult<ParametricPolicy> {
    Ok(ParametricPolicy::init(
        task.vocab(),
        task.student_architecture(),
        cfg.seed,
        &mut stream(cfg.seed, Stream::Init),
    )?)
}

pub fn generate(task: TaskName, source: DataSource, n: usize, seed: u64, out: &Path) -> CliResult<Value> {
    let task = Task::named(task)?;
    let data = generate_dataset(&task, source, n, seed)?;
    write_dataset(out, &data)?;
    Ok(json!({ "out": out, "count": n }))
}

pub fn metrics_json(row: &MetricsRow) -> Value {
    let mut v = json!({
        "step": row.step,
        "loss": row.loss,
        "on_policy_discrepancy": row.on_policy_discrepancy,
        "exact_match": row.exact_match,
        "teacher_loglik": row.teacher_loglik,
    });
    if let Some(rl) = row.rl {
        v["mean_reward"] = json!(rl.mean_reward);
        v["baseline"] = json!(rl.baseline);
        v["alpha"] = json!(rl.alpha);
    }
    v
}

/// Trains into `dir`, writing the config snapshot, the metrics table and the
/// final checkpoint. Returns the logged rows and the written files.
pub fn train_into(cfg: &RunConfig, dir: &Path) -> CliResult<(Vec<MetricsRow>, Vec<String>)> {
    cfg.validate()?;
    let task = Task::named(cfg.task)?;
    let dataset = match &cfg.dataset {
        Some(path) => read_dataset(path, &task)?.examples,
        None => Vec::new(),
    };
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
    let snapshot = dir.join(CONFIG_SNAPSHOT);
    std::fs::write(&snapshot, cfg.to_toml()).map_err(|e| CliError::io(&snapshot, e))?;

    let setup = TrainSetup {
        task: &task,
        dataset: &dataset,
        n_eval: cfg.n_eval,
        decode: cfg.decode,
        record_wallclock: false,
    };
    let student = initial_student(cfg, &task)?;
    let out = match cfg.rl() {
        Some(rl) => {
            let reward = |x: &gkd_core::policies::Context, y: &[usize]| task.reward(x, y);
            train_rl(&cfg.gkd(), &rl, &setup, &reward, student)?
        }
        None => train(&cfg.gkd(), cfg.loss(), &setup, student)?,
    };
    write_metrics_csv(&dir.join(METRICS_FILE), &out.metrics, cfg.alpha.is_some())?;
    write_checkpoint(&dir.join(CHECKPOINT_FILE), &out.student)?;
    Ok((
        out.metrics,
        vec![CONFIG_SNAPSHOT.into(), METRICS_FILE.into(), CHECKPOINT_FILE.into()],
    ))
}

pub fn train_summary(dir: &Path, metrics: &[MetricsRow]) -> Value {
    json!({
        "out": dir,
        "rows": metrics.len(),
        "final": metrics.last().map(metrics_json),
    })
}

pub fn eval(
    policy: &EvalPolicy,
    task: TaskName,
    decode: Decode,
    n_eval: usize,
    seed: u64,
    divergence: DivergenceSpec,
) -> CliResult<EvalReport> {
    let task = Task::named(task)?;
    let opts = EvalOptions {
        n_eval,
        decode,
        divergence,
        seed,
    };
    match policy {
        EvalPolicy::Teacher => Ok(evaluate_policy(task.teacher(), &task, &opts)?),
        EvalPolicy::Checkpoint { path } => {
            let student = read_checkpoint(path)?;
            if student.vocab() != task.vocab() {
                return Err(CliError::config(format!(
                    "checkpoint {} has vocab size {} but task {} uses {}",
                    path.display(),
                    student.vocab().size(),
                    task.name().as_str(),
                    task.vocab().size()
                )));
            }
            Ok(evaluate_policy(&student, &task, &opts)?)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DemoSummary {
    pub divergence: DivergenceSpec,
    pub target: DemoTarget,
    pub init_mu: f64,
    pub init_sigma: f64,
    pub mu: f64,
    pub sigma: f64,
    pub loss: f64,
    pub sigma_clamped: bool,
}

/// Fits the single bump to the target and writes the trace. Without a seed
/// the default start is used; with one, the seeded start.
pub fn demo_mode_seeking(
    divergence: DivergenceSpec,
    target: DemoTarget,
    seed: Option<u64>,
    out_csv: &Path,
) -> CliResult<DemoSummary> {
    let g = grid();
    let components: &[(f64, f64, f64)] = match target {
        DemoTarget::Bimodal => &[(0.5, -3.0, 1.0), (0.5, 3.0, 1.0)],
        DemoTarget::Single => &[(1.0, 2.0, 1.0)],
    };
    let dist = discretized_mixture(&g, components)?;
    let cfg = seed.map_or_else(DemoConfig::default, DemoConfig::seeded);
    let r = mode_seeking_demo(&dist, &g, &divergence, &cfg)?;
    write_trace_csv(out_csv, &r.trace)?;
    Ok(DemoSummary {
        divergence,
        target,
        init_mu: cfg.init_mu,
        init_sigma: cfg.init_sigma,
        mu: r.mu,
        sigma: r.sigma,
        loss: r.loss,
        sigma_clamped: r.sigma_clamped,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
