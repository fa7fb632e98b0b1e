use std::path::Path;
use std::time::Instant;

use super::{
    draw_batch, gkd_step, supervised_ft_step, BatchSources, GkdConfig, LossKind, TrainState,
};
use crate::error::{Error, Result};
use crate::policies::ParametricPolicy;
use crate::tasks::{evaluate_policy, Decode, EvalOptions, Example, Task};

/// What the loop trains against and how it reports.
#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    pub task: &'a Task,
    pub dataset: &'a [Example],
    /// Contexts evaluated at every logging step.
    pub n_eval: usize,
    pub decode: Decode,
    /// Fill `wallclock_s`; when off the column is always 0 so that reruns
    /// produce identical files.
    pub record_wallclock: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlColumns {
    pub mean_reward: f64,
    pub baseline: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// Training loss of this step's batch, before the update.
    pub loss: f64,
    pub on_policy_discrepancy: f64,
    pub exact_match: f64,
    pub teacher_loglik: f64,
    pub wallclock_s: f64,
    pub rl: Option<RlColumns>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub student: ParametricPolicy,
    /// One entry per step.
    pub losses: Vec<f64>,
    pub metrics: Vec<MetricsRow>,
}

/// Runs `config.steps` updates of the chosen loss, logging every
/// `eval_every` steps and after the last one.
pub fn train(
    config: &GkdConfig,
    loss: LossKind,
    setup: &TrainSetup<'_>,
    student: ParametricPolicy,
) -> Result<TrainOutput> {
    config.validate()?;
    if loss == LossKind::Nll && config.lambda != 0.0 {
        return Err(Error::Config(
            "negative log-likelihood training needs lambda = 0 (dataset batches only)".into(),
        ));
    }
    let teacher = setup.task.teacher();
    let sources = BatchSources {
        contexts: setup.task.contexts(),
        dataset: setup.dataset,
    };
    run_loop(config, setup, student, |state| {
        let batch = draw_batch(state, sources, config)?;
        let l = match loss {
            LossKind::Distill => gkd_step(state, teacher, &batch, config)?,
            LossKind::Nll => supervised_ft_step(state, &batch, config)?,
        };
        Ok((l, None))
    })
}

/// Shared driver: `step` performs one update and returns its loss and any
/// extra columns.
pub(crate) fn run_loop(
    config: &GkdConfig,
    setup: &TrainSetup<'_>,
    student: ParametricPolicy,
    mut step: impl FnMut(&mut TrainState) -> Result<(f64, Option<RlColumns>)>,
) -> Result<TrainOutput> {
    let started = Instant::now();
    let eval = EvalOptions {
        n_eval: setup.n_eval,
        decode: setup.decode,
        divergence: config.divergence,
        seed: config.seed,
    };
    let mut state = TrainState::new(student, config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    let mut metrics = Vec::new();
    for k in 1..=config.steps {
        let (loss, rl) = step(&mut state)?;
        losses.push(loss);
        if k % config.eval_every == 0 || k == config.steps {
            let report = evaluate_policy(&state.student, setup.task, &eval)?;
            metrics.push(MetricsRow {
                step: k,
                loss,
                on_policy_discrepancy: report.on_policy_discrepancy,
                exact_match: report.exact_match,
                teacher_loglik: report.teacher_loglik,
                wallclock_s: if setup.record_wallclock {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
                rl,
            });
        }
    }
    Ok(TrainOutput {
        student: state.student,
        losses,
        metrics,
    })
}

pub const METRICS_COLUMNS: [&str; 6] = [
    "step",
    "loss",
    "on_policy_discrepancy",
    "exact_match",
    "teacher_loglik",
    "wallclock_s",
];
pub const RL_COLUMNS: [&str; 3] = ["mean_reward", "baseline", "alpha"];

/// Writes the metrics table. `with_rl` adds the reward, baseline and alpha
/// columns (rows without them leave the cells empty).
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow], with_rl: bool) -> Result<()> {
    let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    let mut header: Vec<&str> = METRICS_COLUMNS.to_vec();
    if with_rl {
        header.extend(RL_COLUMNS);
    }
    w.write_record(&header).map_err(wrap)?;
    for r in rows {
        let mut rec = vec![
            r.step.to_string(),
            r.loss.to_string(),
            r.on_policy_discrepancy.to_string(),
            r.exact_match.to_string(),
            r.teacher_loglik.to_string(),
            r.wallclock_s.to_string(),
        ];
        if with_rl {
            match r.rl {
                Some(c) => rec.extend([c.mean_reward, c.baseline, c.alpha].map(|v| v.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), 3)),
            }
        }
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
