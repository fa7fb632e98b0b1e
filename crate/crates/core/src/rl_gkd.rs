//! Reward maximization regularized by on-policy distillation.
//!
//! The minimized loss is `alpha * D - (1 - alpha) * E[r]`, both terms
//! estimated on one batch sampled from the student. The reward term uses the
//! score-function estimator with an exponential-moving-average baseline.

use serde::{Deserialize, Serialize};

use crate::distributions::Token;
use crate::error::{Error, Result};
use crate::gkd::{
    accumulate_distill, accumulate_weighted, check_grad, draw_batch, in_step, run_loop, sequence_nll,
    BatchSources, GkdConfig, RlColumns, SampleBatch, TrainOutput, TrainSetup, TrainState,
};
use crate::policies::{Context, ParametricPolicy, Policy};

/// A pure reward with values in [0, 1].
pub trait RewardFn: Sync {
    fn reward(&self, x: &Context, y: &[Token]) -> f64;
}

impl<F: Fn(&Context, &[Token]) -> f64 + Sync> RewardFn for F {
    fn reward(&self, x: &Context, y: &[Token]) -> f64 {
        self(x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    /// Weight on the distillation term.
    pub alpha: f64,
    /// Decay of the reward moving average.
    pub baseline_decay: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            alpha: 0.5,
            baseline_decay: 0.99,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha = {} outside [0,1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config(format!(
                "baseline_decay = {} outside [0,1)",
                self.baseline_decay
            )));
        }
        Ok(())
    }
}

/// Accumulates `-advantage * grad ln p_S(y|x)` into the student's gradient
/// buffer.
pub fn reinforce_grad(student: &mut ParametricPolicy, x: &Context, y: &[Token], advantage: f64) -> Result<()> {
    accumulate_reinforce(student, x, y, advantage, 1.0)
}

fn accumulate_reinforce(
    student: &mut ParametricPolicy,
    x: &Context,
    y: &[Token],
    advantage: f64,
    weight: f64,
) -> Result<()> {
    if advantage == 0.0 {
        return Ok(());
    }
    // -adv * grad ln p = adv * grad NLL
    let (_, grads) = sequence_nll(student, x, y)?;
    accumulate_weighted(student, x, y, grads, advantage * weight)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlStepStats {
    /// `alpha * mean discrepancy - (1 - alpha) * mean reward`, pre-update.
    pub loss: f64,
    pub mean_reward: f64,
    /// `None` when `alpha = 0`, since the teacher is then never consulted.
    pub mean_discrepancy: Option<f64>,
    /// Baseline after this step's update.
    pub baseline: f64,
}

/// One update on a student-sampled batch. With `alpha = 1` the reward term
/// is skipped entirely, so the step coincides with an on-policy
/// distillation step; with `alpha = 0` the teacher is not queried.
pub fn rl_gkd_step(
    state: &mut TrainState,
    baseline: &mut f64,
    teacher: &dyn Policy,
    reward: &dyn RewardFn,
    batch: &SampleBatch,
    config: &GkdConfig,
    rl: &RlConfig,
) -> Result<RlStepStats> {
    if batch.items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let b = batch.items.len() as f64;
    let rewards: Vec<f64> = batch
        .items
        .iter()
        .map(|i| reward.reward(&i.context, i.output.tokens()))
        .collect();
    if let Some(r) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::invalid(format!("reward {r} outside [0,1]")));
    }
    let mean_reward = rewards.iter().sum::<f64>() / b;
    state.student.zero_grad();
    let mean_discrepancy = if rl.alpha > 0.0 {
        Some(accumulate_distill(state, teacher, batch, config, rl.alpha / b)?)
    } else {
        None
    };
    if rl.alpha < 1.0 {
        let weight = (1.0 - rl.alpha) / b;
        for (item, r) in batch.items.iter().zip(&rewards) {
            let step = state.step;
            in_step(
                step,
                item,
                accumulate_reinforce(&mut state.student, &item.context, item.output.tokens(), r - *baseline, weight),
            )?;
        }
    }
    check_grad(state, batch)?;
    state.student.sgd_step(config.learning_rate);
    state.step += 1;
    *baseline = rl.baseline_decay * *baseline + (1.0 - rl.baseline_decay) * mean_reward;
    let loss = match mean_discrepancy {
        Some(d) => rl.alpha * d - (1.0 - rl.alpha) * mean_reward,
        None => -mean_reward,
    };
    Ok(RlStepStats {
        loss,
        mean_reward,
        mean_discrepancy,
        baseline: *baseline,
    })
}

/// Trains on student samples only (lambda is forced to 1); the metrics rows
/// carry the reward columns.
pub fn train_rl(
    config: &GkdConfig,
    rl: &RlConfig,
    setup: &TrainSetup<'_>,
    reward: &dyn RewardFn,
    student: ParametricPolicy,
) -> Result<TrainOutput> {
    rl.validate()?;
    let config = GkdConfig {
        lambda: 1.0,
        ..config.clone()
    };
    config.validate()?;
    let teacher = setup.task.teacher();
    let sources = BatchSources {
        contexts: setup.task.contexts(),
        dataset: &[],
    };
    let mut baseline = 0.0;
    run_loop(&config, setup, student, |state| {
        let batch = draw_batch(state, sources, &config)?;
        let s = rl_gkd_step(state, &mut baseline, teacher, reward, &batch, &config, rl)?;
        Ok((
            s.loss,
            Some(RlColumns {
                mean_reward: s.mean_reward,
                baseline: s.baseline,
                alpha: rl.alpha,
            }),
        ))
    })
}
