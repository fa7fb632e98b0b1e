//! Generalized knowledge distillation: batch sourcing, the distillation and
//! negative log-likelihood update steps, and the baseline presets.

mod train;

pub use train::{
    train, write_metrics_csv, MetricsRow, RlColumns, TrainOutput, TrainSetup, METRICS_COLUMNS,
    RL_COLUMNS,
};
pub(crate) use train::run_loop;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{softmax_with_temperature, Token, GAMMA_MAX, GAMMA_MIN};
use crate::divergences::{sequence_discrepancy, DivergenceSpec};
use crate::error::{Error, Result};
use crate::policies::{sample_sequence, Context, ParametricPolicy, Policy, Sequence};
use crate::rng::{stream, unit_open_closed, Rng, Stream};
use crate::tasks::Example;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GkdConfig {
    /// Probability that a step trains on the student's own samples.
    pub lambda: f64,
    pub divergence: DivergenceSpec,
    /// Softmax temperature applied to the teacher only.
    pub teacher_gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub max_len: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Draw the source independently for every example instead of once per
    /// batch.
    #[serde(default)]
    pub per_example_mixing: bool,
}

impl GkdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda = {} outside [0,1]", self.lambda));
        }
        self.divergence.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(GAMMA_MIN..=GAMMA_MAX).contains(&self.teacher_gamma) {
            return bad(format!(
                "teacher_gamma = {} outside [{GAMMA_MIN}, {GAMMA_MAX}]",
                self.teacher_gamma
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {} must be finite and non-negative", self.learning_rate));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

/// Which per-sequence loss a run minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Token-averaged divergence to the teacher.
    Distill,
    /// Summed negative log-likelihood of dataset outputs.
    Nll,
}

/// Named baselines, each a fixed point in the (lambda, divergence) space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    SupervisedFt,
    SupervisedKd,
    OnPolicyKd,
    Imitkd,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::SupervisedFt,
        Preset::SupervisedKd,
        Preset::OnPolicyKd,
        Preset::Imitkd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::SupervisedFt => "supervised_ft",
            Preset::SupervisedKd => "supervised_kd",
            Preset::OnPolicyKd => "on_policy_kd",
            Preset::Imitkd => "imitkd",
        }
    }

    pub fn lambda(self) -> f64 {
        match self {
            Preset::SupervisedFt | Preset::SupervisedKd => 0.0,
            Preset::OnPolicyKd => 1.0,
            Preset::Imitkd => 0.5,
        }
    }

    /// Forward KL for every preset. Supervised fine-tuning ignores it.
    pub fn divergence(self) -> DivergenceSpec {
        DivergenceSpec::ForwardKl
    }

    pub fn loss(self) -> LossKind {
        match self {
            Preset::SupervisedFt => LossKind::Nll,
            _ => LossKind::Distill,
        }
    }

    /// `base` with this preset's lambda and divergence.
    pub fn apply(self, base: &GkdConfig) -> GkdConfig {
        GkdConfig {
            lambda: self.lambda(),
            divergence: self.divergence(),
            ..base.clone()
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset {s:?} (expected supervised_ft, supervised_kd, on_policy_kd or imitkd)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSource {
    Dataset,
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub context: Context,
    pub output: Sequence,
    pub source: BatchSource,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleBatch {
    pub items: Vec<BatchItem>,
}

impl SampleBatch {
    /// The common source of every item, or `None` for a mixed or empty batch.
    pub fn source(&self) -> Option<BatchSource> {
        let first = self.items.first()?.source;
        self.items.iter().all(|i| i.source == first).then_some(first)
    }
}

/// The student under training plus the three random streams the loop
/// consumes.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: ParametricPolicy,
    pub step: usize,
    pub mixing: Rng,
    pub sampling: Rng,
    pub data: Rng,
}

impl TrainState {
    pub fn new(student: ParametricPolicy, seed: u64) -> Self {
        TrainState {
            student,
            step: 0,
            mixing: stream(seed, Stream::Mixing),
            sampling: stream(seed, Stream::Sampling),
            data: stream(seed, Stream::Data),
        }
    }
}

/// Where a batch may come from: a pool of prompts for student generation and
/// a fixed dataset.
#[derive(Debug, Clone, Copy)]
pub struct BatchSources<'a> {
    pub contexts: &'a [Context],
    pub dataset: &'a [Example],
}

/// Draws one batch. A single `u ~ U(0,1]` per step picks the source for the
/// whole batch (`u <= lambda` means student samples at temperature 1);
/// dataset examples are drawn uniformly with replacement. With
/// `per_example_mixing` every example gets its own draw.
pub fn draw_batch(
    state: &mut TrainState,
    sources: BatchSources<'_>,
    config: &GkdConfig,
) -> Result<SampleBatch> {
    if config.lambda < 1.0 && sources.dataset.is_empty() {
        return Err(Error::Config(format!(
            "lambda = {} < 1 requires a non-empty dataset",
            config.lambda
        )));
    }
    if sources.contexts.is_empty() && config.lambda > 0.0 {
        return Err(Error::Config("student sampling needs at least one context".into()));
    }
    let pick = |state: &mut TrainState| {
        if unit_open_closed(&mut state.mixing) <= config.lambda {
            BatchSource::Student
        } else {
            BatchSource::Dataset
        }
    };
    let shared = (!config.per_example_mixing).then(|| pick(state));
    let mut items = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let source = match shared {
            Some(s) => s,
            None => pick(state),
        };
        let item = match source {
            BatchSource::Student => {
                use rand::Rng as _;
                let context = sources.contexts[state.data.gen_range(0..sources.contexts.len())].clone();
                let output = sample_sequence(&state.student, &context, config.max_len, 1.0, &mut state.sampling)
                    .map_err(|e| match e {
                        Error::InvalidArgument(m) if m.starts_with("non-finite") => Error::Numerical {
                            step: state.step,
                            detail: format!("{m} while sampling for context {:?}", context.tokens()),
                        },
                        e => e,
                    })?;
                BatchItem { context, output, source }
            }
            BatchSource::Dataset => {
                use rand::Rng as _;
                let ex = &sources.dataset[state.data.gen_range(0..sources.dataset.len())];
                BatchItem {
                    context: ex.context.clone(),
                    output: ex.output.clone(),
                    source,
                }
            }
        };
        items.push(item);
    }
    Ok(SampleBatch { items })
}

fn numerical(step: usize, item: &BatchItem, what: &str) -> Error {
    Error::Numerical {
        step,
        detail: format!(
            "{what} for context {:?}, output {:?}",
            item.context.tokens(),
            item.output.tokens()
        ),
    }
}

/// Non-finite student logits surface from the kernels as invalid arguments;
/// inside a training step they are a numerical failure of that step.
pub(crate) fn in_step<T>(step: usize, item: &BatchItem, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidArgument(m) if m.starts_with("non-finite") => numerical(step, item, &m),
        e => e,
    })
}

/// Adds `weight * grads` for one sequence into the student's accumulator.
pub(crate) fn accumulate_weighted(
    student: &mut ParametricPolicy,
    x: &Context,
    y: &[Token],
    grads: Vec<Vec<f64>>,
    weight: f64,
) -> Result<()> {
    let scaled: Vec<Vec<f64>> = grads
        .into_iter()
        .map(|g| g.into_iter().map(|v| v * weight).collect())
        .collect();
    student.accumulate_param_grads(x, y, &scaled)
}

/// Sequence negative log-likelihood `-sum_n ln p_S(y_n | y_<n, x)` and its
/// per-position logit gradients.
pub fn sequence_nll(student: &dyn Policy, x: &Context, y: &[Token]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut nll = 0.0;
    let mut grads = Vec::with_capacity(y.len());
    for n in 0..y.len() {
        let q = softmax_with_temperature(&student.next_token_logits(x, &y[..n])?, 1.0)?;
        let v = y[n];
        nll -= q.log_probs()[v];
        let mut prob_grad = vec![0.0; q.len()];
        prob_grad[v] = -1.0 / q.probs()[v];
        grads.push(q.logit_grad(&prob_grad));
    }
    Ok((nll, grads))
}

pub(crate) fn check_grad(state: &TrainState, batch: &SampleBatch) -> Result<()> {
    if state.student.grad().iter().all(|g| g.is_finite()) {
        return Ok(());
    }
    let culprit = batch.items.first().expect("non-empty batch");
    Err(numerical(state.step, culprit, "non-finite gradient"))
}

/// Accumulates `weight * grad D` for every item; returns the mean
/// discrepancy.
pub(crate) fn accumulate_distill(
    state: &mut TrainState,
    teacher: &dyn Policy,
    batch: &SampleBatch,
    config: &GkdConfig,
    weight: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for item in &batch.items {
        let d = in_step(
            state.step,
            item,
            sequence_discrepancy(
                &config.divergence,
                config.teacher_gamma,
                teacher,
                &state.student,
                &item.context,
                item.output.tokens(),
            ),
        )?;
        if !d.value.is_finite() {
            return Err(numerical(state.step, item, &format!("discrepancy {}", d.value)));
        }
        total += d.value;
        accumulate_weighted(&mut state.student, &item.context, item.output.tokens(), d.per_token_grads, weight)?;
    }
    Ok(total / batch.items.len() as f64)
}

fn check_batch(batch: &SampleBatch) -> Result<()> {
    if batch.items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(())
}

/// One plain gradient step on the batch mean of the sequence discrepancy.
/// Returns the pre-update batch loss.
pub fn gkd_step(
    state: &mut TrainState,
    teacher: &dyn Policy,
    batch: &SampleBatch,
    config: &GkdConfig,
) -> Result<f64> {
    check_batch(batch)?;
    state.student.zero_grad();
    let weight = 1.0 / batch.items.len() as f64;
    let loss = accumulate_distill(state, teacher, batch, config, weight)?;
    check_grad(state, batch)?;
    state.student.sgd_step(config.learning_rate);
    state.step += 1;
    Ok(loss)
}

/// One plain gradient step on the batch mean of the summed negative
/// log-likelihood. Only dataset batches are accepted.
pub fn supervised_ft_step(state: &mut TrainState, batch: &SampleBatch, config: &GkdConfig) -> Result<f64> {
    check_batch(batch)?;
    if batch.items.iter().any(|i| i.source != BatchSource::Dataset) {
        return Err(Error::invalid("supervised fine-tuning trains on dataset batches only"));
    }
    state.student.zero_grad();
    let weight = 1.0 / batch.items.len() as f64;
    let mut total = 0.0;
    for item in &batch.items {
        let (nll, grads) = in_step(
            state.step,
            item,
            sequence_nll(&state.student, &item.context, item.output.tokens()),
        )?;
        if !nll.is_finite() {
            return Err(numerical(state.step, item, &format!("negative log-likelihood {nll}")));
        }
        total += nll;
        accumulate_weighted(&mut state.student, &item.context, item.output.tokens(), grads, weight)?;
    }
    check_grad(state, batch)?;
    state.student.sgd_step(config.learning_rate);
    state.step += 1;
    Ok(total / batch.items.len() as f64)
}

/// The trainer's own Monte Carlo estimate of the objective: the pre-update
/// losses of `samples` single-item steps taken with a zero learning rate,
/// drawn exactly as training would draw them under `config`. Returns
/// `(mean, standard error)`; `student` is not modified.
pub fn sampled_training_loss(
    teacher: &dyn Policy,
    student: &ParametricPolicy,
    sources: BatchSources<'_>,
    config: &GkdConfig,
    samples: usize,
) -> Result<(f64, f64)> {
    if samples < 2 {
        return Err(Error::invalid("need at least two samples for a standard error"));
    }
    let config = GkdConfig {
        learning_rate: 0.0,
        batch_size: 1,
        ..config.clone()
    };
    config.validate()?;
    let mut state = TrainState::new(student.clone(), config.seed);
    let mut losses = Vec::with_capacity(samples);
    for _ in 0..samples {
        let batch = draw_batch(&mut state, sources, &config)?;
        losses.push(gkd_step(&mut state, teacher, &batch, &config)?);
    }
    let n = samples as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Vocab;
    use crate::policies::Architecture;

    pub(crate) fn config(lambda: f64) -> GkdConfig {
        GkdConfig {
            lambda,
            divergence: DivergenceSpec::ForwardKl,
            teacher_gamma: 1.0,
            learning_rate: 0.1,
            batch_size: 4,
            steps: 10,
            max_len: 3,
            seed: 1,
            eval_every: 5,
            per_example_mixing: false,
        }
    }

    fn state() -> (TrainState, Vec<Context>, Vec<Example>) {
        let v = Vocab::new(3, 0).unwrap();
        let arch = Architecture { window: 1, embed_dim: 2, hidden_dim: 2 };
        let s = ParametricPolicy::init(v, arch, 0, &mut stream(0, Stream::Init)).unwrap();
        let x = Context::new(vec![1], &v).unwrap();
        let ex = Example { context: x.clone(), output: Sequence::new(vec![2, 0], &v, 3).unwrap() };
        (TrainState::new(s, 9), vec![x], vec![ex])
    }

    #[test]
    fn source_follows_lambda() {
        let (mut st, ctx, data) = state();
        let src = BatchSources { contexts: &ctx, dataset: &data };
        for (lambda, expected) in [(0.0, BatchSource::Dataset), (1.0, BatchSource::Student)] {
            for _ in 0..50 {
                let b = draw_batch(&mut st, src, &config(lambda)).unwrap();
                assert_eq!(b.source(), Some(expected));
            }
        }
    }

    #[test]
    fn half_mixing_is_binomial() {
        let (mut st, ctx, data) = state();
        let src = BatchSources { contexts: &ctx, dataset: &data };
        let mut cfg = config(0.5);
        cfg.batch_size = 1;
        let n = 10_000;
        let student = (0..n)
            .filter(|_| draw_batch(&mut st, src, &cfg).unwrap().source() == Some(BatchSource::Student))
            .count();
        assert!((student as f64 / n as f64 - 0.5).abs() <= 0.015);
    }

    #[test]
    fn missing_dataset_is_a_config_error() {
        let (mut st, ctx, _) = state();
        let src = BatchSources { contexts: &ctx, dataset: &[] };
        assert!(matches!(draw_batch(&mut st, src, &config(0.5)), Err(Error::Config(_))));
        assert!(draw_batch(&mut st, src, &config(1.0)).is_ok());
    }

    #[test]
    fn presets_parse_and_apply() {
        for p in Preset::ALL {
            assert_eq!(p.as_str().parse::<Preset>().unwrap(), p);
        }
        let c = Preset::Imitkd.apply(&config(0.0));
        assert_eq!((c.lambda, c.divergence), (0.5, DivergenceSpec::ForwardKl));
        assert!("dagger".parse::<Preset>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(config(0.3).validate().is_ok());
        let mut c = config(1.2);
        assert!(c.validate().is_err());
        c = config(0.5);
        c.teacher_gamma = 0.0;
        assert!(c.validate().is_err());
        c = config(0.5);
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sft_rejects_student_batches() {
        let (mut st, ctx, data) = state();
        let src = BatchSources { contexts: &ctx, dataset: &data };
        let b = draw_batch(&mut st, src, &config(1.0)).unwrap();
        assert!(supervised_ft_step(&mut st, &b, &config(1.0)).is_err());
    }
}
