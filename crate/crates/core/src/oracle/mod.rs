//! Exact brute-force counterparts of every expectation the trainer estimates
//! by sampling. Everything here walks the full tree of output sequences, so it
//! is only usable on tiny vocabularies and short lengths.

mod mode_seeking;

pub use mode_seeking::{
    discretized_mixture, grid, mode_seeking_demo, write_trace_csv, DemoConfig, DemoResult,
    TracePoint, GRID_MAX, GRID_MIN, GRID_POINTS,
};

use std::collections::{BTreeMap, HashMap};

use crate::distributions::{softmax_with_temperature, Token, TokenDist};
use crate::divergences::{divergence, forward_kl, sequence_discrepancy, DivergenceSpec};
use crate::error::{Error, Result};
use crate::policies::{history_window, sample_sequence, Context, Policy, Sequence};
use crate::rng::{stream, Stream};

/// Upper bound on `M^max_len` accepted by the enumerator.
pub const ENUMERATION_GUARD: f64 = 1e6;

/// Every sequence a policy can emit for one context, with its exact
/// probability. Sequences that hit the length cap without EOS are included as
/// terminated.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedDistribution {
    entries: Vec<(Sequence, f64)>,
}

impl EnumeratedDistribution {
    pub fn entries(&self) -> &[(Sequence, f64)] {
        &self.entries
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }

    pub fn probability(&self, y: &[Token]) -> f64 {
        self.entries
            .iter()
            .find(|(s, _)| s.tokens() == y)
            .map_or(0.0, |(_, p)| *p)
    }

    /// `alpha * a + (1 - alpha) * b` as a distribution over sequences.
    pub fn mixture(alpha: f64, a: &Self, b: &Self) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("mixture weight {alpha} outside [0,1]")));
        }
        let mut merged: BTreeMap<Sequence, f64> = BTreeMap::new();
        for (s, p) in &a.entries {
            *merged.entry(s.clone()).or_default() += alpha * p;
        }
        for (s, p) in &b.entries {
            *merged.entry(s.clone()).or_default() += (1.0 - alpha) * p;
        }
        Ok(EnumeratedDistribution {
            entries: merged.into_iter().collect(),
        })
    }

    pub fn expectation(&self, mut f: impl FnMut(&Sequence) -> Result<f64>) -> Result<f64> {
        let mut total = 0.0;
        for (s, p) in &self.entries {
            total += p * f(s)?;
        }
        Ok(total)
    }
}

fn check_guard(vocab: usize, max_len: usize) -> Result<()> {
    let size = (vocab as f64).powi(max_len as i32);
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    if size > ENUMERATION_GUARD {
        return Err(Error::Capacity(format!(
            "enumerating {vocab}^{max_len} = {size:.3e} sequences exceeds the guard of {ENUMERATION_GUARD:.0e}"
        )));
    }
    Ok(())
}

/// Depth-first expansion of the sequence tree under `policy` at temperature 1.
pub fn enumerate_sequences(
    policy: &dyn Policy,
    x: &Context,
    max_len: usize,
) -> Result<EnumeratedDistribution> {
    let vocab = policy.vocab();
    check_guard(vocab.size(), max_len)?;
    let mut entries = Vec::new();
    let mut stack: Vec<(Vec<Token>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((prefix, mass)) = stack.pop() {
        let d = policy.next_token_dist(x, &prefix, 1.0)?;
        for (v, p) in d.probs().iter().enumerate().rev() {
            let mut tokens = prefix.clone();
            tokens.push(v);
            let m = mass * p;
            if v == vocab.eos() || tokens.len() == max_len {
                entries.push((Sequence::new(tokens, &vocab, max_len)?, m));
            } else {
                stack.push((tokens, m));
            }
        }
    }
    Ok(EnumeratedDistribution { entries })
}

/// Which distribution over outputs an expectation is taken under.
#[derive(Clone, Copy)]
pub enum Sampling<'a> {
    /// Outputs drawn from the teacher at temperature 1 (a teacher-generated
    /// dataset).
    TeacherData,
    /// Outputs drawn from the student itself (on-policy).
    Student,
    /// Any other fixed output distribution.
    Other(&'a dyn Policy),
}

/// Everything needed to evaluate the per-sequence discrepancy.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub divergence: DivergenceSpec,
    pub teacher_gamma: f64,
    pub teacher: &'a dyn Policy,
    pub student: &'a dyn Policy,
}

impl Objective<'_> {
    pub fn discrepancy(&self, x: &Context, y: &[Token]) -> Result<f64> {
        Ok(sequence_discrepancy(
            &self.divergence,
            self.teacher_gamma,
            self.teacher,
            self.student,
            x,
            y,
        )?
        .value)
    }

    /// `sum_y pi(y|x) D(p_T || p_S)(y|x)` with `pi` given explicitly.
    pub fn expected_under(&self, x: &Context, dist: &EnumeratedDistribution) -> Result<f64> {
        dist.expectation(|y| self.discrepancy(x, y.tokens()))
    }
}

/// One expectation term of the distillation objective, computed exactly.
///
/// Walks the output tree once, carrying the running sum of per-position
/// divergences, so each prefix is scored a single time rather than once per
/// sequence that extends it.
pub fn exact_expected_discrepancy(
    objective: &Objective<'_>,
    x: &Context,
    max_len: usize,
    sampling: Sampling<'_>,
) -> Result<f64> {
    let vocab = objective.student.vocab();
    check_guard(vocab.size(), max_len)?;
    let mut total = 0.0;
    let mut stack: Vec<(Vec<Token>, f64, f64)> = vec![(Vec::new(), 1.0, 0.0)];
    while let Some((prefix, mass, sum_d)) = stack.pop() {
        let p = softmax_with_temperature(
            &objective.teacher.next_token_logits(x, &prefix)?,
            objective.teacher_gamma,
        )?;
        let z = objective.student.next_token_logits(x, &prefix)?;
        let sum_d = sum_d + divergence(&objective.divergence, &p, &z)?.value;
        let pi = match sampling {
            Sampling::TeacherData => objective.teacher.next_token_dist(x, &prefix, 1.0)?,
            Sampling::Student => softmax_with_temperature(&z, 1.0)?,
            Sampling::Other(policy) => policy.next_token_dist(x, &prefix, 1.0)?,
        };
        let len = prefix.len() + 1;
        for (v, pv) in pi.probs().iter().enumerate() {
            let m = mass * pv;
            if v == vocab.eos() || len == max_len {
                total += m * sum_d / len as f64;
            } else {
                let mut next = prefix.clone();
                next.push(v);
                stack.push((next, m, sum_d));
            }
        }
    }
    Ok(total)
}

/// Average of [`exact_expected_discrepancy`] over a weighted set of contexts.
pub fn exact_objective_term(
    objective: &Objective<'_>,
    contexts: &[(Context, f64)],
    max_len: usize,
    sampling: Sampling<'_>,
) -> Result<f64> {
    let total_w: f64 = contexts.iter().map(|(_, w)| w).sum();
    if contexts.is_empty() || total_w <= 0.0 {
        return Err(Error::invalid("context weights must be non-empty and positive"));
    }
    let mut acc = 0.0;
    for (x, w) in contexts {
        acc += w * exact_expected_discrepancy(objective, x, max_len, sampling)?;
    }
    Ok(acc / total_w)
}

/// Lower bound on the token-averaged forward KL, under teacher data, that any
/// student reading only the last `window` history tokens can reach.
///
/// For each window state the best such student predicts the occurrence-
/// weighted average of the teacher conditionals that share it; the bound is
/// the weighted KL of every teacher conditional to that average.
pub fn window_forward_kl_floor(
    teacher: &dyn Policy,
    contexts: &[(Context, f64)],
    max_len: usize,
    window: usize,
) -> Result<f64> {
    let total_w: f64 = contexts.iter().map(|(_, w)| w).sum();
    let mut groups: HashMap<Vec<Option<Token>>, Vec<(f64, TokenDist)>> = HashMap::new();
    for (x, w) in contexts {
        let dist = enumerate_sequences(teacher, x, max_len)?;
        for (y, p) in dist.entries() {
            let weight = w / total_w * p / y.len() as f64;
            for n in 0..y.len() {
                let prefix = &y.tokens()[..n];
                groups
                    .entry(history_window(x, prefix, window))
                    .or_default()
                    .push((weight, teacher.next_token_dist(x, prefix, 1.0)?));
            }
        }
    }
    let m = teacher.vocab().size();
    let mut floor = 0.0;
    for occurrences in groups.values() {
        let mass: f64 = occurrences.iter().map(|(w, _)| w).sum();
        if mass <= 0.0 {
            continue;
        }
        let mut avg = vec![0.0; m];
        for (w, d) in occurrences {
            for (a, p) in avg.iter_mut().zip(d.probs()) {
                *a += w / mass * p;
            }
        }
        let total: f64 = avg.iter().sum();
        let avg = TokenDist::from_probs(avg.into_iter().map(|a| a / total).collect())?;
        for (w, d) in occurrences {
            floor += w * forward_kl(d, &avg)?;
        }
    }
    Ok(floor)
}

/// A sampled estimate of one objective term set against its exact value.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MonteCarloCheck {
    pub exact: f64,
    pub sampled: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl MonteCarloCheck {
    pub fn gap(&self) -> f64 {
        (self.sampled - self.exact).abs()
    }

    /// Whether the gap is at most `k` standard errors. A zero-variance
    /// estimate has to agree to 1e-12.
    pub fn within(&self, k: f64) -> bool {
        self.gap() <= (k * self.std_error).max(1e-12)
    }
}

/// Monte Carlo estimate of [`exact_objective_term`]: draws a context by
/// weight, then an output from the sampling policy at temperature 1, and
/// averages the discrepancy. Returns `(mean, standard error)`.
///
/// Draws come from the sampling stream of `seed`.
pub fn sampled_objective_term(
    objective: &Objective<'_>,
    contexts: &[(Context, f64)],
    max_len: usize,
    sampling: Sampling<'_>,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    use rand::distributions::{Distribution, WeightedIndex};
    if samples < 2 {
        return Err(Error::invalid("need at least two samples for a standard error"));
    }
    let pick = WeightedIndex::new(contexts.iter().map(|(_, w)| *w))
        .map_err(|e| Error::invalid(format!("context weights: {e}")))?;
    let sampler: &dyn Policy = match sampling {
        Sampling::TeacherData => objective.teacher,
        Sampling::Student => objective.student,
        Sampling::Other(p) => p,
    };
    let mut rng = stream(seed, Stream::Sampling);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let x = &contexts[pick.sample(&mut rng)].0;
        let y = sample_sequence(sampler, x, max_len, 1.0, &mut rng)?;
        let d = objective.discrepancy(x, y.tokens())?;
        sum += d;
        sum_sq += d * d;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Runs [`exact_objective_term`] and [`sampled_objective_term`] on the same
/// objective.
pub fn monte_carlo_check(
    objective: &Objective<'_>,
    contexts: &[(Context, f64)],
    max_len: usize,
    sampling: Sampling<'_>,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloCheck> {
    let exact = exact_objective_term(objective, contexts, max_len, sampling)?;
    let (sampled, std_error) = sampled_objective_term(objective, contexts, max_len, sampling, samples, seed)?;
    Ok(MonteCarloCheck {
        exact,
        sampled,
        std_error,
        samples,
    })
}
