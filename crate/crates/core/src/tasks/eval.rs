use serde::{Deserialize, Serialize};

use super::Task;
use crate::divergences::{sequence_discrepancy, DivergenceSpec};
use crate::error::{Error, Result};
use crate::policies::{greedy_sequence, sample_sequence, sequence_log_prob, Policy};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Greedy,
    Sample,
}

impl std::str::FromStr for Decode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Decode::Greedy),
            "sample" => Ok(Decode::Sample),
            _ => Err(Error::Config(format!("unknown decode mode {s:?} (expected greedy or sample)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub n_eval: usize,
    pub decode: Decode,
    /// Divergence used for `on_policy_discrepancy`.
    pub divergence: DivergenceSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_eval: usize,
    /// Fraction of decoded outputs satisfying the task predicate.
    pub exact_match: f64,
    /// Mean per-token teacher log-likelihood of student samples.
    pub teacher_loglik: f64,
    /// Mean discrepancy to the teacher (temperature 1) on student samples.
    pub on_policy_discrepancy: f64,
    /// Standard error of `on_policy_discrepancy`.
    pub on_policy_discrepancy_se: f64,
}

/// Evaluates `policy` on `n_eval` contexts drawn from the evaluation stream.
///
/// Each context gets one temperature-1 sample for the likelihood and
/// discrepancy metrics. With greedy decoding the predicate is checked on a
/// separate argmax decode, otherwise on that same sample.
pub fn evaluate_policy(policy: &dyn Policy, task: &Task, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.n_eval == 0 {
        return Err(Error::invalid("n_eval must be at least 1"));
    }
    let mut rng = stream(opts.seed, Stream::Eval);
    let teacher = task.teacher();
    let (mut hits, mut loglik) = (0usize, 0.0);
    let mut disc = Vec::with_capacity(opts.n_eval);
    for _ in 0..opts.n_eval {
        let x = task.sample_context(&mut rng);
        let y = sample_sequence(policy, &x, task.max_len(), 1.0, &mut rng)?;
        let decoded = match opts.decode {
            Decode::Greedy => greedy_sequence(policy, &x, task.max_len())?,
            Decode::Sample => y.clone(),
        };
        if task.is_correct(&x, decoded.tokens()) {
            hits += 1;
        }
        loglik += sequence_log_prob(teacher, &x, y.tokens())? / y.len() as f64;
        disc.push(sequence_discrepancy(&opts.divergence, 1.0, teacher, policy, &x, y.tokens())?.value);
    }
    let n = opts.n_eval as f64;
    let mean = disc.iter().sum::<f64>() / n;
    let se = if opts.n_eval > 1 {
        (disc.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        n_eval: opts.n_eval,
        exact_match: hits as f64 / n,
        teacher_loglik: loglik / n,
        on_policy_discrepancy: mean,
        on_policy_discrepancy_se: se,
    })
}
