//! Token-level divergences between a teacher distribution and a student
//! softmax, with exact gradients with respect to the student logits, and the
//! length-normalized sequence discrepancy built from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{softmax_with_temperature, Logits, TokenDist, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::policies::{Context, Policy};

/// Which member of the KL family to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DivergenceSpec {
    ForwardKl,
    ReverseKl,
    /// Generalized Jensen-Shannon with mixture weight `beta` on the teacher.
    Jsd { beta: f64 },
}

impl DivergenceSpec {
    pub fn jsd(beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(DivergenceSpec::Jsd { beta })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DivergenceSpec::Jsd { beta } => check_beta(beta),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DivergenceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DivergenceSpec::ForwardKl => f.write_str("forward_kl"),
            DivergenceSpec::ReverseKl => f.write_str("reverse_kl"),
            DivergenceSpec::Jsd { beta } => write!(f, "jsd({beta})"),
        }
    }
}

impl FromStr for DivergenceSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "forward_kl" | "fkl" | "forward-kl" => return Ok(DivergenceSpec::ForwardKl),
            "reverse_kl" | "rkl" | "reverse-kl" => return Ok(DivergenceSpec::ReverseKl),
            _ => {}
        }
        let beta = t
            .strip_prefix("jsd(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| t.strip_prefix("jsd:"))
            .ok_or_else(|| Error::invalid(format!("unknown divergence '{s}'")))?;
        let beta: f64 = beta
            .parse()
            .map_err(|_| Error::invalid(format!("bad JSD coefficient in '{s}'")))?;
        DivergenceSpec::jsd(beta)
    }
}

impl TryFrom<String> for DivergenceSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DivergenceSpec> for String {
    fn from(d: DivergenceSpec) -> String {
        d.to_string()
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("JSD coefficient must lie in (0,1), got {beta}")))
    }
}

fn check_same_vocab(p: &TokenDist, q: &TokenDist) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "distributions over different vocabularies ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// `sum_c P(c) ln(P(c) / Q(c))`, in nats.
pub fn forward_kl(p: &TokenDist, q: &TokenDist) -> Result<f64> {
    check_same_vocab(p, q)?;
    Ok(kl_unchecked(p, q))
}

fn kl_unchecked(p: &TokenDist, q: &TokenDist) -> f64 {
    p.probs()
        .iter()
        .zip(p.log_probs())
        .zip(q.log_probs())
        .map(|((pc, lp), lq)| pc * (lp - lq))
        .sum::<f64>()
        .max(0.0)
}

/// `KL(Q || P)`.
pub fn reverse_kl(p: &TokenDist, q: &TokenDist) -> Result<f64> {
    forward_kl(q, p)
}

fn mixture_log(beta: f64, p: &TokenDist, q: &TokenDist) -> Vec<f64> {
    p.probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| (beta * a + (1.0 - beta) * b).max(PROB_FLOOR).ln())
        .collect()
}

/// `beta KL(P || M) + (1 - beta) KL(Q || M)` with `M = beta P + (1 - beta) Q`.
pub fn generalized_jsd(beta: f64, p: &TokenDist, q: &TokenDist) -> Result<f64> {
    check_beta(beta)?;
    check_same_vocab(p, q)?;
    let log_m = mixture_log(beta, p, q);
    Ok(jsd_with_mixture(beta, p, q, &log_m))
}

fn jsd_with_mixture(beta: f64, p: &TokenDist, q: &TokenDist, log_m: &[f64]) -> f64 {
    let term = |d: &TokenDist| -> f64 {
        d.probs()
            .iter()
            .zip(d.log_probs())
            .zip(log_m)
            .map(|((pc, lp), lm)| pc * (lp - lm))
            .sum()
    };
    (beta * term(p) + (1.0 - beta) * term(q)).max(0.0)
}

/// Divergence value with its gradient in student-logit space.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDivergence {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Evaluates `D(p_teacher || softmax(student_logits))` and its exact gradient
/// with respect to each student logit.
pub fn divergence(
    spec: &DivergenceSpec,
    p_teacher: &TokenDist,
    student_logits: &Logits,
) -> Result<TokenDivergence> {
    let q = softmax_with_temperature(student_logits, 1.0)?;
    divergence_against(spec, p_teacher, &q)
}

/// Same as [`divergence`] for a student distribution that is already known to
/// be the softmax of some logits.
pub fn divergence_against(
    spec: &DivergenceSpec,
    p: &TokenDist,
    q: &TokenDist,
) -> Result<TokenDivergence> {
    spec.validate()?;
    check_same_vocab(p, q)?;
    // Forward KL uses the closed form `q - p`. The floored chain rule would
    // add a term of order floor * p / q, which only matters for q near the
    // floor, and the closed form is the textbook softmax cross-entropy
    // gradient.
    if let DivergenceSpec::ForwardKl = spec {
        return Ok(TokenDivergence {
            value: kl_unchecked(p, q),
            grad: q.probs().iter().zip(p.probs()).map(|(a, b)| a - b).collect(),
        });
    }
    // Gradient with respect to the student probabilities, then chained
    // through the floored softmax.
    let (value, prob_grad): (f64, Vec<f64>) = match *spec {
        DivergenceSpec::ForwardKl => unreachable!(),
        DivergenceSpec::ReverseKl => {
            let g = q
                .log_probs()
                .iter()
                .zip(p.log_probs())
                .map(|(lq, lp)| lq + 1.0 - lp)
                .collect();
            (kl_unchecked(q, p), g)
        }
        DivergenceSpec::Jsd { beta } => {
            let log_m = mixture_log(beta, p, q);
            let g = q
                .log_probs()
                .iter()
                .zip(&log_m)
                .map(|(lq, lm)| (1.0 - beta) * (lq - lm))
                .collect();
            (jsd_with_mixture(beta, p, q, &log_m), g)
        }
    };
    Ok(TokenDivergence {
        value,
        grad: q.logit_grad(&prob_grad),
    })
}

/// Length-normalized discrepancy of one sequence, with per-position logit
/// gradients already scaled by `1 / L`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDiscrepancy {
    pub value: f64,
    pub per_token_grads: Vec<Vec<f64>>,
}

/// `(1/L) sum_n D(p_T(.|y_<n, x) || p_S(.|y_<n, x))` over every position of
/// `y`, including a terminal EOS. The teacher is read at temperature
/// `teacher_gamma`; the student always at temperature 1.
pub fn sequence_discrepancy(
    spec: &DivergenceSpec,
    teacher_gamma: f64,
    teacher: &dyn Policy,
    student: &dyn Policy,
    x: &Context,
    y: &[usize],
) -> Result<SequenceDiscrepancy> {
    if y.is_empty() {
        return Err(Error::invalid("sequence discrepancy of an empty sequence"));
    }
    let scale = 1.0 / y.len() as f64;
    let mut value = 0.0;
    let mut per_token_grads = Vec::with_capacity(y.len());
    for n in 0..y.len() {
        let prefix = &y[..n];
        let p = softmax_with_temperature(&teacher.next_token_logits(x, prefix)?, teacher_gamma)?;
        let d = divergence(spec, &p, &student.next_token_logits(x, prefix)?)?;
        value += d.value;
        per_token_grads.push(d.grad.into_iter().map(|g| g * scale).collect());
    }
    Ok(SequenceDiscrepancy {
        value: value * scale,
        per_token_grads,
    })
}
