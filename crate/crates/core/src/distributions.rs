//! Categorical token distributions, temperature softmax and seeded sampling.
//!
//! Every [`TokenDist`] carries a strictly positive floor on each entry so that
//! all log-probabilities, and therefore every KL term, stay finite. The floor
//! is applied as an affine mix `q = floor + (1 - M * floor) * p`, which keeps
//! the map from logits to probabilities smooth and exactly normalized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = usize;

/// Smallest probability any token may carry.
pub const PROB_FLOOR: f64 = 1e-12;
pub const GAMMA_MIN: f64 = 1e-3;
pub const GAMMA_MAX: f64 = 100.0;

/// Tolerance used when validating that user-provided rows sum to one.
const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    eos: Token,
}

impl Vocab {
    pub fn new(size: usize, eos: Token) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid(format!("vocab size must be >= 2, got {size}")));
        }
        if eos >= size {
            return Err(Error::invalid(format!("eos id {eos} out of range for vocab {size}")));
        }
        Ok(Vocab { size, eos })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn contains(&self, t: Token) -> bool {
        t < self.size
    }
}

/// Unnormalized next-token scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("logits must be non-empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite logit at index {i}: {}", values[i])));
        }
        Ok(Logits(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A floored categorical distribution with cached log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl TokenDist {
    /// Builds a distribution from nonnegative weights that already sum to one
    /// (within 1e-9). Zero entries are lifted to the floor.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid("a token distribution needs at least 2 entries"));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid(format!("invalid probability at index {i}: {}", probs[i])));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self::floored(probs.into_iter().map(|p| p / total).collect()))
    }

    pub fn uniform(size: usize) -> Self {
        Self::floored(vec![1.0 / size as f64; size])
    }

    /// `raw` must already be normalized.
    fn floored(raw: Vec<f64>) -> Self {
        let scale = 1.0 - raw.len() as f64 * PROB_FLOOR;
        let probs: Vec<f64> = raw.into_iter().map(|p| PROB_FLOOR + scale * p).collect();
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        TokenDist { probs, log_probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the most probable token; ties go to the lowest index.
    pub fn argmax(&self) -> Token {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Maps a gradient with respect to the probabilities of this distribution
    /// into a gradient with respect to the logits that produced it.
    ///
    /// With `q = floor + c * softmax(z)` the chain rule gives
    /// `dL/dz_j = (q_j - floor) * (g_j - sum_i (q_i - floor) g_i / c)`.
    pub fn logit_grad(&self, prob_grad: &[f64]) -> Vec<f64> {
        debug_assert_eq!(prob_grad.len(), self.probs.len());
        let c = 1.0 - self.probs.len() as f64 * PROB_FLOOR;
        let mean: f64 = self
            .probs
            .iter()
            .zip(prob_grad)
            .map(|(q, g)| (q - PROB_FLOOR) * g)
            .sum::<f64>()
            / c;
        self.probs
            .iter()
            .zip(prob_grad)
            .map(|(q, g)| (q - PROB_FLOOR) * (g - mean))
            .collect()
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(Error::invalid(format!("temperature must be positive, got {gamma}")));
    }
    if !(GAMMA_MIN..=GAMMA_MAX).contains(&gamma) {
        return Err(Error::invalid(format!(
            "temperature {gamma} outside supported range [{GAMMA_MIN}, {GAMMA_MAX}]"
        )));
    }
    Ok(())
}

/// `p_v = exp(z_v / gamma) / sum_i exp(z_i / gamma)`, floored.
pub fn softmax_with_temperature(z: &Logits, gamma: f64) -> Result<TokenDist> {
    check_gamma(gamma)?;
    let scaled: Vec<f64> = z.values().iter().map(|v| v / gamma).collect();
    if scaled.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits overflow after temperature scaling"));
    }
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(TokenDist::floored(exps.into_iter().map(|e| e / total).collect()))
}

/// Inverse-CDF draw.
pub fn sample_token<R: Rng + ?Sized>(d: &TokenDist, rng: &mut R) -> Token {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in d.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    d.probs.len() - 1
}

pub fn log_prob(d: &TokenDist, v: Token) -> Result<f64> {
    d.log_probs
        .get(v)
        .copied()
        .ok_or_else(|| Error::invalid(format!("token {v} out of range for vocab {}", d.len())))
}
