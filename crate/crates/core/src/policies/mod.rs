//! Autoregressive policies: exact tabular teachers and a small parametric
//! student, plus sequence sampling and likelihood.

mod checkpoint;
mod parametric;
mod tabular;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use parametric::{Architecture, ParametricPolicy};
pub use tabular::NGramPolicy;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    log_prob, sample_token, softmax_with_temperature, Logits, Token, TokenDist, Vocab,
};
use crate::error::{Error, Result};

/// The prompt `x` a policy conditions on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Context(Vec<Token>);

impl Context {
    pub fn new(tokens: Vec<Token>, vocab: &Vocab) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("context must be non-empty"));
        }
        if let Some(t) = tokens.iter().find(|t| !vocab.contains(**t)) {
            return Err(Error::invalid(format!("context token {t} outside vocab")));
        }
        Ok(Context(tokens))
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }
}

/// An output `y_1..y_L`, ending at the first EOS or at the length cap.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sequence(Vec<Token>);

impl Sequence {
    pub fn new(tokens: Vec<Token>, vocab: &Vocab, max_len: usize) -> Result<Self> {
        if tokens.is_empty() || tokens.len() > max_len {
            return Err(Error::invalid(format!(
                "sequence length {} outside [1, {max_len}]",
                tokens.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|t| !vocab.contains(**t)) {
            return Err(Error::invalid(format!("sequence token {t} outside vocab")));
        }
        if let Some(i) = tokens.iter().position(|t| *t == vocab.eos()) {
            if i + 1 != tokens.len() {
                return Err(Error::invalid("sequence continues after EOS"));
            }
        }
        Ok(Sequence(tokens))
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ends_with_eos(&self, vocab: &Vocab) -> bool {
        self.0.last() == Some(&vocab.eos())
    }

    /// True when generation stopped, either at EOS or at the cap.
    pub fn terminated(&self, vocab: &Vocab, max_len: usize) -> bool {
        self.ends_with_eos(vocab) || self.0.len() == max_len
    }
}

/// A token-level autoregressive model `p(. | y_<n, x)`.
pub trait Policy: Send + Sync {
    fn vocab(&self) -> Vocab;

    /// Pre-softmax scores for the next token. Tabular policies return their
    /// log-probabilities here.
    fn next_token_logits(&self, x: &Context, prefix: &[Token]) -> Result<Logits>;

    fn next_token_dist(&self, x: &Context, prefix: &[Token], gamma: f64) -> Result<TokenDist> {
        softmax_with_temperature(&self.next_token_logits(x, prefix)?, gamma)
    }
}

/// The last `width` tokens of `x ++ prefix`, left-padded with `None`.
pub fn history_window(x: &Context, prefix: &[Token], width: usize) -> Vec<Option<Token>> {
    let total = x.0.len() + prefix.len();
    (0..width)
        .map(|k| {
            // Slot k holds the token `width - k` positions back.
            let back = width - k;
            if back > total {
                None
            } else {
                let idx = total - back;
                Some(if idx < x.0.len() {
                    x.0[idx]
                } else {
                    prefix[idx - x.0.len()]
                })
            }
        })
        .collect()
}

/// Ancestral sampling at the given temperature, stopping at EOS or `max_len`.
pub fn sample_sequence<R: Rng + ?Sized>(
    policy: &dyn Policy,
    x: &Context,
    max_len: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Sequence> {
    decode(policy, max_len, |prefix| {
        let d = policy.next_token_dist(x, prefix, temperature)?;
        Ok(sample_token(&d, rng))
    })
}

/// Argmax decoding; ties resolve to the lowest token id.
pub fn greedy_sequence(policy: &dyn Policy, x: &Context, max_len: usize) -> Result<Sequence> {
    decode(policy, max_len, |prefix| {
        Ok(policy.next_token_dist(x, prefix, 1.0)?.argmax())
    })
}

fn decode(
    policy: &dyn Policy,
    max_len: usize,
    mut next: impl FnMut(&[Token]) -> Result<Token>,
) -> Result<Sequence> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let eos = policy.vocab().eos();
    let mut tokens = Vec::with_capacity(max_len);
    while tokens.len() < max_len {
        let t = next(&tokens)?;
        tokens.push(t);
        if t == eos {
            break;
        }
    }
    Ok(Sequence(tokens))
}

/// `sum_n ln p(y_n | y_<n, x)` at temperature 1.
pub fn sequence_log_prob(policy: &dyn Policy, x: &Context, y: &[Token]) -> Result<f64> {
    let mut total = 0.0;
    for n in 0..y.len() {
        let d = policy.next_token_dist(x, &y[..n], 1.0)?;
        total += log_prob(&d, y[n])?;
    }
    Ok(total)
}
