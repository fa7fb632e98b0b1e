use std::collections::HashMap;

use crate::distributions::{Logits, Token, TokenDist, Vocab};
use crate::error::{Error, Result};
use crate::policies::{history_window, Context, Policy};

/// Exact n-gram policy: the next-token distribution is a table lookup on the
/// last `window` tokens of `x ++ y_<n` (left-padded). Histories without an
/// explicit row fall back to `default_row`.
#[derive(Debug, Clone)]
pub struct NGramPolicy {
    vocab: Vocab,
    window: usize,
    rows: HashMap<Vec<Option<Token>>, TokenDist>,
    default_row: TokenDist,
}

impl NGramPolicy {
    pub fn new(vocab: Vocab, window: usize, default_row: TokenDist) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("n-gram window must be at least 1"));
        }
        if default_row.len() != vocab.size() {
            return Err(Error::invalid("default row size does not match vocab"));
        }
        Ok(NGramPolicy {
            vocab,
            window,
            rows: HashMap::new(),
            default_row,
        })
    }

    pub fn set_row(&mut self, history: Vec<Option<Token>>, row: TokenDist) -> Result<()> {
        if history.len() != self.window {
            return Err(Error::invalid(format!(
                "history of length {} for window {}",
                history.len(),
                self.window
            )));
        }
        if history.iter().flatten().any(|t| !self.vocab.contains(*t)) {
            return Err(Error::invalid("history token outside vocab"));
        }
        if row.len() != self.vocab.size() {
            return Err(Error::invalid("row size does not match vocab"));
        }
        self.rows.insert(history, row);
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn row(&self, x: &Context, prefix: &[Token]) -> &TokenDist {
        let key = history_window(x, prefix, self.window);
        self.rows.get(&key).unwrap_or(&self.default_row)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Vec<Option<Token>>, &TokenDist)> {
        self.rows.iter()
    }
}

impl Policy for NGramPolicy {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn next_token_logits(&self, x: &Context, prefix: &[Token]) -> Result<Logits> {
        Logits::new(self.row(x, prefix).log_probs().to_vec())
    }

    fn next_token_dist(&self, x: &Context, prefix: &[Token], gamma: f64) -> Result<TokenDist> {
        if gamma == 1.0 {
            // Re-flooring an already floored row would shift it by ~1e-12.
            return Ok(self.row(x, prefix).clone());
        }
        crate::distributions::softmax_with_temperature(&self.next_token_logits(x, prefix)?, gamma)
    }
}
