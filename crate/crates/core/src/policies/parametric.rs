use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{Logits, Token, Vocab};
use crate::error::{Error, Result};
use crate::policies::{history_window, Context, Policy};

/// Shape of the fixed-window student: each of the last `window` history
/// tokens is embedded (with a learned padding vector), the embeddings are
/// concatenated, passed through one ReLU layer and a linear output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    pub fn num_params(&self, vocab: usize) -> usize {
        Layout::new(vocab, self).total
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    vocab: usize,
    window: usize,
    embed: usize,
    hidden: usize,
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl Layout {
    fn new(vocab: usize, arch: &Architecture) -> Self {
        let input = arch.window * arch.embed_dim;
        let emb = 0;
        let w1 = emb + (vocab + 1) * arch.embed_dim;
        let b1 = w1 + arch.hidden_dim * input;
        let w2 = b1 + arch.hidden_dim;
        let b2 = w2 + vocab * arch.hidden_dim;
        Layout {
            vocab,
            window: arch.window,
            embed: arch.embed_dim,
            hidden: arch.hidden_dim,
            emb,
            w1,
            b1,
            w2,
            b2,
            total: b2 + vocab,
        }
    }

    fn input(&self) -> usize {
        self.window * self.embed
    }

    /// Row of the embedding table for a slot; padding uses the extra last row.
    fn embed_row(&self, slot: Option<Token>) -> usize {
        self.emb + slot.unwrap_or(self.vocab) * self.embed
    }
}

struct Activations {
    slots: Vec<Option<Token>>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

/// The trainable student. `theta` is a flat parameter vector; `grad` is an
/// accumulator of the same shape that [`ParametricPolicy::sgd_step`] consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricPolicy {
    vocab: Vocab,
    arch: Architecture,
    seed: u64,
    theta: Vec<f64>,
    grad: Vec<f64>,
}

impl ParametricPolicy {
    /// Parameters drawn uniformly from [-0.1, 0.1].
    pub fn init<R: Rng + ?Sized>(
        vocab: Vocab,
        arch: Architecture,
        seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        let n = arch.num_params(vocab.size());
        let theta = (0..n).map(|_| rng.gen_range(-0.1..=0.1)).collect();
        Self::from_params(vocab, arch, seed, theta)
    }

    pub fn from_params(vocab: Vocab, arch: Architecture, seed: u64, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let n = arch.num_params(vocab.size());
        if theta.len() != n {
            return Err(Error::invalid(format!(
                "expected {n} parameters for {arch:?}, got {}",
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(ParametricPolicy {
            vocab,
            arch,
            seed,
            grad: vec![0.0; n],
            theta,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// `theta <- theta - lr * grad`, then clears the accumulator.
    pub fn sgd_step(&mut self, lr: f64) {
        for (t, g) in self.theta.iter_mut().zip(self.grad.iter_mut()) {
            *t -= lr * *g;
            *g = 0.0;
        }
    }

    fn layout(&self) -> Layout {
        Layout::new(self.vocab.size(), &self.arch)
    }

    fn forward(&self, x: &Context, prefix: &[Token]) -> Activations {
        let l = self.layout();
        let th = &self.theta;
        let slots = history_window(x, prefix, l.window);
        let mut input = Vec::with_capacity(l.input());
        for s in &slots {
            let r = l.embed_row(*s);
            input.extend_from_slice(&th[r..r + l.embed]);
        }
        let hidden: Vec<f64> = (0..l.hidden)
            .map(|j| {
                let row = &th[l.w1 + j * l.input()..l.w1 + (j + 1) * l.input()];
                let pre = th[l.b1 + j] + row.iter().zip(&input).map(|(w, e)| w * e).sum::<f64>();
                pre.max(0.0)
            })
            .collect();
        let logits = (0..l.vocab)
            .map(|k| {
                let row = &th[l.w2 + k * l.hidden..l.w2 + (k + 1) * l.hidden];
                th[l.b2 + k] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect();
        Activations {
            slots,
            input,
            hidden,
            logits,
        }
    }

    fn backward(&mut self, act: &Activations, g: &[f64]) {
        let l = self.layout();
        let (th, gr) = (&self.theta, &mut self.grad);
        let mut d_hidden = vec![0.0; l.hidden];
        for (k, gk) in g.iter().enumerate() {
            if *gk == 0.0 {
                continue;
            }
            gr[l.b2 + k] += gk;
            for j in 0..l.hidden {
                gr[l.w2 + k * l.hidden + j] += gk * act.hidden[j];
                d_hidden[j] += gk * th[l.w2 + k * l.hidden + j];
            }
        }
        let mut d_input = vec![0.0; l.input()];
        for j in 0..l.hidden {
            let d_pre = if act.hidden[j] > 0.0 { d_hidden[j] } else { 0.0 };
            if d_pre == 0.0 {
                continue;
            }
            gr[l.b1 + j] += d_pre;
            let base = l.w1 + j * l.input();
            for i in 0..l.input() {
                gr[base + i] += d_pre * act.input[i];
                d_input[i] += d_pre * th[base + i];
            }
        }
        for (slot_idx, s) in act.slots.iter().enumerate() {
            let r = l.embed_row(*s);
            for c in 0..l.embed {
                gr[r + c] += d_input[slot_idx * l.embed + c];
            }
        }
    }

    /// Backpropagates one logit-space gradient per position of `y` into the
    /// parameter accumulator: `grad += sum_n J_n^T g_n`. The sampled tokens
    /// are treated as constants.
    pub fn accumulate_param_grads(
        &mut self,
        x: &Context,
        y: &[Token],
        per_token_logit_grads: &[Vec<f64>],
    ) -> Result<()> {
        if per_token_logit_grads.len() != y.len() {
            return Err(Error::invalid(format!(
                "{} logit gradients for a sequence of length {}",
                per_token_logit_grads.len(),
                y.len()
            )));
        }
        let m = self.vocab.size();
        if let Some(g) = per_token_logit_grads.iter().find(|g| g.len() != m) {
            return Err(Error::invalid(format!(
                "logit gradient of length {} for vocab {m}",
                g.len()
            )));
        }
        for (n, g) in per_token_logit_grads.iter().enumerate() {
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let act = self.forward(x, &y[..n]);
            self.backward(&act, g);
        }
        Ok(())
    }
}

impl Policy for ParametricPolicy {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn next_token_logits(&self, x: &Context, prefix: &[Token]) -> Result<Logits> {
        Logits::new(self.forward(x, prefix).logits)
    }
}
