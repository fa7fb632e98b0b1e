//! Synthetic tasks with exact teachers, dataset generation and evaluation.
//!
//! Each task has a finite, uniformly weighted set of contexts, an exact
//! teacher policy, a ground-truth generator and a correctness predicate.
//!
//! * `pcfg`: one prompt, outputs from a small grammar whose closing token
//!   depends on the token three positions back.
//! * `modular_add`: `a + b` in base `modulus`, answered with one digit and EOS.
//!   The teacher is right only most of the time.
//! * `noisy_copy`: copy a short symbol string. The teacher occasionally
//!   substitutes a random symbol.

mod dataset;
mod eval;
pub mod grammar;

pub use dataset::{read_dataset, write_dataset, DATASET_FORMAT, DATASET_VERSION};
pub use eval::{evaluate_policy, Decode, EvalOptions, EvalReport};

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{Logits, Token, TokenDist, Vocab};
use crate::error::{Error, Result};
use crate::policies::{sample_sequence, Architecture, Context, NGramPolicy, Policy, Sequence};
use crate::rng::{stream, Stream};
use grammar::{compile_ngram, pcfg_grammar, PcfgTask, PcfgWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Pcfg,
    ModularAdd,
    NoisyCopy,
}

impl TaskName {
    pub const ALL: [TaskName; 3] = [TaskName::Pcfg, TaskName::ModularAdd, TaskName::NoisyCopy];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Pcfg => "pcfg",
            TaskName::ModularAdd => "modular_add",
            TaskName::NoisyCopy => "noisy_copy",
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?} (expected pcfg, modular_add or noisy_copy)")))
    }
}

/// The default pcfg teacher picks its closer from the opener three tokens
/// back, which a window-2 student cannot see. The exact forward-KL floor for
/// such a student (token-averaged, under teacher data) is about 0.07 nats; the
/// fixture guarantees it stays above this value.
pub const PCFG_WINDOW2_FKL_FLOOR: f64 = 0.05;

/// Task parameters. [`TaskSpec::default_for`] gives the shipped fixtures.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSpec {
    Pcfg {
        /// Teacher weight on the `a` opener; the reference grammar uses 1/2.
        teacher_open_a: f64,
        /// Weight of the opener-specific closer over the hedge.
        specific_close: f64,
        /// Mass mixed uniformly into every teacher row.
        smoothing: f64,
    },
    ModularAdd {
        modulus: usize,
        /// Teacher probability on the correct digit.
        accuracy: f64,
        /// Teacher probability on the digit one above the answer.
        slip: f64,
    },
    NoisyCopy {
        symbols: usize,
        copy_len: usize,
        noise: f64,
    },
}

impl TaskSpec {
    pub fn default_for(name: TaskName) -> Self {
        match name {
            TaskName::Pcfg => TaskSpec::Pcfg {
                teacher_open_a: 0.8,
                specific_close: 0.7,
                smoothing: 0.01,
            },
            TaskName::ModularAdd => TaskSpec::ModularAdd {
                modulus: 7,
                accuracy: 0.7,
                slip: 0.2,
            },
            TaskName::NoisyCopy => TaskSpec::NoisyCopy {
                symbols: 4,
                copy_len: 3,
                noise: 0.1,
            },
        }
    }

    pub fn name(&self) -> TaskName {
        match self {
            TaskSpec::Pcfg { .. } => TaskName::Pcfg,
            TaskSpec::ModularAdd { .. } => TaskName::ModularAdd,
            TaskSpec::NoisyCopy { .. } => TaskName::NoisyCopy,
        }
    }
}

enum Kind {
    Pcfg(PcfgTask),
    ModularAdd { modulus: usize, plus: Token },
    NoisyCopy { copy_len: usize },
}

/// A fully built task: vocab, contexts, exact teacher and predicate.
pub struct Task {
    spec: TaskSpec,
    vocab: Vocab,
    max_len: usize,
    contexts: Vec<Context>,
    teacher: Arc<dyn Policy>,
    student_arch: Architecture,
    kind: Kind,
}

impl fmt::Debug for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Task")
            .field("spec", &self.spec)
            .field("vocab", &self.vocab)
            .field("max_len", &self.max_len)
            .finish_non_exhaustive()
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("{name} = {p} outside [0,1]")));
    }
    Ok(())
}

impl Task {
    pub fn named(name: TaskName) -> Result<Self> {
        Task::new(TaskSpec::default_for(name))
    }

    pub fn new(spec: TaskSpec) -> Result<Self> {
        match spec {
            TaskSpec::Pcfg { teacher_open_a, specific_close, smoothing } => {
                Self::pcfg(spec.clone(), teacher_open_a, specific_close, smoothing)
            }
            TaskSpec::ModularAdd { modulus, accuracy, slip } => {
                Self::modular_add(spec.clone(), modulus, accuracy, slip)
            }
            TaskSpec::NoisyCopy { symbols, copy_len, noise } => {
                Self::noisy_copy(spec.clone(), symbols, copy_len, noise)
            }
        }
    }

    fn pcfg(spec: TaskSpec, open_a: f64, specific: f64, smoothing: f64) -> Result<Self> {
        use grammar::tokens::*;
        for (n, p) in [("teacher_open_a", open_a), ("specific_close", specific)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::invalid(format!("{n} = {p} must lie strictly inside (0,1)")));
            }
        }
        let vocab = Vocab::new(VOCAB, EOS)?;
        let x = Context::new(vec![PROMPT], &vocab)?;
        let max_terminals = 4;
        let teacher_grammar = pcfg_grammar(PcfgWeights { open_a, specific_close: specific })?;
        let teacher = compile_ngram(&teacher_grammar, vocab, &x, 3, max_terminals, smoothing)?;
        let reference = pcfg_grammar(PcfgWeights { open_a: 0.5, specific_close: 0.5 })?;
        let language = reference
            .language(max_terminals)?
            .into_iter()
            .map(|(mut s, _)| {
                s.push(EOS);
                s
            })
            .collect::<HashSet<_>>();
        Ok(Task {
            spec,
            vocab,
            max_len: max_terminals + 2,
            contexts: vec![x],
            teacher: Arc::new(teacher),
            student_arch: Architecture { window: 2, embed_dim: 8, hidden_dim: 32 },
            kind: Kind::Pcfg(PcfgTask { reference, language }),
        })
    }

    fn modular_add(spec: TaskSpec, modulus: usize, accuracy: f64, slip: f64) -> Result<Self> {
        if modulus < 2 {
            return Err(Error::invalid("modulus must be at least 2"));
        }
        check_prob("accuracy", accuracy)?;
        check_prob("slip", slip)?;
        if accuracy + slip > 1.0 {
            return Err(Error::invalid("accuracy + slip must not exceed 1"));
        }
        let (eos, plus) = (0, modulus + 1);
        let vocab = Vocab::new(modulus + 2, eos)?;
        let digit = |d: usize| d + 1;
        let m = vocab.size();
        let stop = {
            let mut r = vec![0.02 / m as f64; m];
            r[eos] += 0.98;
            TokenDist::from_probs(r)?
        };
        let mut teacher = NGramPolicy::new(vocab, 3, stop.clone())?;
        let mut contexts = Vec::with_capacity(modulus * modulus);
        for a in 0..modulus {
            for b in 0..modulus {
                let c = (a + b) % modulus;
                let mut row = vec![0.0; m];
                for d in 0..modulus {
                    row[digit(d)] = (1.0 - accuracy - slip) / modulus as f64;
                }
                row[digit(c)] += accuracy;
                row[digit((c + 1) % modulus)] += slip;
                teacher.set_row(
                    vec![Some(digit(a)), Some(plus), Some(digit(b))],
                    TokenDist::from_probs(row)?,
                )?;
                contexts.push(Context::new(vec![digit(a), plus, digit(b)], &vocab)?);
            }
        }
        Ok(Task {
            spec,
            vocab,
            max_len: 3,
            contexts,
            teacher: Arc::new(teacher),
            student_arch: Architecture { window: 3, embed_dim: 8, hidden_dim: 32 },
            kind: Kind::ModularAdd { modulus, plus },
        })
    }

    fn noisy_copy(spec: TaskSpec, symbols: usize, copy_len: usize, noise: f64) -> Result<Self> {
        if symbols < 2 || copy_len < 1 {
            return Err(Error::invalid("noisy_copy needs at least 2 symbols and copy_len >= 1"));
        }
        check_prob("noise", noise)?;
        let vocab = Vocab::new(symbols + 2, 0)?;
        let sep = 1;
        let mut contexts = Vec::new();
        let count = symbols.pow(copy_len as u32);
        for mut code in 0..count {
            let mut tokens = Vec::with_capacity(copy_len + 1);
            for _ in 0..copy_len {
                tokens.push(2 + code % symbols);
                code /= symbols;
            }
            tokens.push(sep);
            contexts.push(Context::new(tokens, &vocab)?);
        }
        Ok(Task {
            spec,
            vocab,
            max_len: copy_len + 1,
            contexts,
            teacher: Arc::new(CopyTeacher { vocab, copy_len, noise }),
            student_arch: Architecture { window: copy_len + 1, embed_dim: 8, hidden_dim: 32 },
            kind: Kind::NoisyCopy { copy_len },
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn name(&self) -> TaskName {
        self.spec.name()
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn teacher(&self) -> &dyn Policy {
        self.teacher.as_ref()
    }

    pub fn teacher_arc(&self) -> Arc<dyn Policy> {
        Arc::clone(&self.teacher)
    }

    /// The default student shape. For `pcfg` its window is one short of what
    /// the teacher needs.
    pub fn student_architecture(&self) -> Architecture {
        self.student_arch
    }

    pub fn contexts(&self) -> &[Context] {
        &self.contexts
    }

    /// Contexts with their (uniform) sampling weights, as the oracle expects.
    pub fn weighted_contexts(&self) -> Vec<(Context, f64)> {
        let w = 1.0 / self.contexts.len() as f64;
        self.contexts.iter().map(|c| (c.clone(), w)).collect()
    }

    pub fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> Context {
        self.contexts[rng.gen_range(0..self.contexts.len())].clone()
    }

    pub fn ground_truth<R: Rng + ?Sized>(&self, x: &Context, rng: &mut R) -> Result<Sequence> {
        let t = x.tokens();
        match &self.kind {
            Kind::Pcfg(p) => p.ground_truth(&self.vocab, rng, self.max_len),
            Kind::ModularAdd { modulus, .. } => {
                let (a, b) = (t[0] - 1, t[2] - 1);
                Sequence::new(vec![(a + b) % modulus + 1, self.vocab.eos()], &self.vocab, self.max_len)
            }
            Kind::NoisyCopy { copy_len } => {
                let mut y = t[..*copy_len].to_vec();
                y.push(self.vocab.eos());
                Sequence::new(y, &self.vocab, self.max_len)
            }
        }
    }

    /// The task's deterministic correctness predicate.
    pub fn is_correct(&self, x: &Context, y: &[Token]) -> bool {
        let t = x.tokens();
        match &self.kind {
            Kind::Pcfg(p) => p.is_correct(y),
            Kind::ModularAdd { modulus, plus } => {
                if t.len() != 3 || t[1] != *plus {
                    return false;
                }
                let c = (t[0] - 1 + t[2] - 1) % modulus + 1;
                y == [c, self.vocab.eos()]
            }
            Kind::NoisyCopy { copy_len } => {
                y.len() == copy_len + 1 && y[..*copy_len] == t[..*copy_len] && y[*copy_len] == self.vocab.eos()
            }
        }
    }

    /// Reward for RL fine-tuning: 1 when the output satisfies the predicate.
    pub fn reward(&self, x: &Context, y: &[Token]) -> f64 {
        if self.is_correct(x, y) {
            1.0
        } else {
            0.0
        }
    }

    /// Validates that a context/output pair fits this task's vocab and length.
    pub fn check_example(&self, x: &[Token], y: &[Token]) -> Result<(Context, Sequence)> {
        let x = Context::new(x.to_vec(), &self.vocab)?;
        let y = Sequence::new(y.to_vec(), &self.vocab, self.max_len)?;
        Ok((x, y))
    }
}

/// Copies the symbol at the current position with probability `1 - noise`,
/// otherwise emits a uniform symbol; stops with EOS after `copy_len` tokens
/// (again up to noise).
struct CopyTeacher {
    vocab: Vocab,
    copy_len: usize,
    noise: f64,
}

impl CopyTeacher {
    fn row(&self, x: &Context, prefix: &[Token]) -> Result<TokenDist> {
        let m = self.vocab.size();
        let symbols = m - 2;
        let mut row = vec![0.0; m];
        for r in row.iter_mut().skip(2) {
            *r = self.noise / symbols as f64;
        }
        let n = prefix.len();
        let target = if n < self.copy_len { x.tokens()[n] } else { self.vocab.eos() };
        row[target] += 1.0 - self.noise;
        TokenDist::from_probs(row)
    }
}

impl Policy for CopyTeacher {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn next_token_logits(&self, x: &Context, prefix: &[Token]) -> Result<Logits> {
        Logits::new(self.row(x, prefix)?.log_probs().to_vec())
    }

    fn next_token_dist(&self, x: &Context, prefix: &[Token], gamma: f64) -> Result<TokenDist> {
        if gamma == 1.0 {
            return self.row(x, prefix);
        }
        crate::distributions::softmax_with_temperature(&self.next_token_logits(x, prefix)?, gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    GroundTruth,
    TeacherSamples,
}

impl DataSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DataSource::GroundTruth => "ground_truth",
            DataSource::TeacherSamples => "teacher_samples",
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground_truth" => Ok(DataSource::GroundTruth),
            "teacher_samples" | "teacher" => Ok(DataSource::TeacherSamples),
            _ => Err(Error::Config(format!(
                "unknown data source {s:?} (expected ground_truth or teacher_samples)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub context: Context,
    pub output: Sequence,
}

/// A fixed set of (context, output) pairs with provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub task: TaskName,
    pub source: DataSource,
    pub seed: u64,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Draws `n` contexts uniformly and pairs each with a ground-truth output or
/// a temperature-1 teacher sample. Deterministic in `seed`.
pub fn generate_dataset(task: &Task, source: DataSource, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = stream(seed, Stream::Generate);
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let context = task.sample_context(&mut rng);
        let output = match source {
            DataSource::GroundTruth => task.ground_truth(&context, &mut rng)?,
            DataSource::TeacherSamples => {
                sample_sequence(task.teacher(), &context, task.max_len(), 1.0, &mut rng)?
            }
        };
        examples.push(Example { context, output });
    }
    Ok(Dataset { task: task.name(), source, seed, examples })
}
