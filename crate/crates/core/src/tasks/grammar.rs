//! A finite probabilistic context-free grammar, and the `pcfg` task built on
//! it.
//!
//! The task's teacher is the grammar compiled into an exact window-3 n-gram
//! table: the token after the two filler symbols depends on the opener three
//! positions back, so any student that sees only two tokens of history is
//! under-specified.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;

use crate::distributions::{Token, TokenDist, Vocab};
use crate::error::{Error, Result};
use crate::policies::{history_window, Context, NGramPolicy, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symbol {
    Terminal(Token),
    Nonterminal(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub lhs: usize,
    pub rhs: Vec<Symbol>,
    pub weight: f64,
}

/// Rule weights are normalized per left-hand side on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    start: usize,
    rules: Vec<Rule>,
}

impl Grammar {
    pub fn new(start: usize, mut rules: Vec<Rule>) -> Result<Self> {
        let mut totals: HashMap<usize, f64> = HashMap::new();
        for r in &rules {
            if !(r.weight > 0.0 && r.weight.is_finite()) {
                return Err(Error::invalid(format!("rule weight {} must be positive", r.weight)));
            }
            *totals.entry(r.lhs).or_default() += r.weight;
        }
        if !totals.contains_key(&start) {
            return Err(Error::invalid("start symbol has no rules"));
        }
        for r in &rules {
            for s in &r.rhs {
                if let Symbol::Nonterminal(n) = s {
                    if !totals.contains_key(n) {
                        return Err(Error::invalid(format!("nonterminal {n} has no rules")));
                    }
                }
            }
        }
        for r in &mut rules {
            r.weight /= totals[&r.lhs];
        }
        Ok(Grammar { start, rules })
    }

    fn rules_for(&self, lhs: usize) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(move |r| r.lhs == lhs)
    }

    /// Every terminal string with its total derivation probability. Fails if
    /// some derivation exceeds `max_terminals` or keeps expanding past
    /// `max_steps` nonterminal rewrites.
    pub fn language(&self, max_terminals: usize) -> Result<Vec<(Vec<Token>, f64)>> {
        const MAX_STEPS: usize = 64;
        let mut out: BTreeMap<Vec<Token>, f64> = BTreeMap::new();
        let mut work = vec![(vec![Symbol::Nonterminal(self.start)], 1.0, 0usize)];
        while let Some((form, p, steps)) = work.pop() {
            let terminals = form.iter().filter(|s| matches!(s, Symbol::Terminal(_))).count();
            if terminals > max_terminals {
                return Err(Error::invalid("grammar derives strings longer than the limit"));
            }
            match form.iter().position(|s| matches!(s, Symbol::Nonterminal(_))) {
                None => {
                    let s = form
                        .iter()
                        .map(|s| match s {
                            Symbol::Terminal(t) => *t,
                            Symbol::Nonterminal(_) => unreachable!(),
                        })
                        .collect();
                    *out.entry(s).or_default() += p;
                }
                Some(i) => {
                    if steps >= MAX_STEPS {
                        return Err(Error::invalid("grammar is recursive beyond the step limit"));
                    }
                    let Symbol::Nonterminal(n) = form[i] else { unreachable!() };
                    for r in self.rules_for(n) {
                        let mut next = form[..i].to_vec();
                        next.extend_from_slice(&r.rhs);
                        next.extend_from_slice(&form[i + 1..]);
                        work.push((next, p * r.weight, steps + 1));
                    }
                }
            }
        }
        Ok(out.into_iter().collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Token> {
        let mut out = Vec::new();
        self.expand(self.start, rng, &mut out);
        out
    }

    fn expand<R: Rng + ?Sized>(&self, lhs: usize, rng: &mut R, out: &mut Vec<Token>) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = None;
        for r in self.rules_for(lhs) {
            acc += r.weight;
            chosen = Some(r);
            if u < acc {
                break;
            }
        }
        let rule = chosen.expect("validated grammar has rules for every nonterminal");
        for s in &rule.rhs {
            match *s {
                Symbol::Terminal(t) => out.push(t),
                Symbol::Nonterminal(n) => self.expand(n, rng, out),
            }
        }
    }
}

/// Compiles a grammar into an exact n-gram teacher over `x ++ y`, where each
/// generated string is followed by EOS. Rows are smoothed toward uniform by
/// `smoothing`; histories the grammar never produces default to EOS.
///
/// Fails if the grammar's next-token conditionals are not determined by the
/// last `window` tokens.
pub fn compile_ngram(
    grammar: &Grammar,
    vocab: Vocab,
    x: &Context,
    window: usize,
    max_terminals: usize,
    smoothing: f64,
) -> Result<NGramPolicy> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid("smoothing must lie in [0, 1)"));
    }
    let m = vocab.size();
    let mut by_window: HashMap<Vec<Option<Token>>, Vec<f64>> = HashMap::new();
    let mut by_prefix: HashMap<Vec<Token>, Vec<f64>> = HashMap::new();
    for (mut s, p) in grammar.language(max_terminals)? {
        s.push(vocab.eos());
        for n in 0..s.len() {
            let key = history_window(x, &s[..n], window);
            by_window.entry(key).or_insert_with(|| vec![0.0; m])[s[n]] += p;
            by_prefix.entry(s[..n].to_vec()).or_insert_with(|| vec![0.0; m])[s[n]] += p;
        }
    }
    let normalize = |row: &[f64]| -> Vec<f64> {
        let t: f64 = row.iter().sum();
        row.iter().map(|v| v / t).collect()
    };
    for (prefix, row) in &by_prefix {
        let w = normalize(&by_window[&history_window(x, prefix, window)]);
        let r = normalize(row);
        if w.iter().zip(&r).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(Error::invalid(format!(
                "conditional after {prefix:?} is not determined by a window of {window}"
            )));
        }
    }
    let smooth = |row: Vec<f64>| -> Result<TokenDist> {
        TokenDist::from_probs(
            row.into_iter()
                .map(|p| (1.0 - smoothing) * p + smoothing / m as f64)
                .collect(),
        )
    };
    let mut eos_row = vec![0.0; m];
    eos_row[vocab.eos()] = 1.0;
    let mut policy = NGramPolicy::new(vocab, window, smooth(eos_row)?)?;
    for (key, row) in by_window {
        policy.set_row(key, smooth(normalize(&row))?)?;
    }
    Ok(policy)
}

/// Token ids used by the `pcfg` task.
pub mod tokens {
    pub const EOS: usize = 0;
    pub const PROMPT: usize = 1;
    pub const OPEN_A: usize = 2;
    pub const OPEN_B: usize = 3;
    pub const FILL_X: usize = 4;
    pub const FILL_Y: usize = 5;
    /// Acceptable closer after either opener.
    pub const HEDGE: usize = 6;
    pub const CLOSE_A: usize = 7;
    pub const CLOSE_B: usize = 8;
    pub const UNUSED: usize = 9;
    pub const VOCAB: usize = 10;
}

/// Rule weights of the `pcfg` grammar family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcfgWeights {
    pub open_a: f64,
    pub specific_close: f64,
}

/// `S -> A F F C_A | B F F C_B`, `F -> x | y`, `C_A -> close_a | hedge`,
/// `C_B -> close_b | hedge`.
pub fn pcfg_grammar(w: PcfgWeights) -> Result<Grammar> {
    use tokens::*;
    use Symbol::{Nonterminal as N, Terminal as T};
    let (s, f, ca, cb) = (0, 1, 2, 3);
    Grammar::new(
        s,
        vec![
            Rule { lhs: s, rhs: vec![T(OPEN_A), N(f), N(f), N(ca)], weight: w.open_a },
            Rule { lhs: s, rhs: vec![T(OPEN_B), N(f), N(f), N(cb)], weight: 1.0 - w.open_a },
            Rule { lhs: f, rhs: vec![T(FILL_X)], weight: 0.5 },
            Rule { lhs: f, rhs: vec![T(FILL_Y)], weight: 0.5 },
            Rule { lhs: ca, rhs: vec![T(CLOSE_A)], weight: w.specific_close },
            Rule { lhs: ca, rhs: vec![T(HEDGE)], weight: 1.0 - w.specific_close },
            Rule { lhs: cb, rhs: vec![T(CLOSE_B)], weight: w.specific_close },
            Rule { lhs: cb, rhs: vec![T(HEDGE)], weight: 1.0 - w.specific_close },
        ],
    )
}

pub(crate) struct PcfgTask {
    pub reference: Grammar,
    pub language: HashSet<Vec<Token>>,
}

impl PcfgTask {
    pub fn ground_truth<R: Rng + ?Sized>(&self, vocab: &Vocab, rng: &mut R, max_len: usize) -> Result<Sequence> {
        let mut s = self.reference.sample(rng);
        s.push(vocab.eos());
        Sequence::new(s, vocab, max_len)
    }

    pub fn is_correct(&self, y: &[Token]) -> bool {
        self.language.contains(y)
    }
}
