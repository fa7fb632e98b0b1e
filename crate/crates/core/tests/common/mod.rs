#![allow(dead_code)]

use gkd_core::distributions::{TokenDist, Vocab};
use gkd_core::policies::{Architecture, Context, NGramPolicy, ParametricPolicy};
use rand::Rng;

/// The smallest student: vocab 2 (EOS = 0), window 1, one embedding
/// coordinate and one hidden unit. Nine parameters, laid out as
/// `[e0, e1, e_pad, w, b, v0, v1, c0, c1]`.
#[derive(Debug, Clone, Copy)]
pub struct Tiny {
    pub e: [f64; 3],
    pub w: f64,
    pub b: f64,
    pub v: [f64; 2],
    pub c: [f64; 2],
}

pub const TINY_ARCH: Architecture = Architecture {
    window: 1,
    embed_dim: 1,
    hidden_dim: 1,
};

impl Tiny {
    pub fn example() -> Self {
        Tiny {
            e: [0.4, -0.7, 0.2],
            w: 0.9,
            b: 0.3,
            v: [0.5, -1.1],
            c: [0.05, -0.2],
        }
    }

    pub fn theta(&self) -> Vec<f64> {
        vec![
            self.e[0], self.e[1], self.e[2], self.w, self.b, self.v[0], self.v[1], self.c[0], self.c[1],
        ]
    }

    pub fn policy(&self) -> ParametricPolicy {
        ParametricPolicy::from_params(vocab2(), TINY_ARCH, 0, self.theta()).unwrap()
    }

    fn hidden(&self, slot: usize) -> (f64, f64) {
        let pre = self.w * self.e[slot] + self.b;
        (pre, pre.max(0.0))
    }

    /// Next-token distribution when the last history token is `slot`
    /// (2 = padding).
    pub fn probs(&self, slot: usize) -> [f64; 2] {
        let (_, h) = self.hidden(slot);
        let z = [self.v[0] * h + self.c[0], self.v[1] * h + self.c[1]];
        let m = z[0].max(z[1]);
        let ex = [(z[0] - m).exp(), (z[1] - m).exp()];
        let s = ex[0] + ex[1];
        [ex[0] / s, ex[1] / s]
    }

    /// Parameter gradient for a logit-space gradient `g` at history `slot`.
    pub fn backprop(&self, slot: usize, g: [f64; 2]) -> Vec<f64> {
        let (pre, h) = self.hidden(slot);
        let dh = g[0] * self.v[0] + g[1] * self.v[1];
        let dpre = if pre > 0.0 { dh } else { 0.0 };
        let mut out = vec![0.0; 9];
        out[slot] = dpre * self.w;
        out[3] = dpre * self.e[slot];
        out[4] = dpre;
        out[5] = g[0] * h;
        out[6] = g[1] * h;
        out[7] = g[0];
        out[8] = g[1];
        out
    }
}

pub fn vocab2() -> Vocab {
    Vocab::new(2, 0).unwrap()
}

/// Window-2 teacher for context `[1]`: one row for the first output position,
/// another for every later one. With EOS = 0 a window-1 policy could never
/// tell positions apart, and every sequence would have the same discrepancy.
pub fn position_teacher() -> NGramPolicy {
    let v = vocab2();
    let mut t = NGramPolicy::new(v, 2, TokenDist::uniform(2)).unwrap();
    t.set_row(vec![None, Some(1)], TokenDist::from_probs(vec![0.3, 0.7]).unwrap())
        .unwrap();
    t.set_row(vec![Some(1), Some(1)], TokenDist::from_probs(vec![0.6, 0.4]).unwrap())
        .unwrap();
    t
}

/// Window-1 teacher over the 2-token vocab with distinct rows after 0 and 1.
pub fn tiny_teacher() -> NGramPolicy {
    let v = vocab2();
    let mut t = NGramPolicy::new(v, 1, TokenDist::uniform(2)).unwrap();
    t.set_row(vec![Some(0)], TokenDist::from_probs(vec![0.3, 0.7]).unwrap())
        .unwrap();
    t.set_row(vec![Some(1)], TokenDist::from_probs(vec![0.6, 0.4]).unwrap())
        .unwrap();
    t
}

pub fn ctx(tokens: &[usize], v: &Vocab) -> Context {
    Context::new(tokens.to_vec(), v).unwrap()
}

pub fn add_into(acc: &mut [f64], g: &[f64], scale: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += scale * b;
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error with a floor on the denominator so that entries that are
/// both essentially zero compare as equal.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn random_dist<R: Rng>(rng: &mut R, m: usize) -> TokenDist {
    let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    TokenDist::from_probs(w.into_iter().map(|x| x / s).collect()).unwrap()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
