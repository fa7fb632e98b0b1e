//! Named random streams derived from a single root seed.
//!
//! Every consumer of randomness gets its own ChaCha stream so that, for
//! example, the number of tokens sampled in one step never perturbs the
//! mixing decision of the next one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// The per-step Uniform(0,1] draw that picks the batch source.
    Mixing,
    /// Student and teacher sequence sampling.
    Sampling,
    /// Context draws and dataset shuffling.
    Data,
    /// Parameter initialization.
    Init,
    /// Held-out evaluation.
    Eval,
    /// Dataset materialization.
    Generate,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Mixing => 1,
            Stream::Sampling => 2,
            Stream::Data => 3,
            Stream::Init => 4,
            Stream::Eval => 5,
            Stream::Generate => 6,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// A draw from (0, 1]; `u <= 0` never holds and `u <= 1` always does.
pub fn unit_open_closed<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.gen::<f64>()
}
