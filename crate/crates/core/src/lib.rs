//! Generalized knowledge distillation for small autoregressive policies.
//!
//! The crate is organized bottom-up: [`distributions`] and [`divergences`]
//! provide the numerical kernels, [`policies`] the teacher and student models,
//! [`oracle`] exact enumeration of every expectation the trainer estimates,
//! [`gkd`] and [`rl_gkd`] the training loops, and [`tasks`] the synthetic
//! tasks and evaluation harness.

pub mod distributions;
pub mod divergences;
pub mod error;
pub mod gkd;
pub mod oracle;
pub mod policies;
pub mod rl_gkd;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
