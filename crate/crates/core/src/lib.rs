//! Generative cooperative networks on exactly enumerable sequence spaces.
//!
//! The generator imitates the cooperative target `q_t ∝ p_{t-1} · D_t`
//! built from the previous generator and the current discriminator. Every
//! space here is small enough to enumerate, so the training dynamics can be
//! checked against brute-force oracles.

#[cfg(feature = "cli")]
pub mod cli;
pub mod error;
pub mod exact;
pub mod math;
pub mod metrics;
pub mod models;
pub mod sampling;
pub mod seqspace;
pub mod trainer;

pub use error::{Error, Result};
