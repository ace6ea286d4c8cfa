//! Tabular generator and prefix discriminator with analytic gradients.
//!
//! Both models keep one free parameter row per (context, prefix), so every
//! distribution over the space is representable and every gradient is exact.

mod discriminator;
mod generator;
mod table;

pub use discriminator::PrefixDiscriminator;
pub use generator::{sample_categorical, GenStep, GradTable, TabularGenerator, GREEDY_TEMPERATURE, LOGIT_FLOOR};
pub use table::PrefixTable;
