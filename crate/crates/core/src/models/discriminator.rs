use serde::{Deserialize, Serialize};

use super::table::PrefixTable;
use crate::error::{Error, Result};
use crate::math::{log_sigmoid, sigmoid};
use crate::seqspace::{Sequence, SpaceConfig, Token};

/// Discriminator with one free logit per (context, prefix). Scores any
/// prefix, finished or not; unseen prefixes have logit 0 (score 0.5).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixDiscriminator {
    space: SpaceConfig,
    phi: PrefixTable<f64>,
}

impl PrefixDiscriminator {
    pub fn new(space: SpaceConfig) -> Self {
        Self { space, phi: PrefixTable::new(space.context_count()) }
    }

    pub fn space(&self) -> &SpaceConfig {
        &self.space
    }

    pub fn table(&self) -> &PrefixTable<f64> {
        &self.phi
    }

    pub fn logit(&self, ctx: u32, prefix: &[Token]) -> f64 {
        self.phi.get(ctx, prefix).copied().unwrap_or(0.0)
    }

    pub fn set_logit(&mut self, ctx: u32, prefix: &[Token], logit: f64) -> Result<()> {
        self.space.check_context(ctx)?;
        if !logit.is_finite() {
            return Err(Error::Precondition("discriminator logits must be finite".into()));
        }
        self.phi.insert(ctx, prefix.to_vec(), logit);
        Ok(())
    }

    /// `D(ctx, prefix) = sigmoid(phi[ctx, prefix])`.
    pub fn score(&self, ctx: u32, prefix: &[Token]) -> f64 {
        sigmoid(self.logit(ctx, prefix))
    }

    /// The objective ascended by [`PrefixDiscriminator::update`]: summed
    /// over every non-empty prefix `y[..j]`, `j = 1..=|y|`, of each sample.
    pub fn objective(&self, reals: &[(u32, Sequence)], fakes: &[(u32, Sequence)]) -> f64 {
        let mut total = 0.0;
        for (ctx, y) in reals {
            for j in 1..=y.len() {
                total += log_sigmoid(self.logit(*ctx, y.prefix(j)));
            }
        }
        for (ctx, y) in fakes {
            for j in 1..=y.len() {
                total += log_sigmoid(-self.logit(*ctx, y.prefix(j)));
            }
        }
        total
    }

    /// Analytic gradient of [`PrefixDiscriminator::objective`].
    pub fn gradient(&self, reals: &[(u32, Sequence)], fakes: &[(u32, Sequence)]) -> Result<PrefixTable<f64>> {
        let mut grad = PrefixTable::new(self.space.context_count());
        for (batch, real) in [(reals, true), (fakes, false)] {
            for (ctx, y) in batch {
                self.space.check_context(*ctx)?;
                self.space.validate_prefix(y.tokens())?;
                for j in 1..=y.len() {
                    let p = y.prefix(j);
                    let d = self.score(*ctx, p);
                    // d/dphi log D = 1 - D ; d/dphi log(1 - D) = -D
                    let g = if real { 1.0 - d } else { -d };
                    *grad.entry_or_insert_with(*ctx, p, || 0.0) += g;
                }
            }
        }
        Ok(grad)
    }

    /// One gradient-ascent step on the prefix objective.
    pub fn update(&mut self, reals: &[(u32, Sequence)], fakes: &[(u32, Sequence)], lr: f64) -> Result<()> {
        if reals.is_empty() || fakes.is_empty() {
            return Err(Error::Precondition("discriminator batches must be non-empty".into()));
        }
        let grad = self.gradient(reals, fakes)?;
        for (ctx, prefix, g) in grad.iter() {
            *self.phi.entry_or_insert_with(ctx, prefix, || 0.0) += lr * g;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi.contexts() > self.space.context_count() {
            return Err(Error::Config("discriminator table has more contexts than its space".into()));
        }
        for (_, prefix, v) in self.phi.iter() {
            self.space.validate_prefix(prefix)?;
            if !v.is_finite() {
                return Err(Error::Config(format!("non-finite logit for prefix {prefix:?}")));
            }
        }
        Ok(())
    }

    /// Widens a deserialized table to the space's context count (empty
    /// per-context maps are skipped when serialized).
    pub fn pad_contexts(&mut self) {
        if self.phi.contexts() < self.space.context_count() {
            let mut t = PrefixTable::new(self.space.context_count());
            for (c, k, v) in self.phi.iter() {
                t.insert(c, k.to_vec(), *v);
            }
            self.phi = t;
        }
    }
}
