use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::table::PrefixTable;
use crate::error::{Error, Result};
use crate::math::{argmax, log_sum_exp, masked_softmax};
use crate::seqspace::{ExactDist, Sequence, SpaceConfig, Token};

/// Below this temperature sampling is greedy.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// Floor applied when realizing a distribution with zero-mass branches.
pub const LOGIT_FLOOR: f64 = -60.0;

/// Per-(context, prefix) gradient rows, shaped like the generator's logits.
pub type GradTable = PrefixTable<Vec<f64>>;

/// Autoregressive generator with one free logit vector per reachable prefix.
///
/// Unset prefixes have all-zero logits, i.e. a uniform next-token
/// distribution over the allowed symbols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularGenerator {
    space: SpaceConfig,
    theta: PrefixTable<Vec<f64>>,
}

/// Summary of one weighted generator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenStep {
    /// L2 norm of the applied parameter change.
    pub step_norm: f64,
    pub weight_sum: f64,
}

impl TabularGenerator {
    pub fn new(space: SpaceConfig) -> Self {
        Self { space, theta: PrefixTable::new(space.context_count()) }
    }

    /// Gaussian logits with standard deviation `scale` on every decision prefix.
    pub fn random<R: Rng + ?Sized>(space: SpaceConfig, scale: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, scale)
            .map_err(|e| Error::Config(format!("invalid logit scale {scale}: {e}")))?;
        let prefixes = space.decision_prefixes()?;
        let mut gen = Self::new(space);
        for ctx in space.contexts() {
            for p in &prefixes {
                let row: Vec<f64> = (0..space.num_symbols()).map(|_| normal.sample(rng)).collect();
                gen.theta.insert(ctx, p.0.clone(), row);
            }
        }
        Ok(gen)
    }

    /// A generator whose sequence distribution for context `c` equals
    /// `dists[c]` (up to [`LOGIT_FLOOR`] on zero-mass branches).
    pub fn from_dists(space: SpaceConfig, dists: &[ExactDist]) -> Result<Self> {
        if dists.len() != space.context_count() as usize {
            return Err(Error::Precondition(format!(
                "need one distribution per context ({}), got {}",
                space.context_count(),
                dists.len()
            )));
        }
        let seqs = space.enumerate()?;
        let mut gen = Self::new(space);
        for (ctx, dist) in dists.iter().enumerate() {
            if dist.len() != seqs.len() {
                return Err(Error::SupportMismatch { left: dist.len(), right: seqs.len() });
            }
            // Mass of every prefix, terminal or not.
            let mut mass: HashMap<&[Token], f64> = HashMap::new();
            for (i, s) in seqs.iter().enumerate() {
                let p = dist.prob(i);
                for j in 0..=s.len() {
                    *mass.entry(s.prefix(j)).or_insert(0.0) += p;
                }
            }
            for p in space.decision_prefixes()? {
                let parent = mass.get(p.tokens()).copied().unwrap_or(0.0);
                let mask = space.allowed_mask(p.tokens());
                let mut child = p.0.clone();
                let row: Vec<f64> = (0..space.num_symbols())
                    .map(|a| {
                        if !mask[a] || parent <= 0.0 {
                            return 0.0;
                        }
                        child.push(a as Token);
                        let m = mass.get(child.as_slice()).copied().unwrap_or(0.0);
                        child.pop();
                        (m / parent).ln().max(LOGIT_FLOOR)
                    })
                    .collect();
                gen.theta.insert(ctx as u32, p.0, row);
            }
        }
        Ok(gen)
    }

    pub fn space(&self) -> &SpaceConfig {
        &self.space
    }

    pub fn table(&self) -> &PrefixTable<Vec<f64>> {
        &self.theta
    }

    /// Number of materialized logit rows.
    pub fn rows(&self) -> usize {
        self.theta.len()
    }

    pub fn logits(&self, ctx: u32, prefix: &[Token]) -> Vec<f64> {
        self.theta
            .get(ctx, prefix)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.space.num_symbols()])
    }

    pub fn set_logits(&mut self, ctx: u32, prefix: &[Token], logits: Vec<f64>) -> Result<()> {
        self.space.check_context(ctx)?;
        if logits.len() != self.space.num_symbols() || logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Precondition("logit row must be finite with one entry per symbol".into()));
        }
        self.theta.insert(ctx, prefix.to_vec(), logits);
        Ok(())
    }

    /// Next-symbol distribution after a non-terminal prefix.
    pub fn step_probs(&self, ctx: u32, prefix: &[Token], temperature: f64) -> Vec<f64> {
        let mask = self.space.allowed_mask(prefix);
        match self.theta.get(ctx, prefix) {
            Some(row) => masked_softmax(row, &mask, temperature),
            None => {
                let n = mask.iter().filter(|m| **m).count() as f64;
                mask.iter().map(|&m| if m { 1.0 / n } else { 0.0 }).collect()
            }
        }
    }

    /// Next-symbol log-probabilities at temperature 1; `-inf` where masked.
    pub fn step_log_probs(&self, ctx: u32, prefix: &[Token]) -> Vec<f64> {
        let mask = self.space.allowed_mask(prefix);
        let row = self.logits(ctx, prefix);
        let masked: Vec<f64> = row
            .iter()
            .zip(&mask)
            .map(|(&l, &m)| if m { l } else { f64::NEG_INFINITY })
            .collect();
        let lse = log_sum_exp(&masked);
        masked.iter().map(|&l| l - lse).collect()
    }

    /// `log p(y | ctx)`, summing the per-step log-probabilities.
    pub fn log_prob(&self, ctx: u32, y: &Sequence) -> Result<f64> {
        self.space.check_context(ctx)?;
        self.space.validate(y)?;
        Ok((0..y.len())
            .map(|j| self.step_log_probs(ctx, y.prefix(j))[y.0[j] as usize])
            .sum())
    }

    /// Ancestral sampling from `softmax(logits / temperature)`; greedy when
    /// `temperature < GREEDY_TEMPERATURE`.
    pub fn sample<R: Rng + ?Sized>(&self, ctx: u32, temperature: f64, rng: &mut R) -> Result<Sequence> {
        self.space.check_context(ctx)?;
        let mut y = Sequence::empty();
        while !self.space.is_terminal(y.tokens()) {
            let t = if temperature < GREEDY_TEMPERATURE {
                argmax(&self.step_probs(ctx, y.tokens(), 1.0))
            } else {
                sample_categorical(&self.step_probs(ctx, y.tokens(), temperature), rng)
            };
            y.push(t as Token);
        }
        Ok(y)
    }

    /// Gradient of `log p(y | ctx)` with respect to every logit row.
    pub fn grad_log_prob(&self, ctx: u32, y: &Sequence) -> Result<GradTable> {
        self.space.check_context(ctx)?;
        self.space.validate(y)?;
        let mut grad = GradTable::new(self.space.context_count());
        self.accumulate_grad(ctx, y, 1.0, &mut grad);
        Ok(grad)
    }

    /// Adds `coef * d/dtheta log p(y | ctx)` into `grad`.
    fn accumulate_grad(&self, ctx: u32, y: &Sequence, coef: f64, grad: &mut GradTable) {
        let n = self.space.num_symbols();
        for j in 0..y.len() {
            let prefix = y.prefix(j);
            let probs = self.step_probs(ctx, prefix, 1.0);
            let row = grad.entry_or_insert_with(ctx, prefix, || vec![0.0; n]);
            let chosen = y.0[j] as usize;
            for (a, g) in row.iter_mut().enumerate() {
                let onehot = if a == chosen { 1.0 } else { 0.0 };
                *g += coef * (onehot - probs[a]);
            }
        }
    }

    /// Weighted log-likelihood gradient of a batch, self-normalized when
    /// requested. Returns the gradient and the weight sum.
    pub fn weighted_gradient(
        &self,
        samples: &[(u32, Sequence)],
        weights: &[f64],
        self_normalize: bool,
    ) -> Result<(GradTable, f64)> {
        if samples.len() != weights.len() {
            return Err(Error::Precondition(format!(
                "{} samples but {} weights",
                samples.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Precondition("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        let scale = if self_normalize {
            if total <= 0.0 {
                return Err(Error::AllZeroWeights);
            }
            1.0 / total
        } else {
            1.0
        };
        let mut grad = GradTable::new(self.space.context_count());
        for ((ctx, y), &w) in samples.iter().zip(weights) {
            self.space.check_context(*ctx)?;
            self.space.validate(y)?;
            if w > 0.0 {
                self.accumulate_grad(*ctx, y, w * scale, &mut grad);
            }
        }
        Ok((grad, total))
    }

    /// `theta += lr * g`, where `g` is the (optionally self-normalized)
    /// weighted log-likelihood gradient of the batch.
    pub fn update_weighted(
        &mut self,
        samples: &[(u32, Sequence)],
        weights: &[f64],
        lr: f64,
        self_normalize: bool,
    ) -> Result<GenStep> {
        let (grad, weight_sum) = self.weighted_gradient(samples, weights, self_normalize)?;
        let step_norm = self.apply(&grad, lr);
        Ok(GenStep { step_norm, weight_sum })
    }

    /// `theta += lr * grad`; returns the norm of the change.
    pub fn apply(&mut self, grad: &GradTable, lr: f64) -> f64 {
        let n = self.space.num_symbols();
        let mut sq = 0.0;
        for (ctx, prefix, g) in grad.iter() {
            let row = self.theta.entry_or_insert_with(ctx, prefix, || vec![0.0; n]);
            for (t, d) in row.iter_mut().zip(g) {
                *t += lr * d;
                sq += (lr * d) * (lr * d);
            }
        }
        sq.sqrt()
    }

    /// The exact sequence distribution for one context, aligned with
    /// [`SpaceConfig::enumerate`].
    pub fn exact_dist(&self, ctx: u32) -> Result<ExactDist> {
        self.space.check_context(ctx)?;
        self.space.check_budget()?;
        let mut out = Vec::with_capacity(self.space.space_size() as usize);
        let mut cur = Vec::with_capacity(self.space.max_len + 1);
        self.collect_log_probs(ctx, &mut cur, 0.0, &mut out);
        ExactDist::from_log_weights(out)
    }

    fn collect_log_probs(&self, ctx: u32, cur: &mut Vec<Token>, acc: f64, out: &mut Vec<f64>) {
        let lp = self.step_log_probs(ctx, cur);
        for t in 0..self.space.vocab.size() {
            cur.push(t);
            let a = acc + lp[t as usize];
            if cur.len() >= self.space.max_len {
                out.push(a);
            } else {
                self.collect_log_probs(ctx, cur, a, out);
            }
            cur.pop();
        }
        if !cur.is_empty() {
            out.push(acc + lp[self.space.eos() as usize]);
        }
    }

    /// Checks that a deserialized table fits its space.
    pub fn validate(&self) -> Result<()> {
        if self.theta.contexts() > self.space.context_count() {
            return Err(Error::Config("generator table has more contexts than its space".into()));
        }
        for (_, prefix, row) in self.theta.iter() {
            self.space.validate_prefix(prefix)?;
            if self.space.is_terminal(prefix) {
                return Err(Error::Config(format!("logit row stored for terminal prefix {prefix:?}")));
            }
            if row.len() != self.space.num_symbols() || row.iter().any(|l| !l.is_finite()) {
                return Err(Error::Config(format!("malformed logit row for prefix {prefix:?}")));
            }
        }
        Ok(())
    }

    /// Widens a deserialized table to the space's context count (empty
    /// per-context maps are skipped when serialized).
    pub fn pad_contexts(&mut self) {
        if self.theta.contexts() < self.space.context_count() {
            let mut t = PrefixTable::new(self.space.context_count());
            for (c, k, v) in self.theta.iter() {
                t.insert(c, k.to_vec(), v.clone());
            }
            self.theta = t;
        }
    }
}

/// Inverse-CDF draw from a normalized categorical.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}
