//! Sentence-level BLEU, self-BLEU and temperature sweeps.
//!
//! BLEU here is the geometric mean of modified n-gram precisions times the
//! brevity penalty `exp(min(0, 1 - r/c))`, with `r` the reference length
//! closest to the candidate length `c` (shorter on ties). Precisions for
//! `n >= 2` use add-one smoothing, and the n-gram order is clipped to the
//! candidate length so every precision is defined on short sequences.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::TabularGenerator;
use crate::seqspace::{Sequence, Token};

/// One-line description of the BLEU variant, written into CSV headers.
pub const BLEU_VARIANT: &str = "sentence-bleu add-one(n>=2) max_n clipped to candidate length, eos stripped";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuSpec {
    pub max_n: usize,
    /// Token removed before n-gram extraction.
    pub eos: Option<Token>,
}

impl BleuSpec {
    pub fn new(max_n: usize, eos: Option<Token>) -> Result<Self> {
        if max_n == 0 {
            return Err(Error::Config("bleu max_n must be >= 1".into()));
        }
        Ok(Self { max_n, eos })
    }
}

impl Default for BleuSpec {
    fn default() -> Self {
        Self { max_n: 4, eos: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub temperature: f64,
    pub neg_bleu: f64,
    pub self_bleu: f64,
}

fn strip(y: &Sequence, eos: Option<Token>) -> &[Token] {
    match (eos, y.tokens().last()) {
        (Some(e), Some(&last)) if last == e => &y.tokens()[..y.len() - 1],
        _ => y.tokens(),
    }
}

fn ngram_counts(tokens: &[Token], n: usize) -> HashMap<&[Token], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu(candidate: &Sequence, references: &[Sequence], spec: BleuSpec) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let cand = strip(candidate, spec.eos);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<&[Token]> = references.iter().map(|r| strip(r, spec.eos)).collect();
    let c = cand.len();
    let max_n = spec.max_n.min(c);

    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand_counts = ngram_counts(cand, n);
        let mut max_ref: HashMap<&[Token], usize> = HashMap::new();
        for r in &refs {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        let matched: usize = cand_counts.iter().map(|(g, &k)| k.min(*max_ref.get(g).unwrap_or(&0))).sum();
        let total = c + 1 - n;
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }

    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("references are non-empty");
    let bp = (1.0 - r as f64 / c as f64).min(0.0).exp();
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Mean BLEU of each sample against all the others.
pub fn self_bleu(samples: &[Sequence], spec: BleuSpec) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples { need: 2, got: samples.len() });
    }
    let mut total = 0.0;
    let mut others = Vec::with_capacity(samples.len() - 1);
    for i in 0..samples.len() {
        others.clear();
        others.extend(samples.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| s.clone()));
        total += bleu(&samples[i], &others, spec)?;
    }
    Ok(total / samples.len() as f64)
}

/// `-mean_i BLEU(candidate_i, references)`.
pub fn neg_bleu(candidates: &[Sequence], references: &[Sequence], spec: BleuSpec) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let mut total = 0.0;
    for c in candidates {
        total += bleu(c, references, spec)?;
    }
    Ok(-total / candidates.len() as f64)
}

/// Quality/diversity pairs for each temperature, each from `n_samples` draws.
pub fn temperature_curve<R: Rng + ?Sized>(
    gen: &TabularGenerator,
    ctx: u32,
    p_d_samples: &[Sequence],
    temperatures: &[f64],
    n_samples: usize,
    spec: BleuSpec,
    rng: &mut R,
) -> Result<Vec<CurvePoint>> {
    if n_samples < 2 {
        return Err(Error::TooFewSamples { need: 2, got: n_samples });
    }
    if temperatures.windows(2).any(|w| w[0] > w[1]) || temperatures.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Precondition("temperatures must be positive and ascending".into()));
    }
    let mut out = Vec::with_capacity(temperatures.len());
    for &temperature in temperatures {
        let draws = (0..n_samples).map(|_| gen.sample(ctx, temperature, rng)).collect::<Result<Vec<_>>>()?;
        out.push(CurvePoint {
            temperature,
            neg_bleu: neg_bleu(&draws, p_d_samples, spec)?,
            self_bleu: self_bleu(&draws, spec)?,
        });
    }
    Ok(out)
}
