//! The finite sequence universe and exact distributions over it.
//!
//! A sequence holds between 1 and `max_len` ordinary tokens. It either ends
//! with an explicit EOS, or is forcibly terminated after `max_len` ordinary
//! tokens, in which case no EOS is stored. EOS is never allowed as the very
//! first token. The space therefore holds `sum_{k=1..max_len} size^k`
//! sequences.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::log_sum_exp;

pub type Token = u32;

/// Largest number of sequences `enumerate` will materialize.
pub const ENUMERATION_BUDGET: u128 = 10_000_000;

/// Ordinary tokens `0..size`, plus EOS with id `size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
}

impl Vocab {
    pub fn new(size: u32) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidSpace("vocabulary size must be >= 1".into()));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn eos(&self) -> Token {
        self.size
    }

    /// Ordinary tokens plus EOS.
    pub fn num_symbols(&self) -> usize {
        self.size as usize + 1
    }

    pub fn is_eos(&self, t: Token) -> bool {
        t == self.size
    }
}

/// An ordered list of token ids. Also used for unfinished prefixes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sequence(pub Vec<Token>);

impl Sequence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The first `j` tokens.
    pub fn prefix(&self, j: usize) -> &[Token] {
        &self.0[..j]
    }

    pub fn push(&mut self, t: Token) {
        self.0.push(t);
    }

    /// Tokens with a trailing EOS removed.
    pub fn content(&self, vocab: Vocab) -> &[Token] {
        match self.0.last() {
            Some(&t) if vocab.is_eos(t) => &self.0[..self.0.len() - 1],
            _ => &self.0,
        }
    }
}

impl From<Vec<Token>> for Sequence {
    fn from(v: Vec<Token>) -> Self {
        Self(v)
    }
}

impl From<&[Token]> for Sequence {
    fn from(v: &[Token]) -> Self {
        Self(v.to_vec())
    }
}

/// Dash-joined token ids, e.g. `0-1-2`. The empty prefix renders as "".
impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_key(f, &self.0)
    }
}

pub(crate) fn write_key(f: &mut impl fmt::Write, tokens: &[Token]) -> fmt::Result {
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            f.write_char('-')?;
        }
        write!(f, "{t}")?;
    }
    Ok(())
}

pub(crate) fn prefix_key(tokens: &[Token]) -> String {
    let mut s = String::new();
    write_key(&mut s, tokens).expect("writing to a String cannot fail");
    s
}

impl FromStr for Sequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Ok(Self::empty());
        }
        s.split('-')
            .map(|p| {
                p.trim().parse::<Token>().map_err(|_| Error::InvalidSequence {
                    seq: s.to_string(),
                    reason: format!("'{p}' is not a token id"),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub vocab: Vocab,
    pub max_len: usize,
    /// 0 means unconditional generation (a single implicit context 0).
    pub num_contexts: u32,
}

impl SpaceConfig {
    /// Builds a space without checking the enumeration budget; use
    /// [`SpaceConfig::check_budget`] before anything that enumerates.
    pub fn new(vocab_size: u32, max_len: usize, num_contexts: u32) -> Result<Self> {
        let vocab = Vocab::new(vocab_size)?;
        if max_len == 0 {
            return Err(Error::InvalidSpace("max_len must be >= 1".into()));
        }
        Ok(Self { vocab, max_len, num_contexts })
    }

    /// `sum_{k=1..max_len} size^k`, saturating.
    pub fn space_size(&self) -> u128 {
        let v = self.vocab.size() as u128;
        let mut total: u128 = 0;
        let mut pow: u128 = 1;
        for _ in 0..self.max_len {
            pow = pow.saturating_mul(v);
            total = total.saturating_add(pow);
            if total > ENUMERATION_BUDGET * 1000 {
                break;
            }
        }
        total
    }

    pub fn check_budget(&self) -> Result<()> {
        let size = self.space_size();
        if size > ENUMERATION_BUDGET {
            return Err(Error::BudgetExceeded { size, budget: ENUMERATION_BUDGET });
        }
        Ok(())
    }

    /// Number of distinct context ids (at least one).
    pub fn context_count(&self) -> u32 {
        self.num_contexts.max(1)
    }

    pub fn contexts(&self) -> impl Iterator<Item = u32> {
        0..self.context_count()
    }

    pub fn is_conditional(&self) -> bool {
        self.num_contexts > 0
    }

    pub fn check_context(&self, ctx: u32) -> Result<()> {
        if ctx >= self.context_count() {
            return Err(Error::UnknownContext { ctx, num: self.context_count() });
        }
        Ok(())
    }

    pub fn eos(&self) -> Token {
        self.vocab.eos()
    }

    pub fn num_symbols(&self) -> usize {
        self.vocab.num_symbols()
    }

    /// Whether no further token can follow `prefix`.
    pub fn is_terminal(&self, prefix: &[Token]) -> bool {
        match prefix.last() {
            Some(&t) if self.vocab.is_eos(t) => true,
            _ => prefix.len() >= self.max_len,
        }
    }

    /// Which symbols may follow a non-terminal `prefix`. EOS is excluded
    /// after the empty prefix so every sequence has at least one token.
    pub fn allowed_mask(&self, prefix: &[Token]) -> Vec<bool> {
        let mut mask = vec![true; self.num_symbols()];
        if prefix.is_empty() {
            mask[self.eos() as usize] = false;
        }
        mask
    }

    /// Checks a possibly unfinished prefix: ids in range, EOS only last,
    /// at most `max_len` ordinary tokens.
    pub fn validate_prefix(&self, prefix: &[Token]) -> Result<()> {
        let bad = |reason: &str| Error::InvalidSequence {
            seq: prefix_key(prefix),
            reason: reason.to_string(),
        };
        for (i, &t) in prefix.iter().enumerate() {
            if t > self.eos() {
                return Err(bad("token id out of range"));
            }
            if self.vocab.is_eos(t) {
                if i + 1 != prefix.len() {
                    return Err(bad("EOS must be the last token"));
                }
                if i == 0 {
                    return Err(bad("sequence must hold at least one token"));
                }
                if i >= self.max_len {
                    return Err(bad("EOS after max_len tokens"));
                }
            } else if i >= self.max_len {
                return Err(bad("longer than max_len"));
            }
        }
        Ok(())
    }

    /// Checks a complete (terminal) sequence.
    pub fn validate(&self, seq: &Sequence) -> Result<()> {
        self.validate_prefix(seq.tokens())?;
        if !self.is_terminal(seq.tokens()) {
            return Err(Error::InvalidSequence {
                seq: seq.to_string(),
                reason: "sequence is not terminal".into(),
            });
        }
        Ok(())
    }

    /// Every non-terminal prefix, i.e. every point where a token is chosen,
    /// in lexicographic order.
    pub fn decision_prefixes(&self) -> Result<Vec<Sequence>> {
        self.check_budget()?;
        let mut out = Vec::new();
        let mut stack = vec![Sequence::empty()];
        while let Some(p) = stack.pop() {
            if self.is_terminal(p.tokens()) {
                continue;
            }
            for t in (0..self.vocab.size()).rev() {
                let mut c = p.clone();
                c.push(t);
                stack.push(c);
            }
            out.push(p);
        }
        out.sort();
        Ok(out)
    }

    /// Every terminal sequence exactly once, in lexicographic token order.
    pub fn enumerate(&self) -> Result<Vec<Sequence>> {
        self.check_budget()?;
        let mut out = Vec::with_capacity(self.space_size() as usize);
        let mut cur = Vec::with_capacity(self.max_len + 1);
        self.enumerate_into(&mut cur, &mut out);
        Ok(out)
    }

    fn enumerate_into(&self, cur: &mut Vec<Token>, out: &mut Vec<Sequence>) {
        // Lexicographic order visits ordinary tokens 0..size before EOS.
        for t in 0..self.vocab.size() {
            cur.push(t);
            if cur.len() >= self.max_len {
                out.push(Sequence(cur.clone()));
            } else {
                self.enumerate_into(cur, out);
            }
            cur.pop();
        }
        if !cur.is_empty() {
            cur.push(self.eos());
            out.push(Sequence(cur.clone()));
            cur.pop();
        }
    }
}

/// The enumerated support of a space, with index lookup.
#[derive(Clone, Debug)]
pub struct SequenceSpace {
    config: SpaceConfig,
    seqs: Vec<Sequence>,
}

impl SequenceSpace {
    pub fn new(config: SpaceConfig) -> Result<Self> {
        let seqs = config.enumerate()?;
        Ok(Self { config, seqs })
    }

    pub fn config(&self) -> &SpaceConfig {
        &self.config
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.seqs
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn get(&self, i: usize) -> &Sequence {
        &self.seqs[i]
    }

    pub fn index_of(&self, seq: &Sequence) -> Option<usize> {
        self.seqs.binary_search(seq).ok()
    }
}

/// An explicit probability table over an enumerated support, stored in
/// log space. Outcome `i` refers to the `i`-th enumerated sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactDist {
    logp: Vec<f64>,
}

impl ExactDist {
    /// Normalizes non-negative finite masses.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("mass {p} is not a finite non-negative number")));
        }
        Self::from_log_weights(probs.iter().map(|p| p.ln()).collect())
    }

    /// Normalizes unnormalized log weights; `-inf` marks zero mass.
    pub fn from_log_weights(mut logw: Vec<f64>) -> Result<Self> {
        if logw.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        if logw.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::InvalidDistribution("log weight is NaN or +inf".into()));
        }
        let lse = log_sum_exp(&logw);
        if lse == f64::NEG_INFINITY {
            return Err(Error::InvalidDistribution("total mass is zero".into()));
        }
        for w in &mut logw {
            *w -= lse;
        }
        Ok(Self { logp: logw })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_log_weights(vec![0.0; n])
    }

    pub fn point_mass(n: usize, at: usize) -> Result<Self> {
        let mut logw = vec![f64::NEG_INFINITY; n];
        logw[at] = 0.0;
        Self::from_log_weights(logw)
    }

    pub fn len(&self) -> usize {
        self.logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.logp[i].exp()
    }

    pub fn log_prob(&self, i: usize) -> f64 {
        self.logp[i]
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.logp
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logp.iter().map(|l| l.exp()).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.logp.iter().map(|l| l.exp()).sum()
    }

    /// Index of the most probable outcome, lowest index on ties.
    pub fn mode(&self) -> usize {
        crate::math::argmax(&self.logp)
    }

    /// Reusable categorical sampler over outcome indices.
    pub fn sampler(&self) -> DistSampler {
        DistSampler {
            index: WeightedIndex::new(self.probs()).expect("normalized distribution has positive mass"),
        }
    }

    pub(crate) fn same_support(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::SupportMismatch { left: self.len(), right: other.len() });
        }
        Ok(())
    }
}

pub struct DistSampler {
    index: WeightedIndex<f64>,
}

impl DistSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }
}

/// `sum_y p(y) log(p(y)/q(y))` in nats. Outcomes with `p(y) = 0` contribute 0.
pub fn kl_divergence(p: &ExactDist, q: &ExactDist) -> Result<f64> {
    p.same_support(q)?;
    let mut kl = 0.0;
    for (i, (&lp, &lq)) in p.logp.iter().zip(&q.logp).enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return Err(Error::SupportViolation { index: i });
        }
        kl += lp.exp() * (lp - lq);
    }
    // Rounding can leave a tiny negative residue when p == q.
    Ok(kl.max(0.0))
}

/// Half the L1 distance between two distributions.
pub fn total_variation(p: &ExactDist, q: &ExactDist) -> Result<f64> {
    p.same_support(q)?;
    let tv = 0.5 * p.logp.iter().zip(&q.logp).map(|(a, b)| (a.exp() - b.exp()).abs()).sum::<f64>();
    Ok(tv.min(1.0))
}
