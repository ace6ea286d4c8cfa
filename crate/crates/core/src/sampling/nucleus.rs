use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{sample_categorical, TabularGenerator};
use crate::seqspace::{Sequence, Token};

/// Slack when comparing accumulated mass against `sigma`.
const MASS_TOL: f64 = 1e-12;

/// Nucleus mass threshold. Ties are broken by descending probability, then
/// ascending token id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NucleusSpec {
    pub sigma: f64,
}

impl NucleusSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma <= 1.0) {
            return Err(Error::Config(format!("nucleus mass must lie in (0, 1], got {sigma}")));
        }
        Ok(Self { sigma })
    }
}

/// Smallest set of tokens holding at least `sigma` of the mass, returned in
/// ascending id order. Zero-mass tokens are never selected.
pub fn nucleus_set(dist: &[f64], spec: NucleusSpec) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut take = order.len();
    for (k, &i) in order.iter().enumerate() {
        mass += dist[i];
        if mass >= spec.sigma - MASS_TOL {
            take = k + 1;
            break;
        }
    }
    let mut set = order[..take].to_vec();
    set.sort_unstable();
    set
}

/// The categorical truncated to its nucleus and renormalized.
pub fn nucleus_probs(dist: &[f64], spec: NucleusSpec) -> Vec<f64> {
    let set = nucleus_set(dist, spec);
    let mass: f64 = set.iter().map(|&i| dist[i]).sum();
    let mut out = vec![0.0; dist.len()];
    for i in set {
        out[i] = dist[i] / mass;
    }
    out
}

/// `log p^{nucleus}(y | ctx)`; `-inf` as soon as a token leaves its nucleus.
pub fn nucleus_log_density(gen: &TabularGenerator, ctx: u32, y: &Sequence, spec: NucleusSpec) -> Result<f64> {
    gen.space().check_context(ctx)?;
    gen.space().validate(y)?;
    let mut total = 0.0;
    for j in 0..y.len() {
        let q = nucleus_probs(&gen.step_probs(ctx, y.prefix(j), 1.0), spec)[y.0[j] as usize];
        if q == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        total += q.ln();
    }
    Ok(total)
}

pub fn nucleus_density(gen: &TabularGenerator, ctx: u32, y: &Sequence, spec: NucleusSpec) -> Result<f64> {
    nucleus_log_density(gen, ctx, y, spec).map(f64::exp)
}

/// Ancestral sampling restricted to the nucleus at every step.
pub fn nucleus_sample<R: Rng + ?Sized>(
    gen: &TabularGenerator,
    ctx: u32,
    spec: NucleusSpec,
    rng: &mut R,
) -> Result<Sequence> {
    gen.space().check_context(ctx)?;
    let mut y = Sequence::empty();
    while !gen.space().is_terminal(y.tokens()) {
        let probs = nucleus_probs(&gen.step_probs(ctx, y.tokens(), 1.0), spec);
        y.push(sample_categorical(&probs, rng) as Token);
    }
    Ok(y)
}
