//! Behaviour distributions `q̂` with evaluable densities.
//!
//! `q̂ = ε p_θ + (1 − ε) g`, where the guided component `g` is either the
//! nucleus truncation of `p_θ` or a discriminator-guided tree search. Both
//! branches are always evaluated, so `q̂(y) ≥ ε p_θ(y)` and the raw weight
//! `p_θ(y) D(y) / q̂(y)` never exceeds `D(y) / ε`.

use std::collections::HashMap;
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mcts::{mcts_decode, search_root, DecodeOutput, DecodeTag, MctsConfig, MctsMode};
use super::nucleus::{nucleus_log_density, nucleus_sample, NucleusSpec};
use crate::error::{Error, Result};
use crate::math::mix_seed;
use crate::models::{sample_categorical, PrefixDiscriminator, TabularGenerator};
use crate::seqspace::{Sequence, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidedKind {
    Nucleus,
    Mcts,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub epsilon: f64,
    pub guided: GuidedKind,
}

impl MixtureSpec {
    pub fn new(epsilon: f64, guided: GuidedKind) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::Config(format!("mixture epsilon must lie in (0, 1], got {epsilon}")));
        }
        Ok(Self { epsilon, guided })
    }
}

/// Which `q̂` a training iteration draws from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Behavior {
    Generator,
    Nucleus { epsilon: f64, nucleus: NucleusSpec },
    Mcts { epsilon: f64, mcts: MctsConfig },
}

impl Behavior {
    pub fn from_spec(spec: MixtureSpec, sigma: f64, mcts: Option<MctsConfig>) -> Result<Self> {
        let spec = MixtureSpec::new(spec.epsilon, spec.guided)?;
        Ok(match spec.guided {
            GuidedKind::Nucleus => Behavior::Nucleus { epsilon: spec.epsilon, nucleus: NucleusSpec::new(sigma)? },
            GuidedKind::Mcts => {
                let mcts = mcts.ok_or_else(|| Error::Config("mcts mixture needs an mcts config".into()))?;
                mcts.validate()?;
                Behavior::Mcts { epsilon: spec.epsilon, mcts }
            }
        })
    }

    pub fn epsilon(&self) -> f64 {
        match self {
            Behavior::Generator => 1.0,
            Behavior::Nucleus { epsilon, .. } | Behavior::Mcts { epsilon, .. } => *epsilon,
        }
    }
}

/// One behaviour sample with everything the weight computation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub ctx: u32,
    pub y: Sequence,
    pub log_p: f64,
    pub log_qhat: f64,
    /// `D(ctx, y)` on the full sequence.
    pub score: f64,
    /// `p_θ(y) D(y) / q̂(y)`.
    pub w_raw: f64,
}

/// `log(a·e^x + b·e^y)` for non-negative mixing masses.
fn log_mix(a: f64, x: f64, b: f64, y: f64) -> f64 {
    let l1 = if a > 0.0 { a.ln() + x } else { f64::NEG_INFINITY };
    let l2 = if b > 0.0 { b.ln() + y } else { f64::NEG_INFINITY };
    crate::math::log_sum_exp(&[l1, l2])
}

/// Frozen `q̂` for one set of model parameters. Conditional tree-search
/// decodes are computed once per context at construction; unconditional
/// search policies are cached per prefix. All methods take `&self` and may
/// be called concurrently.
pub struct BehaviorSampler<'a> {
    gen: &'a TabularGenerator,
    disc: &'a PrefixDiscriminator,
    behavior: Behavior,
    seed: u64,
    decodes: Vec<DecodeOutput>,
    policies: RwLock<HashMap<(u32, Vec<Token>), Vec<f64>>>,
}

impl<'a> BehaviorSampler<'a> {
    /// `seed` identifies this frozen distribution; conditional decodes are
    /// tagged with `mix_seed([seed, ctx])`.
    pub fn new(gen: &'a TabularGenerator, disc: &'a PrefixDiscriminator, behavior: Behavior, seed: u64) -> Result<Self> {
        let mut decodes = Vec::new();
        if let Behavior::Mcts { mcts, .. } = behavior {
            mcts.validate()?;
            if mcts.mode == MctsMode::Conditional {
                for ctx in gen.space().contexts() {
                    let s = Self::decode_seed(seed, ctx);
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    decodes.push(mcts_decode(gen, disc, ctx, mcts, s, &mut rng)?);
                }
            }
        }
        Ok(Self { gen, disc, behavior, seed, decodes, policies: RwLock::new(HashMap::new()) })
    }

    pub fn decode_seed(seed: u64, ctx: u32) -> u64 {
        mix_seed(&[seed, ctx as u64])
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Decoded sequence for `ctx` in conditional tree-search mode.
    pub fn decode(&self, ctx: u32) -> Option<&DecodeOutput> {
        self.decodes.get(ctx as usize)
    }

    fn policy(&self, ctx: u32, prefix: &[Token], cfg: MctsConfig) -> Result<Vec<f64>> {
        let key = (ctx, prefix.to_vec());
        if let Some(p) = self.policies.read().expect("policy cache poisoned").get(&key) {
            return Ok(p.clone());
        }
        let p = search_root(self.gen, self.disc, ctx, prefix, cfg)?.visit_dist();
        self.policies.write().expect("policy cache poisoned").insert(key, p.clone());
        Ok(p)
    }

    fn guided_sample<R: Rng + ?Sized>(&self, ctx: u32, rng: &mut R) -> Result<Sequence> {
        match self.behavior {
            Behavior::Generator => self.gen.sample(ctx, 1.0, rng),
            Behavior::Nucleus { nucleus, .. } => nucleus_sample(self.gen, ctx, nucleus, rng),
            Behavior::Mcts { mcts, .. } => match mcts.mode {
                MctsMode::Conditional => Ok(self.decodes[ctx as usize].sequence.clone()),
                MctsMode::Unconditional => {
                    let mut y = Sequence::empty();
                    while !self.gen.space().is_terminal(y.tokens()) {
                        let pi = self.policy(ctx, y.tokens(), mcts)?;
                        y.push(sample_categorical(&pi, rng) as Token);
                    }
                    Ok(y)
                }
            },
        }
    }

    /// Log-density of the guided component alone.
    pub fn guided_log_density(&self, ctx: u32, y: &Sequence) -> Result<f64> {
        self.gen.space().check_context(ctx)?;
        self.gen.space().validate(y)?;
        match self.behavior {
            Behavior::Generator => self.gen.log_prob(ctx, y),
            Behavior::Nucleus { nucleus, .. } => nucleus_log_density(self.gen, ctx, y, nucleus),
            Behavior::Mcts { mcts, .. } => match mcts.mode {
                MctsMode::Conditional => {
                    let hit = self.decodes[ctx as usize].sequence == *y;
                    Ok(if hit { 0.0 } else { f64::NEG_INFINITY })
                }
                MctsMode::Unconditional => {
                    let mut total = 0.0;
                    for j in 0..y.len() {
                        let pi = self.policy(ctx, y.prefix(j), mcts)?[y.0[j] as usize];
                        if pi == 0.0 {
                            return Ok(f64::NEG_INFINITY);
                        }
                        total += pi.ln();
                    }
                    Ok(total)
                }
            },
        }
    }

    /// `log q̂(y | ctx)` with both branches evaluated.
    pub fn log_density(&self, ctx: u32, y: &Sequence) -> Result<f64> {
        let log_p = self.gen.log_prob(ctx, y)?;
        self.log_density_with(ctx, y, log_p)
    }

    fn log_density_with(&self, ctx: u32, y: &Sequence, log_p: f64) -> Result<f64> {
        let eps = self.behavior.epsilon();
        if eps >= 1.0 {
            return Ok(log_p);
        }
        Ok(log_mix(eps, log_p, 1.0 - eps, self.guided_log_density(ctx, y)?))
    }

    /// Draws `y ∼ q̂(· | ctx)` and returns its density and raw weight.
    pub fn draw<R: Rng + ?Sized>(&self, ctx: u32, rng: &mut R) -> Result<Draw> {
        self.gen.space().check_context(ctx)?;
        let eps = self.behavior.epsilon();
        let y = if eps >= 1.0 || rng.random::<f64>() < eps {
            self.gen.sample(ctx, 1.0, rng)?
        } else {
            self.guided_sample(ctx, rng)?
        };
        let log_p = self.gen.log_prob(ctx, &y)?;
        let log_qhat = self.log_density_with(ctx, &y, log_p)?;
        let score = self.disc.score(ctx, y.tokens());
        let w_raw = score * (log_p - log_qhat).exp();
        Ok(Draw { ctx, y, log_p, log_qhat, score, w_raw })
    }
}

/// Single draw from the mixture `spec` together with `q̂(y)` and the raw
/// importance weight.
pub fn mixture_sample_and_density<R: Rng + ?Sized>(
    gen: &TabularGenerator,
    disc: &PrefixDiscriminator,
    ctx: u32,
    spec: MixtureSpec,
    sigma: f64,
    mcts_cfg: Option<MctsConfig>,
    rng: &mut R,
) -> Result<(Sequence, f64, f64)> {
    let behavior = Behavior::from_spec(spec, sigma, mcts_cfg)?;
    let seed = rng.random();
    let sampler = BehaviorSampler::new(gen, disc, behavior, seed)?;
    let d = sampler.draw(ctx, rng)?;
    Ok((d.y, d.log_qhat.exp(), d.w_raw))
}

/// Density of the tree-search mixture at `y` for a recorded decode.
/// Conditional mode is a Dirac on the decoded sequence; unconditional mode
/// multiplies the visit distributions of the searches along `y`, reusing
/// the recorded roots and searching afresh where `y` leaves the decoded path.
pub fn mcts_mixture_density(
    gen: &TabularGenerator,
    disc: &PrefixDiscriminator,
    ctx: u32,
    seed: u64,
    y: &Sequence,
    epsilon: f64,
    decode: &DecodeOutput,
) -> Result<f64> {
    decode.check_tag(DecodeTag { ctx, seed })?;
    MixtureSpec::new(epsilon, GuidedKind::Mcts)?;
    let p = gen.log_prob(ctx, y)?.exp();
    let guided = match decode.config.mode {
        MctsMode::Conditional => {
            if decode.sequence == *y {
                1.0
            } else {
                0.0
            }
        }
        MctsMode::Unconditional => {
            let mut g = 1.0;
            for j in 0..y.len() {
                let recorded = decode.steps.get(j).filter(|s| s.prefix.tokens() == y.prefix(j));
                let pi = match recorded {
                    Some(step) => step.visit_dist(),
                    None => search_root(gen, disc, ctx, y.prefix(j), decode.config)?.visit_dist(),
                };
                g *= pi[y.0[j] as usize];
                if g == 0.0 {
                    break;
                }
            }
            g
        }
    };
    Ok(epsilon * p + (1.0 - epsilon) * guided)
}
