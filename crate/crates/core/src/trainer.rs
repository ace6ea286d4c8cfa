//! The alternating discriminator / generator training loop.
//!
//! Each iteration trains the prefix discriminator on fresh real and
//! generated batches, draws a batch from the behaviour distribution `q̂`
//! built on the updated discriminator, and takes one importance-weighted
//! log-likelihood step on the generator. Exact divergences are recorded
//! after every step by enumerating the space.
//!
//! Randomness is split into independent streams keyed by
//! `(seed, iteration, phase, item)`, so results do not depend on how batch
//! items are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::eta_from_samples;
use crate::math::{argmax, mix_seed};
use crate::models::{GenStep, PrefixDiscriminator, TabularGenerator};
use crate::sampling::{Behavior, BehaviorSampler, Draw, MctsConfig, NucleusSpec};
use crate::seqspace::{kl_divergence, total_variation, ExactDist, Sequence, SpaceConfig};

const PHASE_REAL: u64 = 1;
const PHASE_FAKE: u64 = 2;
const PHASE_QHAT: u64 = 3;
const PHASE_INIT: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Self-normalized cooperative weights.
    Gcn,
    /// Raw weighted sum, no normalization.
    Gan,
    /// Raw weighted sum with a linear learning-rate schedule.
    GanScheduler,
    /// Weights times `1 / (1 - D)`, clipped, then normalized.
    Maligan,
    /// Target `∝ exp(D)`: weights `exp(D) / q̂`, normalized.
    ExpD,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Gcn, Variant::Gan, Variant::GanScheduler, Variant::Maligan, Variant::ExpD];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gcn => "gcn",
            Variant::Gan => "gan",
            Variant::GanScheduler => "gan_scheduler",
            Variant::Maligan => "maligan",
            Variant::ExpD => "exp_d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }

    fn normalizes(self) -> bool {
        !matches!(self, Variant::Gan | Variant::GanScheduler)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QhatKind {
    P,
    Nucleus,
    Mcts,
}

impl QhatKind {
    pub fn name(self) -> &'static str {
        match self {
            QhatKind::P => "p",
            QhatKind::Nucleus => "nucleus",
            QhatKind::Mcts => "mcts",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "p" => Ok(QhatKind::P),
            "nucleus" => Ok(QhatKind::Nucleus),
            "mcts" => Ok(QhatKind::Mcts),
            _ => Err(Error::Config(format!("unknown qhat kind '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    None,
    Linear { start: f64, end: f64 },
}

/// `base` scaled by the schedule at `iter` out of `total`.
pub fn scheduler_lr(base: f64, iter: usize, total: usize, kind: Scheduler) -> f64 {
    match kind {
        Scheduler::None => base,
        Scheduler::Linear { start, end } => {
            let frac = if total == 0 { 0.0 } else { iter as f64 / total as f64 };
            base * (start + (end - start) * frac)
        }
    }
}

/// How the data distribution `p_d` is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TargetSpec {
    /// Per context, a symmetric Dirichlet draw over the enumerated space.
    Dirichlet { alpha: f64, seed: u64 },
    /// The sequence distribution of a random tabular generator.
    Hidden { scale: f64, seed: u64 },
    /// Explicit probabilities in enumeration order, one row per context
    /// (a single row is shared by all contexts).
    Table { probs: Vec<Vec<f64>> },
}

impl TargetSpec {
    pub fn build(&self, space: &SpaceConfig) -> Result<Vec<ExactDist>> {
        space.check_budget()?;
        let n = space.space_size() as usize;
        let mut out = Vec::new();
        match self {
            TargetSpec::Dirichlet { alpha, seed } => {
                let gamma = Gamma::new(*alpha, 1.0)
                    .map_err(|e| Error::Config(format!("invalid dirichlet alpha {alpha}: {e}")))?;
                for ctx in space.contexts() {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[*seed, ctx as u64]));
                    let w: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
                    if w.iter().sum::<f64>() <= 0.0 {
                        return Err(Error::DegenerateTarget);
                    }
                    out.push(ExactDist::from_probs(&w)?);
                }
            }
            TargetSpec::Hidden { scale, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let gen = TabularGenerator::random(*space, *scale, &mut rng)?;
                for ctx in space.contexts() {
                    out.push(gen.exact_dist(ctx)?);
                }
            }
            TargetSpec::Table { probs } => {
                let rows = space.context_count() as usize;
                if probs.len() != 1 && probs.len() != rows {
                    return Err(Error::Config(format!("target table needs 1 or {rows} rows, got {}", probs.len())));
                }
                for ctx in 0..rows {
                    let row = &probs[if probs.len() == 1 { 0 } else { ctx }];
                    if row.len() != n {
                        return Err(Error::Config(format!(
                            "target table row has {} entries, space has {n} sequences",
                            row.len()
                        )));
                    }
                    out.push(ExactDist::from_probs(row)?);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitSpec {
    /// All-zero logits: uniform next-token choice at every prefix.
    Uniform,
    Random { scale: f64 },
    /// Start at the data distribution.
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub space: SpaceConfig,
    pub target: TargetSpec,
    pub init: InitSpec,
    pub variant: Variant,
    pub qhat: QhatKind,
    pub epsilon: f64,
    pub sigma: f64,
    pub mcts: MctsConfig,
    pub batch_size: usize,
    pub iters: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub disc_steps: usize,
    pub seed: u64,
    pub scheduler: Scheduler,
    /// Upper bound on the `1 / (1 - D)` factor of the maligan variant.
    pub maligan_clip: f64,
    /// Abort once KL exceeds this multiple of `max(initial KL, floor)`.
    pub divergence_factor: f64,
    pub divergence_floor: f64,
}

impl TrainConfig {
    /// Desk-scale defaults on the given space and target.
    pub fn new(space: SpaceConfig, target: TargetSpec) -> Self {
        Self {
            space,
            target,
            init: InitSpec::Uniform,
            variant: Variant::Gcn,
            qhat: QhatKind::P,
            epsilon: 0.1,
            sigma: 0.1,
            mcts: MctsConfig::default(),
            batch_size: 512,
            iters: 200,
            lr_gen: 0.1,
            lr_disc: 0.002,
            disc_steps: 1,
            seed: 0,
            scheduler: Scheduler::None,
            maligan_clip: 10.0,
            divergence_factor: 10.0,
            divergence_floor: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.space.check_budget()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("lr_gen", self.lr_gen)?;
        positive("lr_disc", self.lr_disc)?;
        positive("maligan_clip", self.maligan_clip)?;
        positive("divergence_factor", self.divergence_factor)?;
        positive("divergence_floor", self.divergence_floor)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.disc_steps == 0 {
            return Err(Error::Config("disc_steps must be >= 1".into()));
        }
        match (self.variant, self.scheduler) {
            (Variant::GanScheduler, Scheduler::None) => {
                return Err(Error::Config("variant gan_scheduler needs a linear scheduler".into()))
            }
            (Variant::Gcn, Scheduler::Linear { .. }) => {
                return Err(Error::Config("variant gcn is self-normalized and takes no scheduler".into()))
            }
            _ => {}
        }
        if let Scheduler::Linear { start, end } = self.scheduler {
            if !(start >= 0.0 && end >= 0.0 && start.is_finite() && end.is_finite()) {
                return Err(Error::Config("scheduler endpoints must be finite and >= 0".into()));
            }
        }
        if let InitSpec::Random { scale } = self.init {
            positive("init scale", scale)?;
        }
        self.behavior()?;
        Ok(())
    }

    pub fn behavior(&self) -> Result<Behavior> {
        Ok(match self.qhat {
            QhatKind::P => Behavior::Generator,
            QhatKind::Nucleus => {
                check_epsilon(self.epsilon)?;
                Behavior::Nucleus { epsilon: self.epsilon, nucleus: NucleusSpec::new(self.sigma)? }
            }
            QhatKind::Mcts => {
                check_epsilon(self.epsilon)?;
                self.mcts.validate()?;
                Behavior::Mcts { epsilon: self.epsilon, mcts: self.mcts }
            }
        })
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if eps > 0.0 && eps <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("epsilon must lie in (0, 1], got {eps}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub kl_exact: f64,
    pub tv: f64,
    /// Mean raw weight, an estimate of the partition `Z_t`.
    pub z_est: f64,
    pub eta_mc: f64,
    pub grad_norm: f64,
    /// Largest normalized weight in the batch.
    pub weight_max: f64,
    pub weight_ess: f64,
    /// Generator step skipped because every weight was zero.
    pub skipped: bool,
    pub wall_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub initial_kl: f64,
    pub records: Vec<IterRecord>,
    pub status: RunStatus,
    pub generator: TabularGenerator,
    pub discriminator: PrefixDiscriminator,
    pub target: Vec<ExactDist>,
}

impl RunRecord {
    pub fn final_kl(&self) -> f64 {
        self.records.last().map_or(self.initial_kl, |r| r.kl_exact)
    }
}

/// Knobs that are not part of a run's configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    /// Constant multiplying every discriminator output that enters the
    /// generator weights (the discriminator itself is untouched).
    pub weight_scale: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { weight_scale: 1.0 }
    }
}

/// Conditional KL and TV averaged over uniformly drawn contexts, plus the
/// generator's modal sequence of context 0 (lexicographically first on ties).
pub fn evaluate_checkpoint(gen: &TabularGenerator, p_d: &[ExactDist], space: &SpaceConfig) -> Result<(f64, f64, Sequence)> {
    if p_d.len() != space.context_count() as usize {
        return Err(Error::Precondition(format!(
            "need {} target distributions, got {}",
            space.context_count(),
            p_d.len()
        )));
    }
    let seqs = space.enumerate()?;
    let mut kl = 0.0;
    let mut tv = 0.0;
    let mut modal = None;
    for ctx in space.contexts() {
        let p = gen.exact_dist(ctx)?;
        kl += kl_divergence(&p_d[ctx as usize], &p)?;
        tv += total_variation(&p_d[ctx as usize], &p)?;
        if modal.is_none() {
            modal = Some(seqs[argmax(&p.probs())].clone());
        }
    }
    let c = space.context_count() as f64;
    Ok((kl / c, tv / c, modal.expect("at least one context")))
}

fn stream(seed: u64, iter: usize, phase: u64, item: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, iter as u64, phase, item as u64]))
}

fn draw_context<R: Rng + ?Sized>(space: &SpaceConfig, rng: &mut R) -> u32 {
    rng.random_range(0..space.context_count())
}

/// The per-variant weights and whether they are self-normalized.
pub fn variant_weights(variant: Variant, draws: &[Draw], maligan_clip: f64, weight_scale: f64) -> (Vec<f64>, bool) {
    let w = draws
        .iter()
        .map(|d| match variant {
            Variant::Gcn | Variant::Gan | Variant::GanScheduler => weight_scale * d.w_raw,
            Variant::Maligan => weight_scale * d.w_raw * (1.0 / (1.0 - d.score)).min(maligan_clip),
            Variant::ExpD => (weight_scale * d.score - d.log_qhat).exp(),
        })
        .collect();
    (w, variant.normalizes())
}

fn ess(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

pub fn train(cfg: &TrainConfig) -> Result<RunRecord> {
    train_with(cfg, TrainOptions::default())
}

pub fn train_with(cfg: &TrainConfig, opts: TrainOptions) -> Result<RunRecord> {
    cfg.validate()?;
    let space = cfg.space;
    let target = cfg.target.build(&space)?;
    let seqs = space.enumerate()?;
    let samplers: Vec<_> = target.iter().map(|d| d.sampler()).collect();
    let behavior = cfg.behavior()?;

    let mut gen = match cfg.init {
        InitSpec::Uniform => TabularGenerator::new(space),
        InitSpec::Random { scale } => TabularGenerator::random(space, scale, &mut stream(cfg.seed, 0, PHASE_INIT, 0))?,
        InitSpec::Target => TabularGenerator::from_dists(space, &target)?,
    };
    let mut disc = PrefixDiscriminator::new(space);
    let (initial_kl, _, _) = evaluate_checkpoint(&gen, &target, &space)?;
    let threshold = cfg.divergence_factor * initial_kl.max(cfg.divergence_floor);
    let m = cfg.batch_size;

    let mut records = Vec::with_capacity(cfg.iters);
    let mut status = RunStatus::Completed;
    for t in 1..=cfg.iters {
        let started = std::time::Instant::now();

        // Discriminator phase on fresh real and generated batches.
        let reals: Vec<(u32, Sequence)> = (0..m)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(cfg.seed, t, PHASE_REAL, i);
                let ctx = draw_context(&space, &mut rng);
                (ctx, seqs[samplers[ctx as usize].sample(&mut rng)].clone())
            })
            .collect();
        let fakes: Vec<(u32, Sequence)> = (0..m)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(cfg.seed, t, PHASE_FAKE, i);
                let ctx = draw_context(&space, &mut rng);
                gen.sample(ctx, 1.0, &mut rng).map(|y| (ctx, y))
            })
            .collect::<Result<_>>()?;
        for _ in 0..cfg.disc_steps {
            disc.update(&reals, &fakes, cfg.lr_disc)?;
        }
        let real_scores: Vec<f64> = reals.iter().map(|(c, y)| disc.score(*c, y.tokens())).collect();
        let fake_scores: Vec<f64> = fakes.iter().map(|(c, y)| disc.score(*c, y.tokens())).collect();
        let eta_mc = eta_from_samples(&real_scores, &fake_scores);

        // Generator phase on behaviour samples.
        let sampler = BehaviorSampler::new(&gen, &disc, behavior, mix_seed(&[cfg.seed, t as u64, PHASE_QHAT]))?;
        let draws: Vec<Draw> = (0..m)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(cfg.seed, t, PHASE_QHAT, i);
                let ctx = draw_context(&space, &mut rng);
                sampler.draw(ctx, &mut rng)
            })
            .collect::<Result<_>>()?;
        drop(sampler);
        let z_est = draws.iter().map(|d| d.w_raw).sum::<f64>() / m as f64;
        let (weights, normalize) = variant_weights(cfg.variant, &draws, cfg.maligan_clip, opts.weight_scale);
        let lr = match cfg.variant {
            Variant::GanScheduler => scheduler_lr(cfg.lr_gen, t - 1, cfg.iters, cfg.scheduler),
            _ => cfg.lr_gen,
        };
        let batch: Vec<(u32, Sequence)> = draws.iter().map(|d| (d.ctx, d.y.clone())).collect();
        let wsum: f64 = weights.iter().sum();
        let skipped = normalize && wsum <= 0.0;
        let step = if skipped {
            GenStep { step_norm: 0.0, weight_sum: 0.0 }
        } else {
            gen.update_weighted(&batch, &weights, lr, normalize)?
        };
        let weight_max = if wsum > 0.0 { weights.iter().copied().fold(0.0, f64::max) / wsum } else { 0.0 };

        let (kl_exact, tv, _) = evaluate_checkpoint(&gen, &target, &space)?;
        records.push(IterRecord {
            iter: t,
            kl_exact,
            tv,
            z_est,
            eta_mc,
            grad_norm: step.step_norm,
            weight_max,
            weight_ess: ess(&weights),
            skipped,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if !kl_exact.is_finite() || kl_exact > threshold {
            status = RunStatus::Diverged;
            break;
        }
    }
    Ok(RunRecord { initial_kl, records, status, generator: gen, discriminator: disc, target })
}
