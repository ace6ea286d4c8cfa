//! WebAssembly bindings for the gcnlab demo page. Every entry point returns
//! a JSON string; the plain-Rust `*_json` functions behind them are what the
//! native tests exercise.

use gcnlab::exact::iterate;
use gcnlab::math::mix_seed;
use gcnlab::models::{PrefixDiscriminator, TabularGenerator};
use gcnlab::sampling::{mcts_decode, Behavior, BehaviorSampler, MctsConfig, MctsMode, NucleusSpec};
use gcnlab::seqspace::{ExactDist, Sequence, SpaceConfig};
use gcnlab::trainer::TargetSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest space the page will enumerate.
const MAX_SEQUENCES: u128 = 4096;

fn parse_probs(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| format!("'{}' is not a number", x.trim())))
        .collect()
}

/// `a`, `b`, ... for ordinary tokens and `$` for EOS.
fn label(space: &SpaceConfig, y: &Sequence) -> String {
    y.tokens()
        .iter()
        .map(|&t| if t == space.eos() { '$' } else { char::from(b'a' + t as u8) })
        .collect()
}

/// A seeded target, a random generator and the discriminator that is
/// optimal for them on every prefix.
struct Demo {
    space: SpaceConfig,
    seqs: Vec<Sequence>,
    gen: TabularGenerator,
    disc: PrefixDiscriminator,
}

impl Demo {
    fn new(vocab: u32, max_len: usize, seed: u64) -> Result<Self, String> {
        if !(1..=26).contains(&vocab) {
            return Err("vocabulary must have 1..=26 tokens".into());
        }
        let space = SpaceConfig::new(vocab, max_len, 0).map_err(|e| e.to_string())?;
        if space.space_size() > MAX_SEQUENCES {
            return Err(format!("{} sequences is too many for the page (limit {MAX_SEQUENCES})", space.space_size()));
        }
        let seqs = space.enumerate().map_err(|e| e.to_string())?;
        let p_d = TargetSpec::Hidden { scale: 1.5, seed }.build(&space).map_err(|e| e.to_string())?.remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1]));
        let gen = TabularGenerator::random(space, 1.0, &mut rng).map_err(|e| e.to_string())?;
        let p = gen.exact_dist(0).map_err(|e| e.to_string())?;

        let mut disc = PrefixDiscriminator::new(space);
        for pre in space.decision_prefixes().map_err(|e| e.to_string())?.iter().chain(&seqs) {
            if pre.is_empty() {
                continue;
            }
            let (mut md, mut mp) = (0.0, 0.0);
            for (i, y) in seqs.iter().enumerate() {
                if y.tokens().starts_with(pre.tokens()) {
                    md += p_d.prob(i);
                    mp += p.prob(i);
                }
            }
            disc.set_logit(0, pre.tokens(), (md / mp).ln()).map_err(|e| e.to_string())?;
        }
        Ok(Self { space, seqs, gen, disc })
    }
}

#[derive(Serialize)]
struct ExactRow {
    t: usize,
    kl: f64,
    z_t: f64,
    delta_t: f64,
    bound: f64,
}

#[derive(Serialize)]
struct ExactOut {
    rows: Vec<ExactRow>,
    final_dist: Vec<f64>,
    violations: Vec<String>,
}

/// Exact cooperative iteration from `p0` toward `p_d` (comma-separated
/// probabilities, normalized here).
pub fn exact_dynamics_json(p_d: &str, p0: &str, steps: usize) -> Result<String, String> {
    let p_d = ExactDist::from_probs(&parse_probs(p_d)?).map_err(|e| e.to_string())?;
    let p0 = ExactDist::from_probs(&parse_probs(p0)?).map_err(|e| e.to_string())?;
    let dyns = iterate(&p_d, &p0, steps.min(500), 0.0).map_err(|e| e.to_string())?;
    let out = ExactOut {
        rows: dyns
            .rows
            .iter()
            .map(|r| ExactRow { t: r.t, kl: r.kl, z_t: r.z_t, delta_t: r.delta_t, bound: r.bound })
            .collect(),
        final_dist: dyns.final_dist.probs(),
        violations: dyns.violations,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct MixtureRow {
    seq: String,
    p: f64,
    d: f64,
    /// Normalized cooperative target `p·D / Z`.
    target: f64,
    qhat: f64,
    freq: f64,
}

#[derive(Serialize)]
struct MixtureOut {
    rows: Vec<MixtureRow>,
    z: f64,
    z_est: f64,
    ess: f64,
    max_weight_over_bound: f64,
}

/// Draws from the nucleus mixture `ε·p + (1-ε)·nucleus_σ(p)` and compares
/// the empirical frequencies and weights with their enumerated values.
pub fn mixture_json(vocab: u32, max_len: usize, seed: u64, epsilon: f64, sigma: f64, draws: usize) -> Result<String, String> {
    let demo = Demo::new(vocab, max_len, seed)?;
    let nucleus = NucleusSpec::new(sigma).map_err(|e| e.to_string())?;
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err("epsilon must lie in (0, 1]".into());
    }
    let draws = draws.clamp(1, 200_000);
    let sampler = BehaviorSampler::new(&demo.gen, &demo.disc, Behavior::Nucleus { epsilon, nucleus }, seed)
        .map_err(|e| e.to_string())?;

    let mut counts = vec![0usize; demo.seqs.len()];
    let mut weights = Vec::with_capacity(draws);
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 2]));
    for _ in 0..draws {
        let d = sampler.draw(0, &mut rng).map_err(|e| e.to_string())?;
        let i = demo.seqs.iter().position(|y| *y == d.y).expect("draws lie in the space");
        counts[i] += 1;
        worst = worst.max(d.w_raw * epsilon / d.score);
        weights.push(d.w_raw);
    }
    let z_est = weights.iter().sum::<f64>() / draws as f64;
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    let ess = if sq > 0.0 { weights.iter().sum::<f64>().powi(2) / sq } else { 0.0 };

    let p = demo.gen.exact_dist(0).map_err(|e| e.to_string())?;
    let mut rows = Vec::with_capacity(demo.seqs.len());
    let mut z = 0.0;
    for (i, y) in demo.seqs.iter().enumerate() {
        let d = demo.disc.score(0, y.tokens());
        z += p.prob(i) * d;
        rows.push(MixtureRow {
            seq: label(&demo.space, y),
            p: p.prob(i),
            d,
            target: p.prob(i) * d,
            qhat: sampler.log_density(0, y).map_err(|e| e.to_string())?.exp(),
            freq: counts[i] as f64 / draws as f64,
        });
    }
    for r in &mut rows {
        r.target /= z;
    }
    serde_json::to_string(&MixtureOut { rows, z, z_est, ess, max_weight_over_bound: worst }).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct StepOut {
    prefix: String,
    chosen: String,
    /// Indexed by token; the last entry is EOS.
    visits: Vec<u32>,
    values: Vec<f64>,
    priors: Vec<f64>,
}

#[derive(Serialize)]
struct MctsOut {
    sequence: String,
    d: f64,
    best: String,
    best_d: f64,
    steps: Vec<StepOut>,
}

/// One conditional tree-search decode with the root statistics of every
/// emitted position, next to the brute-force best sequence under `D`.
pub fn mcts_json(vocab: u32, max_len: usize, seed: u64, c_puct: f64, rounds: u32, sigma: f64) -> Result<String, String> {
    let demo = Demo::new(vocab, max_len, seed)?;
    let cfg = MctsConfig { c_puct, rounds: rounds.min(10_000), sigma, mode: MctsMode::Conditional };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = mcts_decode(&demo.gen, &demo.disc, 0, cfg, seed, &mut rng).map_err(|e| e.to_string())?;
    let best = demo
        .seqs
        .iter()
        .max_by(|a, b| demo.disc.score(0, a.tokens()).total_cmp(&demo.disc.score(0, b.tokens())))
        .expect("spaces are non-empty");
    let steps = out
        .steps
        .iter()
        .map(|s| StepOut {
            prefix: label(&demo.space, &s.prefix),
            chosen: s.chosen.map(|t| label(&demo.space, &Sequence(vec![t]))).unwrap_or_default(),
            visits: s.visits.clone(),
            values: s.values.clone(),
            priors: s.priors.clone(),
        })
        .collect();
    let res = MctsOut {
        sequence: label(&demo.space, &out.sequence),
        d: demo.disc.score(0, out.sequence.tokens()),
        best: label(&demo.space, best),
        best_d: demo.disc.score(0, best.tokens()),
        steps,
    };
    serde_json::to_string(&res).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn exact_dynamics(p_d: &str, p0: &str, steps: u32) -> Result<String, JsError> {
    exact_dynamics_json(p_d, p0, steps as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn mixture(vocab: u32, max_len: u32, seed: u32, epsilon: f64, sigma: f64, draws: u32) -> Result<String, JsError> {
    mixture_json(vocab, max_len as usize, seed as u64, epsilon, sigma, draws as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn mcts(vocab: u32, max_len: u32, seed: u32, c_puct: f64, rounds: u32, sigma: f64) -> Result<String, JsError> {
    mcts_json(vocab, max_len as usize, seed as u64, c_puct, rounds, sigma).map_err(|e| JsError::new(&e))
}
