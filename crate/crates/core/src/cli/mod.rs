//! Command implementations behind the `gcnlab` binary.
//!
//! Exit codes: 0 success, 1 error, 2 a training run that tripped the
//! divergence abort.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::exact::iterate;
use crate::math::mix_seed;
use crate::metrics::{temperature_curve, BleuSpec};
use crate::sampling::{mcts_decode, DecodeOutput};
use crate::trainer::{train, RunStatus};
pub use config::{ExactConfig, P0Spec, RunConfig};
pub use output::{Checkpoint, RunManifest, Termination};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

pub const DEFAULT_TEMPS: [f64; 5] = [0.5, 0.7, 1.0, 1.3, 1.6];

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

pub fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    RunConfig::parse(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

struct ManifestDraft {
    command: &'static str,
    config: String,
    seed: u64,
    started: u128,
    clock: Instant,
}

impl ManifestDraft {
    fn new(command: &'static str, cfg: &RunConfig) -> Self {
        Self { command, config: cfg.to_kv_string(), seed: cfg.train.seed, started: now_ms(), clock: Instant::now() }
    }

    fn finish(self, outputs: Vec<PathBuf>, status: Termination, message: Option<String>, violations: Vec<String>) -> RunManifest {
        RunManifest {
            artifact: "gcnlab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            config: self.config,
            seed: self.seed,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            wall_ms: self.clock.elapsed().as_secs_f64() * 1e3,
            outputs,
            status,
            message,
            violations,
        }
    }
}

/// Trains from a config file; writes `iters.csv`, `checkpoint.json` and
/// `manifest.json` into `out`.
pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<i32> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    ensure_dir(out)?;
    let draft = ManifestDraft::new("train", &cfg);
    let manifest_path = out.join("manifest.json");
    let run = match train(&cfg.train) {
        Ok(run) => run,
        Err(e) => {
            let m = draft.finish(Vec::new(), Termination::Error, Some(e.to_string()), Vec::new());
            output::write_json(&manifest_path, &m)?;
            return Err(e.into());
        }
    };

    let iters = out.join("iters.csv");
    output::atomic_write(&iters, output::iters_csv(&run.records).as_bytes())?;
    let ck_path = out.join("checkpoint.json");
    let ck = Checkpoint {
        version: output::CHECKPOINT_VERSION,
        config: cfg.to_kv_string(),
        space: cfg.train.space,
        target: cfg.train.target.clone(),
        seed: cfg.train.seed,
        generator: run.generator.clone(),
        discriminator: run.discriminator.clone(),
    };
    output::write_json(&ck_path, &ck)?;

    let (status, code, message) = match run.status {
        RunStatus::Completed => (Termination::Completed, EXIT_OK, None),
        RunStatus::Diverged => (
            Termination::Diverged,
            EXIT_DIVERGED,
            Some(format!("KL {} exceeded the divergence threshold after {} iterations", run.final_kl(), run.records.len())),
        ),
    };
    let m = draft.finish(vec![iters, ck_path, manifest_path.clone()], status, message, Vec::new());
    output::write_json(&manifest_path, &m)?;
    Ok(code)
}

/// Iterates the exact cooperative update for every context; writes
/// `exact_dynamics.csv` and `manifest.json`.
pub fn cmd_exact(config: &Path, out: &Path) -> anyhow::Result<i32> {
    let cfg = load_config(config)?;
    let space = cfg.train.space;
    let p_d = cfg.train.target.build(&space)?;
    let p0 = cfg.exact.initial(&space, &p_d)?;
    ensure_dir(out)?;
    let draft = ManifestDraft::new("exact", &cfg);

    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for ctx in space.contexts() {
        let dyns = iterate(&p_d[ctx as usize], &p0[ctx as usize], cfg.exact.steps, cfg.exact.stop_kl)
            .with_context(|| format!("context {ctx}: p_0 must be positive wherever p_d is (support condition for convergence)"))?;
        rows.extend(dyns.rows.into_iter().map(|r| (ctx, r)));
        violations.extend(dyns.violations.into_iter().map(|v| format!("ctx {ctx}: {v}")));
    }
    for v in &violations {
        eprintln!("warning: invariant violated: {v}");
    }
    let csv = out.join("exact_dynamics.csv");
    output::atomic_write(&csv, output::exact_csv(&rows).as_bytes())?;
    let manifest_path = out.join("manifest.json");
    let m = draft.finish(vec![csv, manifest_path.clone()], Termination::Completed, None, violations);
    output::write_json(&manifest_path, &m)?;
    Ok(EXIT_OK)
}

#[derive(Clone, Debug)]
pub struct CurvesArgs {
    pub temps: Vec<f64>,
    pub context: u32,
    pub samples: usize,
    pub references: usize,
    pub seed: Option<u64>,
}

impl Default for CurvesArgs {
    fn default() -> Self {
        Self { temps: DEFAULT_TEMPS.to_vec(), context: 0, samples: 200, references: 200, seed: None }
    }
}

/// Temperature sweep of a trained generator; writes `curves.csv`.
pub fn cmd_curves(checkpoint: &Path, out: &Path, args: &CurvesArgs) -> anyhow::Result<i32> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.space.check_context(args.context)?;
    let p_d = ck.target.build(&ck.space)?;
    let seqs = ck.space.enumerate()?;
    let seed = args.seed.unwrap_or(ck.seed);
    let mut ref_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1]));
    let sampler = p_d[args.context as usize].sampler();
    let refs: Vec<_> = (0..args.references).map(|_| seqs[sampler.sample(&mut ref_rng)].clone()).collect();

    let spec = BleuSpec::new(4, Some(ck.space.eos()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 2]));
    let points = temperature_curve(&ck.generator, args.context, &refs, &args.temps, args.samples, spec, &mut rng)?;
    ensure_dir(out)?;
    output::atomic_write(&out.join("curves.csv"), output::curves_csv(&points).as_bytes())?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct TraceDump<'a> {
    schema: &'static str,
    #[serde(flatten)]
    decode: &'a DecodeOutput,
}

/// One tree-search decode with per-step root statistics, as JSON.
pub fn cmd_dump_mcts(checkpoint: &Path, context: u32, out: &Path, seed: Option<u64>) -> anyhow::Result<i32> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = RunConfig::parse(&ck.config).context("checkpoint config")?;
    let seed = seed.unwrap_or(ck.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decode = mcts_decode(&ck.generator, &ck.discriminator, context, cfg.train.mcts, seed, &mut rng)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    output::write_json(out, &TraceDump { schema: output::TRACE_SCHEMA, decode: &decode })?;
    Ok(EXIT_OK)
}
