//! Output files: CSV tables, JSON manifests and checkpoints. Every file is
//! written to a temporary sibling and renamed into place, so a reader sees
//! either the complete file or nothing.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::exact::DynamicsRow;
use crate::metrics::{CurvePoint, BLEU_VARIANT};
use crate::models::{PrefixDiscriminator, TabularGenerator};
use crate::seqspace::SpaceConfig;
use crate::trainer::{IterRecord, TargetSpec};

pub const ITERS_SCHEMA: &str = "gcnlab.iters/v1";
pub const EXACT_SCHEMA: &str = "gcnlab.exact_dynamics/v1";
pub const CURVES_SCHEMA: &str = "gcnlab.curves/v1";
pub const TRACE_SCHEMA: &str = "gcnlab.mcts_trace/v1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Shortest round-trip formatting, switching to exponent notation for very
/// small or large magnitudes.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("cannot write into {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn iters_csv(records: &[IterRecord]) -> String {
    let mut s = format!("# schema: {ITERS_SCHEMA}\niter,kl_exact,tv,z_est,eta_mc,grad_norm,weight_max,weight_ess,skipped\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.iter,
            fmt_f64(r.kl_exact),
            fmt_f64(r.tv),
            fmt_f64(r.z_est),
            fmt_f64(r.eta_mc),
            fmt_f64(r.grad_norm),
            fmt_f64(r.weight_max),
            fmt_f64(r.weight_ess),
            u8::from(r.skipped)
        );
    }
    s
}

pub fn exact_csv(rows: &[(u32, DynamicsRow)]) -> String {
    let mut s = format!("# schema: {EXACT_SCHEMA}\nctx,t,z_t,kl,delta_t,eta,bound,zhat_spread\n");
    for (ctx, r) in rows {
        let vals = [r.z_t, r.kl, r.delta_t, r.eta, r.bound, r.zhat_spread].map(fmt_f64);
        let _ = writeln!(s, "{ctx},{},{}", r.t, vals.join(","));
    }
    s
}

pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut s = format!("# schema: {CURVES_SCHEMA}\n# bleu: {BLEU_VARIANT}\ntemperature,neg_bleu,self_bleu\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", fmt_f64(p.temperature), fmt_f64(p.neg_bleu), fmt_f64(p.self_bleu));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Diverged,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact: String,
    pub version: String,
    pub command: String,
    /// The full run configuration in config-file syntax.
    pub config: String,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub wall_ms: f64,
    pub outputs: Vec<PathBuf>,
    pub status: Termination,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub message: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub violations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: String,
    pub space: SpaceConfig,
    pub target: TargetSpec,
    pub seed: u64,
    pub generator: TabularGenerator,
    pub discriminator: PrefixDiscriminator,
}

impl Checkpoint {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
        let mut ck: Checkpoint =
            serde_json::from_str(&text).with_context(|| format!("malformed checkpoint {}", path.display()))?;
        if ck.version != CHECKPOINT_VERSION {
            anyhow::bail!("checkpoint {} has version {}, expected {CHECKPOINT_VERSION}", path.display(), ck.version);
        }
        if *ck.generator.space() != ck.space || *ck.discriminator.space() != ck.space {
            anyhow::bail!("checkpoint {} mixes model spaces", path.display());
        }
        ck.generator.pad_contexts();
        ck.discriminator.pad_contexts();
        ck.generator.validate()?;
        ck.discriminator.validate()?;
        Ok(ck)
    }
}
