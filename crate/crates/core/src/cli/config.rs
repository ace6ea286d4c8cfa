//! Flat `section.key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be known and
//! apply to the selected kinds; anything else is an error rather than a
//! silently ignored typo. [`RunConfig::to_kv_string`] writes every setting
//! explicitly, and parsing that text yields the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::output::fmt_f64;
use crate::error::{Error, Result};
use crate::sampling::{MctsConfig, MctsMode};
use crate::seqspace::{ExactDist, SpaceConfig};
use crate::trainer::{InitSpec, QhatKind, Scheduler, TargetSpec, TrainConfig, Variant};

/// Starting distribution for the exact dynamics.
#[derive(Clone, Debug, PartialEq)]
pub enum P0Spec {
    /// Uniform over the enumerated sequences.
    Uniform,
    Dirichlet { alpha: f64, seed: u64 },
    Table { probs: Vec<Vec<f64>> },
    /// Start at the data distribution (a fixed point).
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactConfig {
    pub steps: usize,
    pub p0: P0Spec,
    /// Stop once `KL(p_d || p_t)` falls below this.
    pub stop_kl: f64,
}

impl Default for ExactConfig {
    fn default() -> Self {
        Self { steps: 50, p0: P0Spec::Uniform, stop_kl: 1e-15 }
    }
}

impl ExactConfig {
    pub fn initial(&self, space: &SpaceConfig, p_d: &[ExactDist]) -> Result<Vec<ExactDist>> {
        let n = space.space_size() as usize;
        Ok(match &self.p0 {
            P0Spec::Uniform => vec![ExactDist::uniform(n)?; p_d.len()],
            P0Spec::Dirichlet { alpha, seed } => TargetSpec::Dirichlet { alpha: *alpha, seed: *seed }.build(space)?,
            P0Spec::Table { probs } => TargetSpec::Table { probs: probs.clone() }.build(space)?,
            P0Spec::Target => p_d.to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub exact: ExactConfig,
}

struct Kv {
    entries: BTreeMap<String, (usize, String)>,
}

impl Kv {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn get<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: cannot parse '{v}' for {key}"))),
        }
    }

    fn or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Config(format!("missing required key {key}")))
    }

    fn string(&mut self, key: &str) -> Option<String> {
        self.take(key).map(|(_, v)| v)
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown or inapplicable key '{k}'"))),
        }
    }
}

/// Rows separated by `;`, entries by `,`.
fn parse_table(text: &str) -> Result<Vec<Vec<f64>>> {
    text.split(';')
        .map(|row| {
            row.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad probability '{x}'"))))
                .collect()
        })
        .collect()
}

fn format_table(rows: &[Vec<f64>]) -> String {
    rows.iter()
        .map(|r| r.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_scheduler(text: &str) -> Result<Scheduler> {
    if text == "none" {
        return Ok(Scheduler::None);
    }
    let bad = || Error::Config(format!("scheduler must be 'none' or 'linear:START,END', got '{text}'"));
    let rest = text.strip_prefix("linear:").ok_or_else(bad)?;
    let (a, b) = rest.split_once(',').ok_or_else(bad)?;
    Ok(Scheduler::Linear {
        start: a.trim().parse().map_err(|_| bad())?,
        end: b.trim().parse().map_err(|_| bad())?,
    })
}

fn parse_mode(text: &str) -> Result<MctsMode> {
    match text {
        "conditional" => Ok(MctsMode::Conditional),
        "unconditional" => Ok(MctsMode::Unconditional),
        _ => Err(Error::Config(format!("unknown mcts mode '{text}'"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Kv::parse(text)?;
        let space = SpaceConfig::new(
            kv.required("space.vocab_size")?,
            kv.required("space.max_len")?,
            kv.or("space.num_contexts", 0)?,
        )?;

        let target = match kv.string("target.kind").as_deref() {
            Some("dirichlet") => TargetSpec::Dirichlet { alpha: kv.or("target.alpha", 1.0)?, seed: kv.or("target.seed", 0)? },
            Some("hidden") => TargetSpec::Hidden { scale: kv.or("target.scale", 1.0)?, seed: kv.or("target.seed", 0)? },
            Some("table") => {
                let probs = kv.string("target.probs").ok_or_else(|| Error::Config("target.kind=table needs target.probs".into()))?;
                TargetSpec::Table { probs: parse_table(&probs)? }
            }
            Some(other) => return Err(Error::Config(format!("unknown target.kind '{other}'"))),
            None => return Err(Error::Config("missing required key target.kind".into())),
        };

        let mut t = TrainConfig::new(space, target);
        t.init = match kv.string("init.kind").as_deref() {
            None | Some("uniform") => InitSpec::Uniform,
            Some("random") => InitSpec::Random { scale: kv.or("init.scale", 1.0)? },
            Some("target") => InitSpec::Target,
            Some(other) => return Err(Error::Config(format!("unknown init.kind '{other}'"))),
        };
        if let Some(v) = kv.string("trainer.variant") {
            t.variant = Variant::parse(&v)?;
        }
        if let Some(v) = kv.string("trainer.qhat") {
            t.qhat = QhatKind::parse(&v)?;
        }
        t.epsilon = kv.or("trainer.epsilon", t.epsilon)?;
        t.sigma = kv.or("trainer.sigma", t.sigma)?;
        t.batch_size = kv.or("trainer.batch_size", t.batch_size)?;
        t.iters = kv.or("trainer.iters", t.iters)?;
        t.lr_gen = kv.or("trainer.lr_gen", t.lr_gen)?;
        t.lr_disc = kv.or("trainer.lr_disc", t.lr_disc)?;
        t.disc_steps = kv.or("trainer.disc_steps", t.disc_steps)?;
        t.seed = kv.or("trainer.seed", t.seed)?;
        if let Some(v) = kv.string("trainer.scheduler") {
            t.scheduler = parse_scheduler(&v)?;
        }
        t.maligan_clip = kv.or("trainer.maligan_clip", t.maligan_clip)?;
        t.divergence_factor = kv.or("trainer.divergence_factor", t.divergence_factor)?;
        t.divergence_floor = kv.or("trainer.divergence_floor", t.divergence_floor)?;

        let default_mode = if space.is_conditional() { MctsMode::Conditional } else { MctsMode::Unconditional };
        t.mcts = MctsConfig {
            c_puct: kv.or("mcts.c_puct", t.mcts.c_puct)?,
            rounds: kv.or("mcts.rounds", t.mcts.rounds)?,
            sigma: kv.or("mcts.sigma", t.mcts.sigma)?,
            mode: match kv.string("mcts.mode") {
                Some(m) => parse_mode(&m)?,
                None => default_mode,
            },
        };

        let mut exact = ExactConfig { steps: kv.or("exact.steps", 50)?, ..ExactConfig::default() };
        exact.stop_kl = kv.or("exact.stop_kl", exact.stop_kl)?;
        exact.p0 = match kv.string("exact.p0").as_deref() {
            None | Some("uniform") => P0Spec::Uniform,
            Some("dirichlet") => P0Spec::Dirichlet { alpha: kv.or("exact.p0_alpha", 1.0)?, seed: kv.or("exact.p0_seed", 0)? },
            Some("table") => {
                let probs = kv.string("exact.p0_probs").ok_or_else(|| Error::Config("exact.p0=table needs exact.p0_probs".into()))?;
                P0Spec::Table { probs: parse_table(&probs)? }
            }
            Some("target") => P0Spec::Target,
            Some(other) => return Err(Error::Config(format!("unknown exact.p0 '{other}'"))),
        };

        kv.finish()?;
        t.validate()?;
        Ok(Self { train: t, exact })
    }

    pub fn to_kv_string(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("space.vocab_size", t.space.vocab.size().to_string());
        put("space.max_len", t.space.max_len.to_string());
        put("space.num_contexts", t.space.num_contexts.to_string());
        match &t.target {
            TargetSpec::Dirichlet { alpha, seed } => {
                put("target.kind", "dirichlet".into());
                put("target.alpha", fmt_f64(*alpha));
                put("target.seed", seed.to_string());
            }
            TargetSpec::Hidden { scale, seed } => {
                put("target.kind", "hidden".into());
                put("target.scale", fmt_f64(*scale));
                put("target.seed", seed.to_string());
            }
            TargetSpec::Table { probs } => {
                put("target.kind", "table".into());
                put("target.probs", format_table(probs));
            }
        }
        match t.init {
            InitSpec::Uniform => put("init.kind", "uniform".into()),
            InitSpec::Random { scale } => {
                put("init.kind", "random".into());
                put("init.scale", fmt_f64(scale));
            }
            InitSpec::Target => put("init.kind", "target".into()),
        }
        put("trainer.variant", t.variant.name().into());
        put("trainer.qhat", t.qhat.name().into());
        put("trainer.epsilon", fmt_f64(t.epsilon));
        put("trainer.sigma", fmt_f64(t.sigma));
        put("trainer.batch_size", t.batch_size.to_string());
        put("trainer.iters", t.iters.to_string());
        put("trainer.lr_gen", fmt_f64(t.lr_gen));
        put("trainer.lr_disc", fmt_f64(t.lr_disc));
        put("trainer.disc_steps", t.disc_steps.to_string());
        put("trainer.seed", t.seed.to_string());
        put(
            "trainer.scheduler",
            match t.scheduler {
                Scheduler::None => "none".into(),
                Scheduler::Linear { start, end } => format!("linear:{},{}", fmt_f64(start), fmt_f64(end)),
            },
        );
        put("trainer.maligan_clip", fmt_f64(t.maligan_clip));
        put("trainer.divergence_factor", fmt_f64(t.divergence_factor));
        put("trainer.divergence_floor", fmt_f64(t.divergence_floor));
        put("mcts.c_puct", fmt_f64(t.mcts.c_puct));
        put("mcts.rounds", t.mcts.rounds.to_string());
        put("mcts.sigma", fmt_f64(t.mcts.sigma));
        put(
            "mcts.mode",
            match t.mcts.mode {
                MctsMode::Conditional => "conditional".into(),
                MctsMode::Unconditional => "unconditional".into(),
            },
        );
        put("exact.steps", self.exact.steps.to_string());
        put("exact.stop_kl", fmt_f64(self.exact.stop_kl));
        match &self.exact.p0 {
            P0Spec::Uniform => put("exact.p0", "uniform".into()),
            P0Spec::Dirichlet { alpha, seed } => {
                put("exact.p0", "dirichlet".into());
                put("exact.p0_alpha", fmt_f64(*alpha));
                put("exact.p0_seed", seed.to_string());
            }
            P0Spec::Table { probs } => {
                put("exact.p0", "table".into());
                put("exact.p0_probs", format_table(probs));
            }
            P0Spec::Target => put("exact.p0", "target".into()),
        }
        s
    }
}
