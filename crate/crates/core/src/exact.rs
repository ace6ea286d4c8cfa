//! Brute-force oracle for the idealized training loop.
//!
//! With an optimal discriminator `D*(y) = p_d(y) / (p_d(y) + p_{t-1}(y))`
//! and a generator that matches `q_t ∝ p_{t-1} D_t` exactly, the iterates
//! converge to `p_d`. The auxiliary sequence
//! `ẑ_0 = p_d / p_0`, `ẑ_t = z_t (ẑ_{t-1} + 1)` gives the closed form
//! `p_{t+1} ∝ p_d / (ẑ_t + 1)`, and the spread of `ẑ_t` contracts by the
//! partition `z_t < 1` at every step after the first.
//!
//! For an arbitrary discriminator with
//! `log η = min(E_{p_d}[log D], E_{p_{t-1}}[log(1 - D)])` and `η > 1/2`,
//! the KL change of the exact update is at most `log(1/η - 1) < 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqspace::{kl_divergence, ExactDist};

/// Tolerance for equality checks between two exact computations.
pub const EQ_TOL: f64 = 1e-9;
/// Strictness margin for inequalities that hold in exact arithmetic.
pub const STRICT_TOL: f64 = 1e-12;

/// Diagnostics of one exact update `p_prev -> p_next`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Partition `Z_t = sum_y p_{t-1}(y) D_t(y)`.
    pub z_t: f64,
    pub kl_before: f64,
    pub kl_after: f64,
    pub delta_t: f64,
    pub eta: f64,
    /// `log(1/η - 1)`.
    pub bound: f64,
}

/// Which composition of `p_{t-1}` and `D_t` forms the training target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// `p_{t-1} D`
    Cooperative,
    /// `p_{t-1} D / (1 - D)`
    Maligan,
    /// `exp(D)`, ignoring the previous generator.
    ExpD,
}

/// Checks that `p0` covers the support of `p_d`.
pub fn check_support(p_d: &ExactDist, p0: &ExactDist) -> Result<()> {
    p_d.same_support(p0)?;
    if let Some(i) = (0..p_d.len()).find(|&i| p_d.prob(i) > 0.0 && p0.log_prob(i) == f64::NEG_INFINITY) {
        return Err(Error::Precondition(format!(
            "initial distribution must be positive wherever the target is (outcome {i} has p_d > 0, p_0 = 0)"
        )));
    }
    Ok(())
}

/// `D*(y) = p_d(y) / (p_d(y) + p_prev(y))`.
pub fn optimal_discriminator(p_d: &ExactDist, p_prev: &ExactDist) -> Result<Vec<f64>> {
    p_d.same_support(p_prev)?;
    p_d.log_probs()
        .iter()
        .zip(p_prev.log_probs())
        .enumerate()
        .map(|(i, (&ld, &lp))| {
            if ld == f64::NEG_INFINITY && lp == f64::NEG_INFINITY {
                return Err(Error::Precondition(format!("outcome {i} has zero mass under both distributions")));
            }
            // 1 / (1 + p_prev/p_d), evaluated in log space.
            Ok(1.0 / (1.0 + (lp - ld).exp()))
        })
        .collect()
}

fn check_scores(d: &[f64], n: usize) -> Result<()> {
    if d.len() != n {
        return Err(Error::SupportMismatch { left: n, right: d.len() });
    }
    if d.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Precondition("discriminator values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// `q ∝ p_prev · D` together with its partition `z = sum p_prev · D`.
pub fn cooperative_target(p_prev: &ExactDist, d: &[f64]) -> Result<(ExactDist, f64)> {
    check_scores(d, p_prev.len())?;
    let logw: Vec<f64> = p_prev.log_probs().iter().zip(d).map(|(&lp, &dv)| lp + dv.ln()).collect();
    let z = crate::math::log_sum_exp(&logw).exp();
    if z <= 0.0 {
        return Err(Error::DegenerateTarget);
    }
    Ok((ExactDist::from_log_weights(logw)?, z))
}

/// The normalized target for the selected composition function.
pub fn variant_target(p_prev: &ExactDist, d: &[f64], kind: TargetKind) -> Result<ExactDist> {
    check_scores(d, p_prev.len())?;
    match kind {
        TargetKind::Cooperative => cooperative_target(p_prev, d).map(|(q, _)| q),
        TargetKind::Maligan => {
            let mut logw = Vec::with_capacity(d.len());
            for (i, (&lp, &dv)) in p_prev.log_probs().iter().zip(d).enumerate() {
                if lp == f64::NEG_INFINITY {
                    logw.push(f64::NEG_INFINITY);
                } else if dv >= 1.0 {
                    return Err(Error::DivisionByZero { index: i });
                } else {
                    logw.push(lp + dv.ln() - (-dv).ln_1p());
                }
            }
            ExactDist::from_log_weights(logw).map_err(|_| Error::DegenerateTarget)
        }
        TargetKind::ExpD => ExactDist::from_log_weights(d.to_vec()),
    }
}

/// `η = exp(min(E_{p_d}[log D], E_{p_prev}[log(1 - D)]))`.
pub fn eta_of(d: &[f64], p_d: &ExactDist, p_prev: &ExactDist) -> Result<f64> {
    p_d.same_support(p_prev)?;
    check_scores(d, p_d.len())?;
    let mut real = 0.0;
    let mut fake = 0.0;
    for (i, &dv) in d.iter().enumerate() {
        let wd = p_d.prob(i);
        if wd > 0.0 {
            if dv <= 0.0 {
                return Err(Error::LogOfZero { index: i, value: dv });
            }
            real += wd * dv.ln();
        }
        let wp = p_prev.prob(i);
        if wp > 0.0 {
            if dv >= 1.0 {
                return Err(Error::LogOfZero { index: i, value: dv });
            }
            fake += wp * (-dv).ln_1p();
        }
    }
    Ok(real.min(fake).exp())
}

/// Sample-based η from discriminator scores on real and generated data.
pub fn eta_from_samples(real_scores: &[f64], fake_scores: &[f64]) -> f64 {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return f64::NAN;
    }
    let real = real_scores.iter().map(|d| d.ln()).sum::<f64>() / real_scores.len() as f64;
    let fake = fake_scores.iter().map(|d| (-d).ln_1p()).sum::<f64>() / fake_scores.len() as f64;
    real.min(fake).exp()
}

/// `log(1/η - 1)`.
pub fn kl_bound(eta: f64) -> f64 {
    (1.0 / eta - 1.0).ln()
}

/// Exact update `p_next ∝ p_prev · D` for an arbitrary discriminator, with
/// the KL change and the η bound it is checked against.
pub fn exact_update(p_d: &ExactDist, p_prev: &ExactDist, d: &[f64]) -> Result<(ExactDist, StepReport)> {
    let (p_next, z_t) = cooperative_target(p_prev, d)?;
    let kl_before = kl_divergence(p_d, p_prev)?;
    let kl_after = kl_divergence(p_d, &p_next)?;
    let eta = eta_of(d, p_d, p_prev)?;
    Ok((
        p_next,
        StepReport { z_t, kl_before, kl_after, delta_t: kl_after - kl_before, eta, bound: kl_bound(eta) },
    ))
}

/// One iteration with both inner problems solved exactly.
pub fn exact_step(p_d: &ExactDist, p_prev: &ExactDist) -> Result<(ExactDist, StepReport)> {
    check_support(p_d, p_prev)?;
    let d = optimal_discriminator(p_d, p_prev)?;
    exact_update(p_d, p_prev, &d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZhatTable {
    pub values: Vec<f64>,
    pub step: usize,
}

impl ZhatTable {
    /// `ẑ_0 = p_d / p_0`, with 0 where both vanish.
    pub fn initial(p_d: &ExactDist, p0: &ExactDist) -> Result<Self> {
        check_support(p_d, p0)?;
        let values = p_d
            .log_probs()
            .iter()
            .zip(p0.log_probs())
            .map(|(&ld, &l0)| if ld == f64::NEG_INFINITY { 0.0 } else { (ld - l0).exp() })
            .collect();
        Ok(Self { values, step: 0 })
    }

    pub fn spread(&self) -> f64 {
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    /// `p_d / (ẑ + 1)`, unnormalized.
    pub fn tilde(&self, p_d: &ExactDist) -> Vec<f64> {
        self.values.iter().enumerate().map(|(i, z)| p_d.prob(i) / (z + 1.0)).collect()
    }

    /// The next generator implied by the closed form, normalized.
    pub fn implied_next(&self, p_d: &ExactDist) -> Result<ExactDist> {
        let logw = self
            .values
            .iter()
            .zip(p_d.log_probs())
            .map(|(z, &ld)| ld - z.ln_1p())
            .collect();
        ExactDist::from_log_weights(logw)
    }
}

/// `ẑ_t = z_t (ẑ_{t-1} + 1)`; expects `z_t` in (0, 1].
pub fn zhat_step(prev: &ZhatTable, z_t: f64) -> ZhatTable {
    ZhatTable { values: prev.values.iter().map(|z| z_t * (z + 1.0)).collect(), step: prev.step + 1 }
}

/// One row of an exact trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub t: usize,
    pub z_t: f64,
    /// `KL(p_d || p_t)` after the step.
    pub kl: f64,
    pub delta_t: f64,
    pub eta: f64,
    pub bound: f64,
    /// `max ẑ_t - min ẑ_t`.
    pub zhat_spread: f64,
}

#[derive(Clone, Debug)]
pub struct Dynamics {
    pub rows: Vec<DynamicsRow>,
    pub final_dist: ExactDist,
    /// Human-readable descriptions of any failed invariant.
    pub violations: Vec<String>,
}

/// Iterates [`exact_step`] from `p0`, checking along the way:
///
/// - the closed form `p_t ∝ p_d / (ẑ_{t-1} + 1)` (within [`EQ_TOL`]),
/// - `z_t < 1` for `t > 1` while `p_{t-1} != p_d`,
/// - `spread(ẑ_t) = spread(ẑ_0) · prod_s z_s`,
/// - strict KL decrease while the KL is above [`STRICT_TOL`],
/// - the η bound `Δ_t <= log(1/η - 1) + STRICT_TOL` whenever `η > 1/2`.
///
/// Stops after `max_steps` rows or once the KL falls below `stop_kl`.
pub fn iterate(p_d: &ExactDist, p0: &ExactDist, max_steps: usize, stop_kl: f64) -> Result<Dynamics> {
    check_support(p_d, p0)?;
    let mut zhat = ZhatTable::initial(p_d, p0)?;
    let spread0 = zhat.spread();
    let mut contraction = 1.0;
    let mut p = p0.clone();
    let mut rows = Vec::new();
    let mut violations = Vec::new();

    for t in 1..=max_steps {
        let implied = zhat.implied_next(p_d)?;
        let (next, report) = exact_step(p_d, &p)?;

        let gap = (0..next.len()).map(|i| (next.prob(i) - implied.prob(i)).abs()).fold(0.0, f64::max);
        if gap > EQ_TOL {
            violations.push(format!("t={t}: closed form differs from exact step by {gap:e}"));
        }
        if t > 1 && report.kl_before > STRICT_TOL && report.z_t > 1.0 - STRICT_TOL {
            violations.push(format!("t={t}: partition z_t = {} is not below 1", report.z_t));
        }
        if report.kl_before > STRICT_TOL && report.delta_t >= 0.0 {
            violations.push(format!("t={t}: KL did not decrease (delta {:e})", report.delta_t));
        }
        if report.eta > 0.5 && report.delta_t > report.bound + STRICT_TOL {
            violations.push(format!("t={t}: delta {} exceeds bound {}", report.delta_t, report.bound));
        }

        zhat = zhat_step(&zhat, report.z_t);
        contraction *= report.z_t;
        let spread = zhat.spread();
        let expected = spread0 * contraction;
        if (spread - expected).abs() > EQ_TOL * spread0.max(1.0) {
            violations.push(format!("t={t}: zhat spread {spread} differs from contracted {expected}"));
        }

        rows.push(DynamicsRow {
            t,
            z_t: report.z_t,
            kl: report.kl_after,
            delta_t: report.delta_t,
            eta: report.eta,
            bound: report.bound,
            zhat_spread: spread,
        });
        p = next;
        if report.kl_after < stop_kl {
            break;
        }
    }
    Ok(Dynamics { rows, final_dist: p, violations })
}
