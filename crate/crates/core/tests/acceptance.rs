//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned
//! below. Runs without the libtest harness so the report stays readable;
//! exits non-zero if any criterion fails.
//!
//! `cargo test --release --test acceptance` is the intended invocation; a
//! debug build works but the training criterion is slower.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gcnlab::exact::{exact_step, exact_update, kl_bound, optimal_discriminator, zhat_step, ZhatTable};
use gcnlab::math::{mix_seed, sigmoid};
use gcnlab::models::{GradTable, PrefixDiscriminator, TabularGenerator};
use gcnlab::sampling::{
    nucleus_set, Behavior, BehaviorSampler, MctsConfig, MctsMode, MctsTree, NucleusSpec,
};
use gcnlab::seqspace::{kl_divergence, ExactDist, Sequence, SpaceConfig};
use gcnlab::trainer::{train, train_with, InitSpec, Scheduler, TargetSpec, TrainConfig, TrainOptions, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

// Pinned tolerances.
const C1_KL_TARGET: f64 = 1e-6;
const C1_MAX_STEPS: usize = 200;
const C1_BUDGET_S: f64 = 10.0;
const C2_EQ_TOL: f64 = 1e-9;
const C2_CLOSED_FORM_STEPS: usize = 50;
/// Agreement with a literal printed to 5 decimals.
const C2_LITERAL_TOL: f64 = 1e-5;
const C3_SLACK: f64 = 1e-12;
/// Agreement with a literal printed to 4 decimals.
const C3_LITERAL_TOL: f64 = 1e-4;
const C4_SAMPLES: usize = 100_000;
const C4_REL_TOL: f64 = 0.05;
const C4_FD_REL_TOL: f64 = 1e-4;
const C5_CATEGORICALS: usize = 1000;
const C5_NEEDLE_SEEDS: u64 = 100;
const C5_NEEDLE_MIN: usize = 95;
const C6_SEEDS: u64 = 10;
const C6_MIN_ORDERED: usize = 9;
const C6_BUDGET_S: f64 = 300.0;
const C7_TOL: f64 = 1e-12;

type Outcome = Result<String, String>;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("exact cooperative dynamics converge", exact_dynamics),
        ("closed-form recursion matches exact steps", closed_form),
        ("KL change obeys the eta bound", eta_bound),
        ("importance-weighted gradient estimator", gradient_estimator),
        ("sampler contracts", sampler_contracts),
        ("variant ordering on the toy benchmark", variant_ordering),
        ("normalized update is scale invariant", scale_invariance),
        ("CLI outputs are byte-identical per seed", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] criterion {}: {name} ({detail}; {secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] criterion {}: {name} ({detail}; {secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Exact dynamics

/// Spaces with 2..=254 sequences.
const SPACES: [(u32, usize); 10] = [(2, 1), (3, 1), (2, 2), (3, 2), (2, 3), (2, 4), (3, 3), (2, 5), (3, 4), (2, 7)];

/// Fifty seeded (p_d, p_0) pairs, both Dirichlet draws over the full space.
fn instances() -> Vec<(SpaceConfig, ExactDist, ExactDist)> {
    (0..50u64)
        .map(|i| {
            let (v, l) = SPACES[i as usize % SPACES.len()];
            let space = SpaceConfig::new(v, l, 0).unwrap();
            let alpha = [0.3, 1.0, 3.0][i as usize % 3];
            let p_d = TargetSpec::Dirichlet { alpha, seed: 1000 + i }.build(&space).unwrap().remove(0);
            let p0 = TargetSpec::Dirichlet { alpha: 1.0, seed: 2000 + i }.build(&space).unwrap().remove(0);
            (space, p_d, p0)
        })
        .collect()
}

fn exact_dynamics() -> Outcome {
    let started = Instant::now();
    let mut worst_steps = 0;
    let mut problems = Vec::new();
    let insts = instances();
    let sizes: Vec<u128> = insts.iter().map(|(s, _, _)| s.space_size()).collect();
    for (i, (_, p_d, p0)) in insts.iter().enumerate() {
        let mut p = p0.clone();
        let mut kl_prev = kl_divergence(p_d, &p).unwrap();
        let mut reached = None;
        for t in 1..=C1_MAX_STEPS {
            let (next, r) = exact_step(p_d, &p).unwrap();
            if r.kl_after >= kl_prev && kl_prev > 1e-15 {
                problems.push(format!("instance {i}: KL rose at t={t}"));
            }
            if t > 1 && kl_prev > 1e-15 && r.z_t >= 1.0 {
                problems.push(format!("instance {i}: z_{t} = {} >= 1", r.z_t));
            }
            kl_prev = r.kl_after;
            p = next;
            if r.kl_after < C1_KL_TARGET && reached.is_none() {
                reached = Some(t);
            }
            // Keep iterating a little past the target to exercise strict decrease.
            if reached.is_some_and(|s| t >= s + 5) {
                break;
            }
        }
        match reached {
            Some(t) => worst_steps = worst_steps.max(t),
            None => problems.push(format!("instance {i}: KL {kl_prev:e} after {C1_MAX_STEPS} steps")),
        }
    }
    let secs = started.elapsed().as_secs_f64();
    if secs > C1_BUDGET_S {
        problems.push(format!("took {secs:.2}s"));
    }
    check(
        problems.is_empty(),
        format!(
            "50 instances, |Y| in {}..={}, slowest reaches KL<1e-6 at t={worst_steps}, {secs:.3}s{}",
            sizes.iter().min().unwrap(),
            sizes.iter().max().unwrap(),
            fmt_problems(&problems)
        ),
    )
}

fn fmt_problems(p: &[String]) -> String {
    if p.is_empty() {
        String::new()
    } else {
        format!("; {} problems, first: {}", p.len(), p[0])
    }
}

fn closed_form() -> Outcome {
    let mut worst: f64 = 0.0;
    for (_, p_d, p0) in instances() {
        let mut zhat = ZhatTable::initial(&p_d, &p0).unwrap();
        let mut p = p0;
        for _ in 1..=C2_CLOSED_FORM_STEPS {
            let (next, r) = exact_step(&p_d, &p).unwrap();
            // Independent normalization of p_d / (ẑ + 1).
            let tilde = zhat.tilde(&p_d);
            let z: f64 = tilde.iter().sum();
            for (i, t) in tilde.iter().enumerate() {
                worst = worst.max((next.prob(i) - t / z).abs());
            }
            zhat = zhat_step(&zhat, r.z_t);
            p = next;
        }
    }

    // Two-outcome trace.
    let p_d = ExactDist::from_probs(&[0.8, 0.2]).unwrap();
    let p0 = ExactDist::from_probs(&[0.5, 0.5]).unwrap();
    let (p1, r1) = exact_step(&p_d, &p0).unwrap();
    let zhat1 = zhat_step(&ZhatTable::initial(&p_d, &p0).unwrap(), r1.z_t);
    let tilde2 = zhat1.tilde(&p_d);
    let d2 = optimal_discriminator(&p_d, &p1).unwrap();
    let direct2: Vec<f64> = (0..2).map(|i| p1.prob(i) * d2[i]).collect();
    let pairs = [
        (p1.prob(0), 0.68293),
        (p1.prob(1), 0.31707),
        (zhat1.values[0], 1.17143),
        (zhat1.values[1], 0.63077),
        (tilde2[0], 0.36843),
        (tilde2[1], 0.12264),
    ];
    let literal_gap = pairs.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let oracle_gap = (0..2).map(|i| (tilde2[i] - direct2[i]).abs()).fold(0.0, f64::max);
    check(
        worst <= C2_EQ_TOL && literal_gap <= C2_LITERAL_TOL && oracle_gap <= C2_EQ_TOL,
        format!(
            "max |p_t - closed form| = {worst:.2e} over t<=50; trace p1=({:.6},{:.6}) zhat1=({:.6},{:.6}) p~2=({:.6},{:.6}), max literal gap {literal_gap:.1e}, p~2 vs p1*D2 gap {oracle_gap:.1e}",
            pairs[0].0, pairs[1].0, pairs[2].0, pairs[3].0, pairs[4].0, pairs[5].0
        ),
    )
}

fn eta_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut collected = 0;
    let mut attempts = 0;
    let mut worst_margin = f64::NEG_INFINITY;
    while collected < 100 && attempts < 100_000 {
        attempts += 1;
        let (v, l) = SPACES[rng.random_range(0..SPACES.len())];
        let space = SpaceConfig::new(v, l, 0).unwrap();
        let p_d = TargetSpec::Dirichlet { alpha: 1.0, seed: rng.random() }.build(&space).unwrap().remove(0);
        let p_prev = TargetSpec::Dirichlet { alpha: 1.0, seed: rng.random() }.build(&space).unwrap().remove(0);
        // Perturbed optimum: mostly informative, never optimal.
        let noise = Normal::new(0.0, rng.random_range(0.05..1.5)).unwrap();
        let d: Vec<f64> = optimal_discriminator(&p_d, &p_prev)
            .unwrap()
            .iter()
            .map(|&x| sigmoid(logit(x) + noise.sample(&mut rng)))
            .collect();
        let Ok((_, r)) = exact_update(&p_d, &p_prev, &d) else { continue };
        if r.eta <= 0.5 {
            continue;
        }
        collected += 1;
        worst_margin = worst_margin.max(r.delta_t - r.bound);
    }

    let p_d = ExactDist::from_probs(&[0.8, 0.2]).unwrap();
    let p_prev = ExactDist::from_probs(&[0.5, 0.5]).unwrap();
    let d = optimal_discriminator(&p_d, &p_prev).unwrap();
    let (_, r) = exact_update(&p_d, &p_prev, &d).unwrap();
    let gaps = [(r.eta - 0.52412).abs(), (r.bound - -0.09655).abs(), (r.delta_t - -0.15833).abs()];
    let literal_gap = gaps.iter().copied().fold(0.0, f64::max);
    check(
        collected == 100 && worst_margin <= C3_SLACK && literal_gap <= C3_LITERAL_TOL && (kl_bound(r.eta) - r.bound).abs() == 0.0,
        format!(
            "{collected} tables with eta>0.5 ({attempts} drawn), max(delta - bound) = {worst_margin:.3e}; instance eta={:.6} bound={:.6} delta={:.6}, max literal gap {literal_gap:.1e}",
            r.eta, r.bound, r.delta_t
        ),
    )
}

// ---------------------------------------------------------------------------
// Gradients

/// Flattens a gradient table over a fixed row order.
fn flatten(g: &GradTable, rows: &[Sequence], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * n);
    for r in rows {
        match g.get(0, r.tokens()) {
            Some(v) => out.extend_from_slice(v),
            None => out.extend(std::iter::repeat_n(0.0, n)),
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b)
}

fn random_disc<R: Rng>(space: SpaceConfig, scale: f64, rng: &mut R) -> PrefixDiscriminator {
    let normal = Normal::new(0.0, scale).unwrap();
    let mut disc = PrefixDiscriminator::new(space);
    for p in space.decision_prefixes().unwrap().into_iter().chain(space.enumerate().unwrap()) {
        if !p.is_empty() {
            disc.set_logit(0, p.tokens(), normal.sample(rng)).unwrap();
        }
    }
    disc
}

/// The discriminator the sampled loop is trying to learn: on every prefix,
/// `m_d / (m_d + m_θ)` with `m` the prefix marginals of `p_d` and `p_θ`.
fn optimal_prefix_disc(gen: &TabularGenerator, p_d: &ExactDist) -> PrefixDiscriminator {
    let space = *gen.space();
    let seqs = space.enumerate().unwrap();
    let p = gen.exact_dist(0).unwrap();
    let mut disc = PrefixDiscriminator::new(space);
    for pre in space.decision_prefixes().unwrap().into_iter().chain(seqs.clone()) {
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
        disc.set_logit(0, pre.tokens(), (md / mp).ln()).unwrap();
    }
    disc
}

fn gradient_estimator() -> Outcome {
    // 30 sequences.
    let space = SpaceConfig::new(2, 4, 0).unwrap();
    let seqs = space.enumerate().unwrap();
    let rows = space.decision_prefixes().unwrap();
    let n = space.num_symbols();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gen = TabularGenerator::random(space, 1.0, &mut rng).unwrap();
    let p_d = TargetSpec::Dirichlet { alpha: 1.0, seed: 11 }.build(&space).unwrap().remove(0);
    let disc = optimal_prefix_disc(&gen, &p_d);

    // Enumerated gradient of the cooperative objective: E_{q}[∇ log p], q ∝ p·D.
    let p = gen.exact_dist(0).unwrap();
    let q: Vec<f64> = seqs.iter().enumerate().map(|(i, y)| p.prob(i) * disc.score(0, y.tokens())).collect();
    let zq: f64 = q.iter().sum();
    let mut exact = vec![0.0; rows.len() * n];
    for (i, y) in seqs.iter().enumerate() {
        let g = flatten(&gen.grad_log_prob(0, y).unwrap(), &rows, n);
        for (e, gi) in exact.iter_mut().zip(g) {
            *e += q[i] / zq * gi;
        }
    }

    let behaviors = [
        ("p", Behavior::Generator),
        ("nucleus", Behavior::Nucleus { epsilon: 0.1, nucleus: NucleusSpec::new(0.5).unwrap() }),
        (
            "mcts-cond",
            Behavior::Mcts { epsilon: 0.1, mcts: MctsConfig { mode: MctsMode::Conditional, sigma: 1.0, ..MctsConfig::default() } },
        ),
        (
            "mcts-uncond",
            Behavior::Mcts { epsilon: 0.1, mcts: MctsConfig { mode: MctsMode::Unconditional, sigma: 0.5, ..MctsConfig::default() } },
        ),
    ];
    let mut errs = Vec::new();
    for (k, (name, b)) in behaviors.iter().enumerate() {
        let sampler = BehaviorSampler::new(&gen, &disc, *b, 77).unwrap();
        let estimate = |samples: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[5, k as u64, samples as u64]));
            let mut batch = Vec::with_capacity(samples);
            let mut weights = Vec::with_capacity(samples);
            for _ in 0..samples {
                let d = sampler.draw(0, &mut rng).unwrap();
                batch.push((0, d.y));
                weights.push(d.w_raw);
            }
            let (g, _) = gen.weighted_gradient(&batch, &weights, true).unwrap();
            rel_err(&flatten(&g, &rows, n), &exact)
        };
        // The gate is at C4_SAMPLES; ten times more shows the error is
        // sampling noise rather than bias.
        errs.push((name, estimate(C4_SAMPLES), estimate(10 * C4_SAMPLES)));
    }

    // Finite differences of log p(y) and of the discriminator objective.
    let h = 1e-5;
    let mut fd_worst: f64 = 0.0;
    for y in seqs.iter().step_by(7) {
        let analytic = flatten(&gen.grad_log_prob(0, y).unwrap(), &rows, n);
        let mut fd = Vec::with_capacity(analytic.len());
        for r in &rows {
            for a in 0..n {
                let eval = |delta: f64| {
                    let mut g2 = gen.clone();
                    let mut l = g2.logits(0, r.tokens());
                    l[a] += delta;
                    g2.set_logits(0, r.tokens(), l).unwrap();
                    g2.log_prob(0, y).unwrap()
                };
                fd.push((eval(h) - eval(-h)) / (2.0 * h));
            }
        }
        fd_worst = fd_worst.max(rel_err(&analytic, &fd));
    }
    let reals: Vec<(u32, Sequence)> = (0..20).map(|i| (0, seqs[(i * 7) % seqs.len()].clone())).collect();
    let fakes: Vec<(u32, Sequence)> = (0..20).map(|i| (0, seqs[(i * 11 + 3) % seqs.len()].clone())).collect();
    let grad = disc.gradient(&reals, &fakes).unwrap();
    let mut analytic = Vec::new();
    let mut fd = Vec::new();
    for (ctx, prefix, g) in grad.sorted_entries() {
        let eval = |delta: f64| {
            let mut d2 = disc.clone();
            d2.set_logit(ctx, prefix, disc.logit(ctx, prefix) + delta).unwrap();
            d2.objective(&reals, &fakes)
        };
        analytic.push(*g);
        fd.push((eval(h) - eval(-h)) / (2.0 * h));
    }
    let disc_fd = rel_err(&analytic, &fd);
    fd_worst = fd_worst.max(disc_fd);

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let listed: Vec<String> =
        errs.iter().map(|(n, e, e10)| format!("{n} {:.2}% (x10 samples: {:.2}%)", 100.0 * e, 100.0 * e10)).collect();
    check(
        worst <= C4_REL_TOL && fd_worst <= C4_FD_REL_TOL,
        format!(
            "|Y|=30, optimal prefix discriminator, {} samples: rel. error {}; finite differences max rel. error {fd_worst:.1e} (discriminator {disc_fd:.1e})",
            C4_SAMPLES,
            listed.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// Samplers

fn sampler_contracts() -> Outcome {
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    // Nucleus minimality and mass.
    for k in 0..C5_CATEGORICALS {
        let n = rng.random_range(1..=20);
        let mut probs: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
        if k % 5 == 0 {
            // Inject ties and zeros.
            for i in (0..n).step_by(3) {
                probs[i] = if k % 2 == 0 { 0.0 } else { probs[0] };
            }
        }
        let total: f64 = probs.iter().sum();
        if total == 0.0 {
            continue;
        }
        probs.iter_mut().for_each(|p| *p /= total);
        let sigma = rng.random_range(0.01..=1.0);
        let set = nucleus_set(&probs, NucleusSpec::new(sigma).unwrap());
        let mut order: Vec<usize> = (0..n).filter(|&i| probs[i] > 0.0).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut sorted_set = set.clone();
        sorted_set.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mass: f64 = set.iter().map(|&i| probs[i]).sum();
        let without_last: f64 = mass - probs[*sorted_set.last().unwrap()];
        if sorted_set != order[..set.len()] {
            problems.push(format!("categorical {k}: nucleus is not a prefix of the tie-broken order"));
        }
        if mass < sigma - 1e-12 || without_last >= sigma - 1e-12 {
            problems.push(format!("categorical {k}: mass {mass} / {without_last} around sigma {sigma}"));
        }
        if set.iter().any(|&i| probs[i] == 0.0) {
            problems.push(format!("categorical {k}: zero-mass token in nucleus"));
        }
    }

    // Mixture support and weight bound over full enumeration.
    let space = SpaceConfig::new(3, 3, 0).unwrap();
    let seqs = space.enumerate().unwrap();
    let mut draws_checked = 0;
    for inst in 0..4u64 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + inst);
        let gen = TabularGenerator::random(space, 2.0, &mut r).unwrap();
        let disc = random_disc(space, 2.0, &mut r);
        let behaviors = [
            Behavior::Nucleus { epsilon: 0.1, nucleus: NucleusSpec::new(0.3).unwrap() },
            Behavior::Mcts { epsilon: 0.2, mcts: MctsConfig { mode: MctsMode::Conditional, ..MctsConfig::default() } },
            Behavior::Mcts { epsilon: 0.05, mcts: MctsConfig { mode: MctsMode::Unconditional, sigma: 0.6, ..MctsConfig::default() } },
        ];
        for b in behaviors {
            let sampler = BehaviorSampler::new(&gen, &disc, b, inst).unwrap();
            let eps = b.epsilon();
            let mut mass = 0.0;
            for y in &seqs {
                let p = gen.log_prob(0, y).unwrap().exp();
                let q = sampler.log_density(0, y).unwrap().exp();
                mass += q;
                if p > 0.0 && !(q > 0.0 && q >= eps * p * (1.0 - 1e-12)) {
                    problems.push(format!("q̂({y:?}) = {q} with p = {p}"));
                }
            }
            if (mass - 1.0).abs() > 1e-9 {
                problems.push(format!("q̂ sums to {mass}"));
            }
            for _ in 0..2000 {
                let d = sampler.draw(0, &mut r).unwrap();
                draws_checked += 1;
                if d.w_raw > d.score / eps * (1.0 + 1e-12) {
                    problems.push(format!("weight {} above D/eps = {}", d.w_raw, d.score / eps));
                }
            }
        }
    }

    // Needle: the discriminator rewards exactly one sequence.
    let space = SpaceConfig::new(2, 3, 0).unwrap();
    let seqs = space.enumerate().unwrap();
    let all_prefixes: Vec<Sequence> = space.decision_prefixes().unwrap().into_iter().chain(seqs.clone()).collect();
    let cfg = MctsConfig { c_puct: 1.0, rounds: 50, sigma: 1.0, mode: MctsMode::Conditional };
    // Gated on the untrained (uniform) generator; a random prior is reported
    // alongside because unvisited children score V = 0, so a needle whose
    // prior is small enough is never tried within the round budget.
    let needle_runs = |prior_scale: f64| {
        let mut found = 0;
        for seed in 0..C5_NEEDLE_SEEDS {
            let mut r = ChaCha8Rng::seed_from_u64(mix_seed(&[31, seed]));
            let gen = if prior_scale > 0.0 {
                TabularGenerator::random(space, prior_scale, &mut r).unwrap()
            } else {
                TabularGenerator::new(space)
            };
            let needle = &seqs[r.random_range(0..seqs.len())];
            let mut disc = PrefixDiscriminator::new(space);
            for p in all_prefixes.iter().filter(|p| !p.is_empty()) {
                let on_path = needle.tokens().starts_with(p.tokens());
                // sigmoid(40) rounds to exactly 1.
                disc.set_logit(0, p.tokens(), if on_path { 40.0 } else { logit(0.01) }).unwrap();
            }
            let brute = seqs
                .iter()
                .max_by(|a, b| disc.score(0, a.tokens()).total_cmp(&disc.score(0, b.tokens())))
                .unwrap();
            let out = gcnlab::sampling::mcts_decode(&gen, &disc, 0, cfg, seed, &mut r).unwrap();
            if out.sequence == *brute {
                found += 1;
            }
        }
        found
    };
    let found = needle_runs(0.0);
    let found_random_prior = needle_runs(1.0);
    if found < C5_NEEDLE_MIN {
        problems.push(format!("needle found in {found}/{C5_NEEDLE_SEEDS}"));
    }

    // Visit accounting.
    let mut trees = 0;
    for seed in 0..50u64 {
        let mut r = ChaCha8Rng::seed_from_u64(mix_seed(&[41, seed]));
        let space = SpaceConfig::new(3, 3, 0).unwrap();
        let gen = TabularGenerator::random(space, 1.5, &mut r).unwrap();
        let disc = random_disc(space, 1.5, &mut r);
        let rounds = r.random_range(1..80);
        let cfg = MctsConfig { c_puct: r.random_range(0.0..3.0), rounds, sigma: r.random_range(0.2..=1.0), mode: MctsMode::Unconditional };
        let mut tree = MctsTree::new(&gen, &disc, 0, &[], cfg).unwrap();
        tree.run();
        trees += 1;
        let nodes = tree.nodes();
        let root_sum: u32 = tree.root().children.iter().map(|&c| nodes[c].visits).sum();
        if root_sum != rounds {
            problems.push(format!("tree {seed}: root children visited {root_sum} times over {rounds} rounds"));
        }
        for (id, node) in nodes.iter().enumerate().skip(1) {
            let child_sum: u32 = node.children.iter().map(|&c| nodes[c].visits).sum();
            if node.visits == 0 && (node.value != 0.0 || node.evaluated) {
                problems.push(format!("tree {seed}: unvisited node {id} carries a value"));
            }
            if node.visits > 0 && !node.terminal && node.visits != 1 + child_sum {
                problems.push(format!("tree {seed}: node {id} has {} visits, children {child_sum}", node.visits));
            }
            let best_child = node.children.iter().filter(|&&c| nodes[c].evaluated).map(|&c| nodes[c].value).fold(f64::NEG_INFINITY, f64::max);
            if node.evaluated && best_child > node.value {
                problems.push(format!("tree {seed}: node {id} value below its best child"));
            }
        }
    }

    check(
        problems.is_empty(),
        format!(
            "{C5_CATEGORICALS} categoricals, 12 mixtures over |Y|=39 with {draws_checked} weighted draws, needle found {found}/{C5_NEEDLE_SEEDS} (uniform prior; {found_random_prior}/{C5_NEEDLE_SEEDS} under random logits of scale 1), {trees} trees audited{}",
            fmt_problems(&problems)
        ),
    )
}

// ---------------------------------------------------------------------------
// Training

/// The seeded toy benchmark: two outcomes, p_d = (0.8, 0.2).
fn toy(variant: Variant, seed: u64) -> TrainConfig {
    let space = SpaceConfig::new(2, 1, 0).unwrap();
    let mut cfg = TrainConfig::new(space, TargetSpec::Table { probs: vec![vec![0.8, 0.2]] });
    cfg.variant = variant;
    cfg.seed = seed;
    if variant == Variant::GanScheduler {
        // Tuned on validation seeds 100..110 with the shared lr and batch size.
        cfg.scheduler = Scheduler::Linear { start: 0.008, end: 0.0 };
    }
    cfg
}

fn variant_ordering() -> Outcome {
    let mut timing = Vec::new();
    let mut finals = std::collections::BTreeMap::new();
    for v in [Variant::Gcn, Variant::GanScheduler, Variant::Gan] {
        let started = Instant::now();
        let kls: Vec<f64> = (0..C6_SEEDS).map(|s| train(&toy(v, s)).unwrap().final_kl()).collect();
        timing.push((v, started.elapsed().as_secs_f64()));
        finals.insert(v.name(), kls);
    }
    let (gcn, sched, gan) = (&finals["gcn"], &finals["gan_scheduler"], &finals["gan"]);
    let first = (0..C6_SEEDS as usize).filter(|&i| gcn[i] <= sched[i]).count();
    let second = (0..C6_SEEDS as usize).filter(|&i| sched[i] < gan[i]).count();
    let both = (0..C6_SEEDS as usize).filter(|&i| gcn[i] <= sched[i] && sched[i] < gan[i]).count();

    let started = Instant::now();
    let mut cfg = toy(Variant::ExpD, 0);
    cfg.init = InitSpec::Target;
    let run = train(&cfg).unwrap();
    timing.push((Variant::ExpD, started.elapsed().as_secs_f64()));
    let first_kl = run.records.first().map_or(0.0, |r| r.kl_exact);
    let rising = run.final_kl() > run.initial_kl + 1e-3 && run.final_kl() > first_kl;

    let slowest = timing.iter().map(|t| t.1).fold(0.0, f64::max);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>().join(" ");
    check(
        both >= C6_MIN_ORDERED && rising && slowest <= C6_BUDGET_S,
        format!(
            "gcn<=gan_scheduler in {first}/10, gan_scheduler<gan in {second}/10, both in {both}/10 (need {C6_MIN_ORDERED}); \
             terminal KL gcn [{}] gan_scheduler [{}] gan [{}]; exp_d from p_d: KL {:.1e} -> {:.4} over {} iters ({:?}); slowest variant {slowest:.1}s",
            fmt(gcn),
            fmt(sched),
            fmt(gan),
            run.initial_kl,
            run.final_kl(),
            run.records.len(),
            run.status,
        ),
    )
}

fn scale_invariance() -> Outcome {
    let space = SpaceConfig::new(2, 2, 2).unwrap();
    let mut cfg = TrainConfig::new(space, TargetSpec::Dirichlet { alpha: 0.5, seed: 9 });
    cfg.iters = 60;
    cfg.batch_size = 256;
    cfg.qhat = gcnlab::trainer::QhatKind::Nucleus;
    cfg.sigma = 0.5;
    let base = train_with(&cfg, TrainOptions { weight_scale: 1.0 }).unwrap();
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for c in [0.5, 0.3, 1e-3] {
        let run = train_with(&cfg, TrainOptions { weight_scale: c }).unwrap();
        let mut gap: f64 = 0.0;
        for (a, b) in base.records.iter().zip(&run.records) {
            gap = gap.max((a.grad_norm - b.grad_norm).abs()).max((a.kl_exact - b.kl_exact).abs());
        }
        for ((_, _, a), (_, _, b)) in base.generator.table().sorted_entries().iter().zip(run.generator.table().sorted_entries()) {
            for (x, y) in a.iter().zip(b) {
                gap = gap.max((x - y).abs());
            }
        }
        if run.records.len() != base.records.len() {
            gap = f64::INFINITY;
        }
        notes.push(format!("c={c}: {gap:.1e}"));
        worst = worst.max(gap);
    }
    // The raw-sum variant is not invariant, which is the point of the contrast.
    let mut raw = cfg.clone();
    raw.variant = Variant::Gan;
    let a = train_with(&raw, TrainOptions { weight_scale: 1.0 }).unwrap();
    let b = train_with(&raw, TrainOptions { weight_scale: 0.5 }).unwrap();
    let raw_gap = (a.records[0].grad_norm - b.records[0].grad_norm).abs();
    check(
        worst <= C7_TOL && raw_gap > 1e-6,
        format!(
            "gcn over {} iterations, max |difference| in steps/KL/logits {}; raw-sum variant first step differs by {raw_gap:.2e}",
            cfg.iters,
            notes.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// Determinism

const CONFIG: &str = "\
space.vocab_size = 3
space.max_len = 3
space.num_contexts = 2
target.kind = hidden
target.scale = 1.5
target.seed = 4
trainer.qhat = mcts
trainer.iters = 12
trainer.batch_size = 96
trainer.seed = 7
mcts.rounds = 20
mcts.sigma = 0.5
exact.p0 = dirichlet
exact.p0_seed = 3
";

fn gcnlab(args: &[&str], threads: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gcnlab"))
        .args(args)
        .env("GCNLAB_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("gcnlab {} exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn run_all(dir: &Path, threads: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, CONFIG).map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let train_dir = dir.join("train");
    let exact_dir = dir.join("exact");
    let curves_dir = dir.join("curves");
    let ck = train_dir.join("checkpoint.json");
    let trace = dir.join("trace.json");
    gcnlab(&["train", "--config", &s(&cfg), "--out", &s(&train_dir), "--seed", "5"], threads)?;
    gcnlab(&["exact", "--config", &s(&cfg), "--out", &s(&exact_dir)], threads)?;
    gcnlab(&["curves", "--checkpoint", &s(&ck), "--out", &s(&curves_dir), "--temps", "0.5,1,1.5"], threads)?;
    gcnlab(&["dump-mcts", "--checkpoint", &s(&ck), "--context", "1", "--out", &s(&trace)], threads)?;
    let files = [
        train_dir.join("iters.csv"),
        ck,
        exact_dir.join("exact_dynamics.csv"),
        curves_dir.join("curves.csv"),
        trace,
    ];
    files
        .iter()
        .map(|f| {
            std::fs::read(f)
                .map(|b| (f.file_name().unwrap().to_string_lossy().into_owned(), b))
                .map_err(|e| format!("{}: {e}", f.display()))
        })
        .collect()
}

fn determinism() -> Outcome {
    let runs: Vec<_> = [("1", 'a'), ("1", 'b'), ("4", 'c')]
        .iter()
        .map(|(threads, _)| {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            run_all(dir.path(), threads)
        })
        .collect::<Result<_, _>>()?;
    let mut mismatched = Vec::new();
    for other in &runs[1..] {
        for ((name, a), (_, b)) in runs[0].iter().zip(other) {
            if a != b {
                mismatched.push(name.clone());
            }
        }
    }
    let sizes: Vec<String> = runs[0].iter().map(|(n, b)| format!("{n} {}B", b.len())).collect();
    check(
        mismatched.is_empty(),
        format!(
            "train/exact/curves/dump-mcts run 3 times (1, 1 and 4 threads): {}{}",
            sizes.join(", "),
            if mismatched.is_empty() { String::new() } else { format!("; differing: {}", mismatched.join(", ")) }
        ),
    )
}
