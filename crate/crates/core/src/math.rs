//! Small numerically careful helpers shared by the models and oracles.

/// `log(sum(exp(xs)))`, returning `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax over the entries where `mask` is true; masked-out entries get 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool], temperature: f64) -> Vec<f64> {
    debug_assert_eq!(logits.len(), mask.len());
    let scaled: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l / temperature } else { f64::NEG_INFINITY })
        .collect();
    let lse = log_sum_exp(&scaled);
    scaled
        .iter()
        .map(|&s| if s == f64::NEG_INFINITY { 0.0 } else { (s - lse).exp() })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without cancellation for large negative `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Derives an independent stream seed from a tuple of integers (splitmix64
/// finalizer folded over the parts), so per-item randomness does not depend
/// on scheduling order.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
