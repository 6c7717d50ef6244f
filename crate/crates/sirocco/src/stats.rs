//! Small numeric helpers shared across modules: count-distribution log
//! probabilities, the logistic link, and the quantile convention used by
//! every summary output.
//!
//! Log-pmf helpers return negative infinity outside the support instead of
//! erroring; Metropolis steps treat that as an automatic rejection.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use statrs::function::gamma::ln_gamma;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Binomial(trials, p) draw with the obvious boundary conventions:
/// non-positive trials or p <= 0 give 0, p >= 1 gives every trial.
pub fn binomial_draw<R: Rng + ?Sized>(trials: i64, p: f64, rng: &mut R) -> i64 {
    debug_assert!(trials >= 0, "binomial trials must be non-negative");
    debug_assert!((0.0..=1.0).contains(&p));
    if trials <= 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return trials;
    }
    Binomial::new(trials as u64, p)
        .expect("validated binomial parameters")
        .sample(rng) as i64
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn inv_logit(x: f64) -> f64 {
    // Split by sign to avoid overflow in exp for large |x|.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn ln_factorial(k: u64) -> f64 {
    ln_gamma(k as f64 + 1.0)
}

pub fn ln_choose(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// log P[X = k] for X ~ Poisson(lambda).
///
/// lambda = 0 is a point mass at zero; negative counts or rates have no
/// probability.
pub fn poisson_ln_pmf(k: i64, lambda: f64) -> f64 {
    if k < 0 || lambda < 0.0 || !lambda.is_finite() {
        return f64::NEG_INFINITY;
    }
    if lambda == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let kf = k as f64;
    kf * lambda.ln() - lambda - ln_factorial(k as u64)
}

/// log P[X >= k] for X ~ Poisson(lambda): the mass a censored draw piles
/// onto its cap.
pub fn poisson_tail_ln(k: i64, lambda: f64) -> f64 {
    if lambda < 0.0 || !lambda.is_finite() {
        return f64::NEG_INFINITY;
    }
    if k <= 0 {
        return 0.0;
    }
    if lambda == 0.0 {
        return f64::NEG_INFINITY;
    }
    // P[X >= k] is the regularized lower incomplete gamma at (k, lambda).
    let reg = statrs::function::gamma::gamma_lr(k as f64, lambda);
    if reg > 1e-290 {
        return reg.ln();
    }
    // Deep tail underflows the regularized form; sum a stretch of pmf terms
    // in log space instead (the series decays geometrically out here).
    let head = poisson_ln_pmf(k, lambda);
    let mut sum = 0.0;
    let mut term = 1.0;
    for j in 1..=60 {
        term *= lambda / (k + j) as f64;
        sum += term;
        if term < 1e-18 {
            break;
        }
    }
    head + (1.0 + sum).ln()
}

/// log P[X = k] for X ~ Binomial(n, p).
pub fn binomial_ln_pmf(k: i64, n: i64, p: f64) -> f64 {
    if k < 0 || n < 0 || k > n || !(0.0..=1.0).contains(&p) {
        return f64::NEG_INFINITY;
    }
    if p == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if p == 1.0 {
        return if k == n { 0.0 } else { f64::NEG_INFINITY };
    }
    let (kf, nf) = (k as f64, n as f64);
    ln_choose(n as u64, k as u64) + kf * p.ln() + (nf - kf) * (1.0 - p).ln()
}

/// log P[X >= k] for X ~ Binomial(n, p): the mass a censored draw piles
/// onto its cap.
pub fn binomial_tail_ln(k: i64, n: i64, p: f64) -> f64 {
    if n < 0 || !(0.0..=1.0).contains(&p) {
        return f64::NEG_INFINITY;
    }
    if k <= 0 {
        return 0.0;
    }
    if k > n {
        return f64::NEG_INFINITY;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY; // k >= 1 here
    }
    if p == 1.0 {
        return 0.0;
    }
    // P[X >= k] = I_p(k, n - k + 1), the regularized incomplete beta.
    let reg = statrs::function::beta::beta_reg(k as f64, (n - k + 1) as f64, p);
    if reg > 1e-290 {
        return reg.ln();
    }
    // Deep tail: sum pmf terms relative to the head in log space.
    let head = binomial_ln_pmf(k, n, p);
    let odds = p / (1.0 - p);
    let mut sum = 0.0;
    let mut term = 1.0;
    for j in 1..=(n - k).min(60) {
        term *= odds * (n - k - j + 1) as f64 / (k + j) as f64;
        sum += term;
        if term < 1e-18 {
            break;
        }
    }
    head + (1.0 + sum).ln()
}

/// log P[counts] for a multinomial with the given cell probabilities.
/// Zero-probability cells force their counts to zero.
pub fn multinomial_ln_pmf(counts: &[i64], probs: &[f64]) -> f64 {
    assert_eq!(counts.len(), probs.len(), "multinomial shape mismatch");
    let total: i64 = counts.iter().sum();
    if counts.iter().any(|&c| c < 0) {
        return f64::NEG_INFINITY;
    }
    let mut lp = ln_factorial(total as u64);
    for (&c, &p) in counts.iter().zip(probs) {
        if p <= 0.0 {
            if c != 0 {
                return f64::NEG_INFINITY;
            }
            continue;
        }
        lp += c as f64 * p.ln() - ln_factorial(c as u64);
    }
    lp
}

/// log density of N(mean, var) at x.
pub fn normal_ln_pdf(x: f64, mean: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let z = x - mean;
    -0.5 * (LN_2PI + var.ln()) - 0.5 * z * z / var
}

/// log density of Beta(a, b) at x.
pub fn beta_ln_pdf(x: f64, a: f64, b: f64) -> f64 {
    if !(0.0..=1.0).contains(&x) || a <= 0.0 || b <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if (x == 0.0 && a < 1.0) || (x == 1.0 && b < 1.0) {
        return f64::INFINITY;
    }
    let norm = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b);
    norm + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln()
}

/// log density of Gamma(shape, rate) at x.
pub fn gamma_ln_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 || shape <= 0.0 || rate <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// log density of InverseGamma(shape, scale) at x.
pub fn inv_gamma_ln_pdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 || shape <= 0.0 || scale <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// Sample quantile with linear interpolation between order statistics:
/// rank h = (n - 1) * level, interpolating x[floor(h)] and x[floor(h) + 1].
///
/// `sorted` must be ascending. With values {1..=100}, levels (0.25, 0.5,
/// 0.75) give (25.75, 50.5, 75.25).
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    assert!((0.0..=1.0).contains(&level), "quantile level outside [0, 1]");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * level;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Sorts a copy of the sample and evaluates [`quantile_sorted`].
pub fn quantile(sample: &[f64], level: f64) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("NaN in quantile sample"));
    quantile_sorted(&v, level)
}
