//! Scalar statistics shared across modules: moments, quantiles, log-sum-exp,
//! and the handful of log-densities the model is written in terms of.

use statrs::function::gamma::ln_gamma;

pub const LN_2PI: f64 = 1.8378770664093453;

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (n - 1 denominator).
pub fn sample_var(xs: &[f64]) -> f64 {
    assert!(xs.len() > 1);
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Quantile with linear interpolation between order statistics, the same
/// convention R calls type 7. `p` in [0, 1].
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    assert!(!xs.is_empty());
    assert!((0.0..=1.0).contains(&p));
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample in quantile"));
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 == sorted.len() {
        return sorted[lo];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normal log-density parameterized by variance.
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    debug_assert!(var > 0.0);
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln()) - 0.5 * d * d / var
}

/// Inverse-gamma log-density with shape `a` and rate `b`:
/// a*ln b - lnGamma(a) - (a+1)*ln x - b/x. Negative infinity off the
/// positive half-line.
pub fn invgamma_logpdf(x: f64, a: f64, b: f64) -> f64 {
    debug_assert!(a > 0.0 && b > 0.0);
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

/// Uniform log-density on [lo, hi].
pub fn uniform_logpdf(x: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(hi > lo);
    if x < lo || x > hi {
        f64::NEG_INFINITY
    } else {
        -(hi - lo).ln()
    }
}
