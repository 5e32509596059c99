//! Exact binomial confidence bounds and tests.
//!
//! `clopper_pearson_lower` is the one-sided lower confidence bound used to
//! turn Monte-Carlo vote counts into a certified probability; it is
//! evaluated by bisection on the regularized incomplete beta function
//! rather than through a statistics library's quantile, so its tolerance
//! is pinned here (1e-12).

use super::Probability;
use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(z) for z > 0 (Lanczos, g = 7, 9 terms; ~1e-13 relative).
pub fn ln_gamma(z: f64) -> f64 {
    if z < 0.5 {
        // reflection: Γ(z)Γ(1-z) = π / sin(πz)
        let pi = std::f64::consts::PI;
        return pi.ln() - (pi * z).sin().ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut x = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        x += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}

/// ln C(n, k).
pub fn ln_choose(n: u64, k: u64) -> f64 {
    debug_assert!(k <= n);
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Continued-fraction kernel for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 400;
    const EPS: f64 = 1e-15;
    const FPMIN: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b) for a, b > 0, x ∈ [0, 1].
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn validate_counts(k: u64, n: u64) -> Result<()> {
    if n == 0 {
        return Err(Error::domain("binomial bound requires n >= 1"));
    }
    if k > n {
        return Err(Error::domain(format!("k = {k} exceeds n = {n}")));
    }
    Ok(())
}

/// One-sided Clopper-Pearson lower confidence bound: the alpha-quantile of
/// Beta(k, n - k + 1), with k = 0 defined as 0 and k = n evaluated in
/// closed form as alpha^(1/n).
pub fn clopper_pearson_lower(k: u64, n: u64, alpha: Probability) -> Result<Probability> {
    validate_counts(k, n)?;
    let alpha = alpha.value();
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!(
            "confidence level alpha must lie in (0,1), got {alpha}"
        )));
    }
    if k == 0 {
        return Ok(Probability::zero());
    }
    if k == n {
        return Ok(Probability::clamped(alpha.powf(1.0 / n as f64)));
    }
    // P[Bin(n, p) >= k] = I_p(k, n-k+1) is increasing in p; bisect for the
    // point where it crosses alpha.
    let a = k as f64;
    let b = (n - k) as f64 + 1.0;
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if reg_inc_beta(a, b, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Probability::clamped(0.5 * (lo + hi)))
}

/// Exact two-sided binomial test p-value for k successes in n trials
/// against success probability 1/2.
pub fn binom_two_sided_pvalue(k: u64, n: u64) -> Result<Probability> {
    if k > n {
        return Err(Error::domain(format!("k = {k} exceeds n = {n}")));
    }
    let m = k.max(n - k);
    if 2 * m == n {
        return Ok(Probability::one());
    }
    // By symmetry at p = 1/2 the two tails have equal mass, so the
    // two-sided p-value is min(1, 2 P[X >= m]). Terms decrease from i = m
    // because m > n/2, so the sum converges quickly.
    let ln2 = std::f64::consts::LN_2;
    let mut term = (ln_choose(n, m) - n as f64 * ln2).exp();
    let mut sum = 0.0;
    for i in m..=n {
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
        term *= (n - i) as f64 / (i + 1) as f64;
    }
    Ok(Probability::clamped((2.0 * sum).min(1.0)))
}
