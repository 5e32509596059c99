//! Scalar statistics and randomness with exact contracts: Gaussian
//! CDF/quantile, Clopper-Pearson lower confidence bounds, exact binomial
//! tests, and reproducible seeded Gaussian sampling.

mod binomial;
mod erf;
mod normal;
mod rng;

pub use binomial::{binom_two_sided_pvalue, clopper_pearson_lower, ln_choose, ln_gamma, reg_inc_beta};
pub use erf::{erf, erfc};
pub use normal::{std_normal_cdf, std_normal_pdf, std_normal_quantile};
pub use rng::{gaussian_sample, RngStream};

use crate::error::{Error, Result};

/// A probability value, guaranteed to lie in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Probability(f64);

impl Probability {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || !(0.0..=1.0).contains(&value) {
            return Err(Error::domain(format!(
                "probability must lie in [0,1], got {value}"
            )));
        }
        Ok(Probability(value))
    }

    /// Clamp tiny numerical excursions back into [0, 1]; NaN is a bug.
    pub fn clamped(value: f64) -> Self {
        assert!(!value.is_nan(), "probability is NaN");
        Probability(value.clamp(0.0, 1.0))
    }

    pub fn zero() -> Self {
        Probability(0.0)
    }

    pub fn one() -> Self {
        Probability(1.0)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl std::fmt::Display for Probability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Monte-Carlo certification parameters: `n0` selection samples, `n`
/// estimation samples, one-sided failure probability `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceParams {
    pub alpha: f64,
    pub n0: u64,
    pub n: u64,
}

impl ConfidenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::domain(format!(
                "alpha must lie in (0,1), got {}",
                self.alpha
            )));
        }
        if self.n0 < 1 || self.n < self.n0 {
            return Err(Error::domain(format!(
                "need n >= n0 >= 1, got n0 = {}, n = {}",
                self.n0, self.n
            )));
        }
        Ok(())
    }

    pub fn alpha(&self) -> Probability {
        Probability::clamped(self.alpha)
    }
}
