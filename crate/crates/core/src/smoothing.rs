//! The Gaussian smoothed classifier and its Monte-Carlo certification:
//! vote with n0 selection samples, lower-bound the top-class probability
//! with n estimation samples and a Clopper-Pearson bound, and convert the
//! bound into a certified L2 radius.

use crate::corruption::ImageTensor;
use crate::error::{Error, Result};
use crate::numerics::{
    binom_two_sided_pvalue, clopper_pearson_lower, std_normal_cdf, std_normal_quantile,
    ConfidenceParams, Probability, RngStream,
};

/// Anything that maps a (noisy) image to a class index. Implementations
/// must be safe to call concurrently with shared references.
pub trait BaseClassifier: Sync {
    fn num_classes(&self) -> usize;
    /// Classify a batch of images; one class index per input.
    fn predict_batch(&self, images: &[ImageTensor]) -> Result<Vec<usize>>;
}

impl<T: BaseClassifier + ?Sized> BaseClassifier for &T {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn predict_batch(&self, images: &[ImageTensor]) -> Result<Vec<usize>> {
        (**self).predict_batch(images)
    }
}

/// Certified radius from two-sided probability bounds:
/// (sigma/2) * (quantile(pA) - quantile(pB)).
pub fn certified_radius_two_sided(pa: Probability, pb: Probability, sigma: f64) -> Result<f64> {
    let (pa, pb) = (pa.value(), pb.value());
    if !(sigma > 0.0) {
        return Err(Error::domain(format!("sigma must be > 0, got {sigma}")));
    }
    if !(0.0 < pb && pb <= pa && pa < 1.0) {
        return Err(Error::domain(format!(
            "need 0 < pB <= pA < 1, got pA = {pa}, pB = {pb}"
        )));
    }
    let qa = std_normal_quantile(Probability::clamped(pa))?;
    let qb = std_normal_quantile(Probability::clamped(pb))?;
    Ok(0.5 * sigma * (qa - qb))
}

/// The simpler one-sided bound sigma * quantile(pA_lower). Negative when
/// pA_lower < 1/2; callers treat that as ABSTAIN.
pub fn certified_radius_lower(pa_lower: Probability, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::domain(format!("sigma must be > 0, got {sigma}")));
    }
    let p = pa_lower.value();
    if !(0.0 < p && p < 1.0) {
        return Err(Error::domain(format!("need 0 < pA_lower < 1, got {p}")));
    }
    Ok(sigma * std_normal_quantile(pa_lower)?)
}

/// Closed-form smoothed top-class probability of the linear classifier
/// sign(w . x + b): the Gaussian measure of a half-space,
/// cdf((w . x + b) / (sigma * ||w||)). Test oracle for soundness checks.
pub fn true_smoothed_prob_linear(
    w: &[f64],
    b: f64,
    x: &ImageTensor,
    sigma: f64,
) -> Result<Probability> {
    if w.len() != x.num_pixels() {
        return Err(Error::shape(format!(
            "weight vector has {} entries for {} pixels",
            w.len(),
            x.num_pixels()
        )));
    }
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::domain("weight vector must be nonzero"));
    }
    if !(sigma > 0.0) {
        return Err(Error::domain(format!("sigma must be > 0, got {sigma}")));
    }
    let margin: f64 = w.iter().zip(&x.pixels).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
    Ok(std_normal_cdf(margin / (sigma * norm)))
}

/// Monte-Carlo vote counts for `count` noisy copies of `x`, invoking the
/// base classifier in batches of `batch`. Noise is drawn contiguously per
/// image, so the counts are independent of the batch size.
fn sample_votes<C: BaseClassifier>(
    base: &C,
    x: &ImageTensor,
    sigma: f64,
    count: u64,
    batch: usize,
    rng: &mut RngStream,
) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; base.num_classes()];
    let mut remaining = count;
    let mut images = Vec::with_capacity(batch);
    while remaining > 0 {
        let take = (remaining as usize).min(batch.max(1));
        images.clear();
        for _ in 0..take {
            images.push(x.add_gaussian_noise(rng, sigma));
        }
        let classes = base.predict_batch(&images)?;
        if classes.len() != take {
            return Err(Error::shape(format!(
                "base classifier returned {} labels for {take} inputs",
                classes.len()
            )));
        }
        for &c in &classes {
            if c >= counts.len() {
                return Err(Error::domain(format!(
                    "base classifier returned class {c} >= num_classes {}",
                    counts.len()
                )));
            }
            counts[c] += 1;
        }
        remaining -= take as u64;
    }
    Ok(counts)
}

fn argmax_break_low(counts: &[u64]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate().skip(1) {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Outcome of certification for one input: the predicted class (or
/// abstention) and the certified radius (0 when abstaining).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertOutcome {
    pub prediction: Option<usize>,
    pub radius: f64,
    /// Lower confidence bound on the top-class probability; present even
    /// on abstention, for diagnostics.
    pub p_lower: f64,
}

impl CertOutcome {
    pub fn abstain(p_lower: f64) -> Self {
        CertOutcome { prediction: None, radius: 0.0, p_lower }
    }
}

/// Per-example certification record as written to the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct CertResult {
    pub example_id: usize,
    pub label: usize,
    pub prediction: Option<usize>,
    pub radius: f64,
    pub correct: bool,
    pub seconds: f64,
    /// Set when certification failed numerically and the record was
    /// downgraded to an abstention.
    pub failed: bool,
}

impl CertResult {
    pub fn from_outcome(
        example_id: usize,
        label: usize,
        outcome: &CertOutcome,
        seconds: f64,
    ) -> Self {
        CertResult {
            example_id,
            label,
            prediction: outcome.prediction,
            radius: outcome.radius,
            correct: outcome.prediction == Some(label),
            seconds,
            failed: false,
        }
    }

    pub fn failure(example_id: usize, label: usize, seconds: f64) -> Self {
        CertResult {
            example_id,
            label,
            prediction: None,
            radius: 0.0,
            correct: false,
            seconds,
            failed: true,
        }
    }
}

/// A Gaussian smoothed classifier around a base classifier.
pub struct SmoothedClassifier<C> {
    base: C,
    sigma: f64,
    num_classes: usize,
}

impl<C: BaseClassifier> SmoothedClassifier<C> {
    pub fn new(base: C, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::domain(format!(
                "smoothing requires sigma > 0, got {sigma}"
            )));
        }
        let num_classes = base.num_classes();
        if num_classes < 2 {
            return Err(Error::domain("smoothing requires at least two classes"));
        }
        Ok(SmoothedClassifier { base, sigma, num_classes })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Certify one input: select the majority class with n0 samples,
    /// estimate its probability lower bound with n fresh samples, and
    /// abstain unless the bound exceeds 1/2.
    ///
    /// Selection and estimation use disjoint substreams of `rng`,
    /// checked by stream accounting.
    pub fn certify(
        &self,
        x: &ImageTensor,
        cp: &ConfidenceParams,
        batch: usize,
        rng: &RngStream,
    ) -> Result<CertOutcome> {
        cp.validate()?;
        let d = x.num_pixels() as u64;

        let mut selection = rng.substream(0);
        let counts0 = sample_votes(&self.base, x, self.sigma, cp.n0, batch, &mut selection)?;
        debug_assert_eq!(selection.position(), cp.n0 * d, "selection stream accounting");
        let candidate = argmax_break_low(&counts0);

        let mut estimation = rng.substream(1);
        let counts = sample_votes(&self.base, x, self.sigma, cp.n, batch, &mut estimation)?;
        debug_assert_eq!(estimation.position(), cp.n * d, "estimation stream accounting");
        let hits = counts[candidate];

        let p_lower = clopper_pearson_lower(hits, cp.n, cp.alpha())?;
        if p_lower.value() <= 0.5 {
            return Ok(CertOutcome::abstain(p_lower.value()));
        }
        let radius = certified_radius_lower(p_lower, self.sigma)?;
        Ok(CertOutcome {
            prediction: Some(candidate),
            radius,
            p_lower: p_lower.value(),
        })
    }

    /// Predict with abstention: return the top vote class only if an
    /// exact binomial test rejects a tie with the runner-up at level
    /// `alpha`.
    pub fn predict(
        &self,
        x: &ImageTensor,
        n: u64,
        alpha: Probability,
        batch: usize,
        rng: &RngStream,
    ) -> Result<Option<usize>> {
        if n < 2 {
            return Err(Error::domain("predict requires n >= 2"));
        }
        let mut stream = rng.substream(2);
        let counts = sample_votes(&self.base, x, self.sigma, n, batch, &mut stream)?;
        let top = argmax_break_low(&counts);
        let runner = (0..counts.len())
            .filter(|&c| c != top)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("at least two classes");
        let k1 = counts[top];
        let k2 = counts[runner];
        let pval = binom_two_sided_pvalue(k1, k1 + k2)?;
        if pval.value() <= alpha.value() {
            Ok(Some(top))
        } else {
            Ok(None)
        }
    }
}
