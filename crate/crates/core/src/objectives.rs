//! Loss functions: all-patch reconstruction MSE for pre-training,
//! noisy-input cross-entropy for plain robust fine-tuning, and the
//! three-term consistency-regularization objective (cross-entropy +
//! KL-to-average + entropy-of-average) with Monte-Carlo noise draws.
//!
//! Probabilities are floored at 1e-12 before every logarithm, and the
//! Monte-Carlo average distribution is gradient-detached inside the KL
//! term (the entropy term sees it live).

use crate::corruption::{ImageTensor, PatchSequence, VisiblePatches};
use crate::error::{Error, Result};
use crate::model::{
    eval_loss, loss_and_grad, ClassDistribution, Grads, Graph, ModelNodes, ModelParams, NodeId,
    Scalar,
};
use crate::numerics::RngStream;
use serde::{Deserialize, Serialize};

pub const PROB_FLOOR: f64 = 1e-12;

/// Training noise level: a fixed sigma or an interval sampled uniformly
/// per example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Fixed(f64),
    Uniform { lo: f64, hi: f64 },
}

impl SigmaSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SigmaSpec::Fixed(s) if s >= 0.0 => Ok(()),
            SigmaSpec::Fixed(s) => Err(Error::domain(format!("sigma must be >= 0, got {s}"))),
            SigmaSpec::Uniform { lo, hi } if 0.0 <= lo && lo <= hi => Ok(()),
            SigmaSpec::Uniform { lo, hi } => Err(Error::domain(format!(
                "sigma interval requires 0 <= lo <= hi, got [{lo}, {hi}]"
            ))),
        }
    }
}

/// Hyperparameters of the consistency-regularization objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyHparams {
    /// KL weight.
    pub lambda: f64,
    /// Entropy weight.
    pub mu: f64,
    /// Monte-Carlo noise draws per example.
    pub m: usize,
    pub sigma: SigmaSpec,
}

impl ConsistencyHparams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.mu < 0.0 {
            return Err(Error::domain("lambda and mu must be nonnegative"));
        }
        if self.m < 1 {
            return Err(Error::domain("m must be at least 1"));
        }
        self.sigma.validate()
    }
}

/// A scalar loss with its named component breakdown where applicable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub ce: Option<f64>,
    pub kl: Option<f64>,
    pub entropy: Option<f64>,
}

impl LossValue {
    pub fn plain(total: f64) -> Self {
        LossValue { total, ce: None, kl: None, entropy: None }
    }
}

/// Mean squared error over all patches and all pixel coordinates.
pub fn reconstruction_loss(pred: &PatchSequence, target: &PatchSequence) -> Result<LossValue> {
    if pred.values.dim() != target.values.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.values.dim(),
            target.values.dim()
        )));
    }
    let n = (pred.values.nrows() * pred.values.ncols()) as f64;
    let sum: f64 = pred
        .values
        .iter()
        .zip(target.values.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(LossValue::plain(sum / n))
}

/// KL divergence Σ p ln(p/q) with 0·ln 0 = 0 and flooring at
/// [`PROB_FLOOR`]; always nonnegative for valid distributions.
pub fn kl_divergence(p: &ClassDistribution, q: &ClassDistribution) -> f64 {
    p.probs()
        .iter()
        .zip(q.probs())
        .map(|(&pi, &qi)| {
            if pi == 0.0 {
                0.0
            } else {
                pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln())
            }
        })
        .sum()
}

/// Entropy −Σ p ln p with 0·ln 0 = 0.
pub fn entropy(p: &ClassDistribution) -> f64 {
    -p.probs()
        .iter()
        .map(|&pi| if pi == 0.0 { 0.0 } else { pi * pi.max(PROB_FLOOR).ln() })
        .sum::<f64>()
}

/// One training-noise draw: the fixed sigma, or a uniform draw from the
/// configured interval.
pub fn sample_sigma(h: &ConsistencyHparams, rng: &mut RngStream) -> f64 {
    match h.sigma {
        SigmaSpec::Fixed(s) => s,
        SigmaSpec::Uniform { lo, hi } => rng.uniform_in(lo, hi),
    }
}

fn check_label<E: Scalar>(params: &ModelParams<E>, label: usize) -> Result<()> {
    if label >= params.config().num_classes {
        return Err(Error::domain(format!(
            "label {label} out of range for {} classes",
            params.config().num_classes
        )));
    }
    Ok(())
}

fn apply_noise(image: &ImageTensor, noise: &[f64]) -> Result<ImageTensor> {
    if noise.len() != image.num_pixels() {
        return Err(Error::shape(format!(
            "noise vector has {} entries for {} pixels",
            noise.len(),
            image.num_pixels()
        )));
    }
    let mut noisy = image.clone();
    for (p, n) in noisy.pixels.iter_mut().zip(noise) {
        *p += n;
    }
    Ok(noisy)
}

// ---------------------------------------------------------------------
// graph builders (shared by training and the public wrappers)
// ---------------------------------------------------------------------

/// Reconstruction MSE node: decode the encoded visible patches and
/// compare against the clean full-grid target.
pub(crate) fn build_reconstruction<E: Scalar>(
    g: &mut Graph<E>,
    nodes: &ModelNodes,
    params: &ModelParams<E>,
    visible: &VisiblePatches,
    target: &PatchSequence,
) -> Result<NodeId> {
    let latents = crate::model::encode_seq(g, nodes, params, &visible.values, &visible.indices, false);
    let pred = crate::model::decode_seq(g, nodes, params, latents, &visible.indices)?;
    let tgt = g.constant_from_f64(&target.values);
    let diff = g.sub(pred, tgt);
    let sq = g.mul_elem(diff, diff);
    Ok(g.mean_all(sq))
}

/// Cross-entropy of the classifier on one (already noisy) image.
fn build_ce<E: Scalar>(
    g: &mut Graph<E>,
    nodes: &ModelNodes,
    params: &ModelParams<E>,
    noisy: &ImageTensor,
    label: usize,
) -> Result<(NodeId, NodeId)> {
    let probs = crate::model::classify_probs(g, nodes, params, noisy)?;
    let p_label = g.slice_cols(probs, label, 1);
    let floored = g.clamp_min(p_label, E::from_f64(PROB_FLOOR));
    let ln_p = g.ln(floored);
    let ce = g.scale(ln_p, E::from_f64(-1.0));
    Ok((probs, ce))
}

pub(crate) struct ConsistencyNodes {
    pub total: NodeId,
    pub ce: NodeId,
    pub kl: NodeId,
    pub entropy: NodeId,
}

/// The three-term objective over `m` pre-noised copies of one example:
/// mean CE + lambda * mean KL(detached average || per-draw) + mu *
/// H(average).
pub(crate) fn build_consistency<E: Scalar>(
    g: &mut Graph<E>,
    nodes: &ModelNodes,
    params: &ModelParams<E>,
    noisy_images: &[ImageTensor],
    label: usize,
    lambda: f64,
    mu: f64,
) -> Result<ConsistencyNodes> {
    let m = noisy_images.len();
    debug_assert!(m >= 1);
    let floor = E::from_f64(PROB_FLOOR);

    let mut prob_ids = Vec::with_capacity(m);
    let mut ce_ids = Vec::with_capacity(m);
    for noisy in noisy_images {
        let (probs, ce) = build_ce(g, nodes, params, noisy, label)?;
        prob_ids.push(probs);
        ce_ids.push(ce);
    }
    let ce_stack = g.concat_rows(&ce_ids);
    let ce = g.mean_all(ce_stack);

    let stacked = g.concat_rows(&prob_ids);
    let avg = g.mean_over_rows(stacked);
    let avg_const = g.detach(avg);

    let floored_avg_const = g.clamp_min(avg_const, floor);
    let ln_avg_const = g.ln(floored_avg_const);
    let mut kl_ids = Vec::with_capacity(m);
    for &probs in &prob_ids {
        let floored = g.clamp_min(probs, floor);
        let ln_q = g.ln(floored);
        let diff = g.sub(ln_avg_const, ln_q);
        let weighted = g.mul_elem(avg_const, diff);
        kl_ids.push(g.sum_all(weighted));
    }
    let kl_stack = g.concat_rows(&kl_ids);
    let kl = g.mean_all(kl_stack);

    let floored_avg = g.clamp_min(avg, floor);
    let ln_avg = g.ln(floored_avg);
    let plogp = g.mul_elem(avg, ln_avg);
    let neg_entropy = g.sum_all(plogp);
    let entropy = g.scale(neg_entropy, E::from_f64(-1.0));

    let kl_term = g.scale(kl, E::from_f64(lambda));
    let ent_term = g.scale(entropy, E::from_f64(mu));
    let reg = g.add(kl_term, ent_term);
    let total = g.add(ce, reg);
    Ok(ConsistencyNodes { total, ce, kl, entropy })
}

// ---------------------------------------------------------------------
// public operations
// ---------------------------------------------------------------------

/// Pre-training objective value on one corrupted example.
pub fn dmae_loss<E: Scalar>(
    params: &ModelParams<E>,
    visible: &VisiblePatches,
    target: &PatchSequence,
) -> Result<LossValue> {
    let total = eval_loss(params, |g, nodes| {
        build_reconstruction(g, nodes, params, visible, target)
    })?;
    Ok(LossValue::plain(total))
}

/// Pre-training objective with gradients.
pub fn dmae_loss_grad<E: Scalar>(
    params: &ModelParams<E>,
    visible: &VisiblePatches,
    target: &PatchSequence,
) -> Result<(LossValue, Grads<E>)> {
    let (total, grads) = loss_and_grad(params, |g, nodes| {
        build_reconstruction(g, nodes, params, visible, target)
    })?;
    Ok((LossValue::plain(total), grads))
}

/// Plain robust-training loss: cross-entropy on a single noisy copy.
pub fn rs_loss<E: Scalar>(
    params: &ModelParams<E>,
    image: &ImageTensor,
    label: usize,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<LossValue> {
    if !(sigma >= 0.0) {
        return Err(Error::domain(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut noise = vec![0.0; image.num_pixels()];
    rng.fill_gaussian(&mut noise, sigma);
    rs_loss_with_noise(params, image, label, &noise)
}

/// [`rs_loss`] with the noise drawn by the caller; deterministic in its
/// arguments, which is what finite-difference checks need.
pub fn rs_loss_with_noise<E: Scalar>(
    params: &ModelParams<E>,
    image: &ImageTensor,
    label: usize,
    noise: &[f64],
) -> Result<LossValue> {
    check_label(params, label)?;
    let noisy = apply_noise(image, noise)?;
    let total = eval_loss(params, |g, nodes| {
        let (_, ce) = build_ce(g, nodes, params, &noisy, label)?;
        Ok(ce)
    })?;
    Ok(LossValue { total, ce: Some(total), kl: None, entropy: None })
}

pub fn rs_loss_grad_with_noise<E: Scalar>(
    params: &ModelParams<E>,
    image: &ImageTensor,
    label: usize,
    noise: &[f64],
) -> Result<(LossValue, Grads<E>)> {
    check_label(params, label)?;
    let noisy = apply_noise(image, noise)?;
    let (total, grads) = loss_and_grad(params, |g, nodes| {
        let (_, ce) = build_ce(g, nodes, params, &noisy, label)?;
        Ok(ce)
    })?;
    Ok((LossValue { total, ce: Some(total), kl: None, entropy: None }, grads))
}

/// Consistency-regularization loss; draws sigma (if an interval is
/// configured) and `m` noise vectors from the stream.
pub fn consistency_loss<E: Scalar>(
    params: &ModelParams<E>,
    image: &ImageTensor,
    label: usize,
    h: &ConsistencyHparams,
    rng: &mut RngStream,
) -> Result<LossValue> {
    h.validate()?;
    let sigma = sample_sigma(h, rng);
    let noises = draw_noises(image, h.m, sigma, rng);
    consistency_loss_with_noise(params, image, label, h, &noises)
}

pub fn draw_noises(image: &ImageTensor, m: usize, sigma: f64, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            let mut noise = vec![0.0; image.num_pixels()];
            rng.fill_gaussian(&mut noise, sigma);
            noise
        })
        .collect()
}

/// [`consistency_loss`] over caller-drawn noise vectors.
pub fn consistency_loss_with_noise<E: Scalar>(
    params: &ModelParams<E>,
    image: &ImageTensor,
    label: usize,
    h: &ConsistencyHparams,
    noises: &[Vec<f64>],
) -> Result<LossValue> {
    let (loss, _) = consistency_eval(params, image, label, h, noises, false)?;
    Ok(loss)
}

pub fn consistency_loss_grad_with_noise<E: Scalar>(
    params: &ModelParams<E>,
    image: &ImageTensor,
    label: usize,
    h: &ConsistencyHparams,
    noises: &[Vec<f64>],
) -> Result<(LossValue, Grads<E>)> {
    let (loss, grads) = consistency_eval(params, image, label, h, noises, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn consistency_eval<E: Scalar>(
    params: &ModelParams<E>,
    image: &ImageTensor,
    label: usize,
    h: &ConsistencyHparams,
    noises: &[Vec<f64>],
    with_grad: bool,
) -> Result<(LossValue, Option<Grads<E>>)> {
    h.validate()?;
    check_label(params, label)?;
    if noises.len() != h.m {
        return Err(Error::domain(format!(
            "{} noise vectors for m = {}",
            noises.len(),
            h.m
        )));
    }
    let noisy: Vec<ImageTensor> = noises
        .iter()
        .map(|n| apply_noise(image, n))
        .collect::<Result<_>>()?;

    let mut components = (0.0, 0.0, 0.0);
    let build = |g: &mut Graph<E>, nodes: &ModelNodes, comp: &mut (f64, f64, f64)| {
        let c = build_consistency(g, nodes, params, &noisy, label, h.lambda, h.mu)?;
        *comp = (
            g.scalar_value(c.ce),
            g.scalar_value(c.kl),
            g.scalar_value(c.entropy),
        );
        Ok(c.total)
    };

    let (total, grads) = if with_grad {
        let (t, gr) = loss_and_grad(params, |g, nodes| build(g, nodes, &mut components))?;
        (t, Some(gr))
    } else {
        let t = eval_loss(params, |g, nodes| build(g, nodes, &mut components))?;
        (t, None)
    };
    let loss = LossValue {
        total,
        ce: Some(components.0),
        kl: Some(components.1),
        entropy: Some(components.2),
    };
    Ok((loss, grads))
}
