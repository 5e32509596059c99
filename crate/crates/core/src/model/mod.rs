//! A small configurable asymmetric transformer encoder-decoder with a
//! classification head, plus reverse-mode gradients with a verifiable
//! differentiation contract (see `loss_and_grad` and the tape module).

mod forward;
mod params;
mod pos;
mod scalar;
mod tape;

pub use params::{BlockParams, DecoderParams, HeadNorm, ModelConfig, ModelParams, HEAD_NORM_EPS};
pub use pos::grid_pos_embed;
pub use scalar::Scalar;
pub use tape::{Graph, NodeId};

pub(crate) use forward::{
    classify_probs, decode_seq, encode_seq, insert_params, pooled_features, ModelNodes,
};

use crate::corruption::{ImageTensor, MaskPattern, PatchSequence, VisiblePatches};
use crate::error::{Error, Result};
use ndarray::Array2;

/// Per-patch representation vectors produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    /// One row per visible patch; if `includes_class_token`, row 0 is the
    /// class token and patch rows follow.
    pub values: Array2<f64>,
    /// Original grid index of each patch row.
    pub indices: Vec<usize>,
    pub includes_class_token: bool,
}

impl LatentSequence {
    pub fn num_patch_rows(&self) -> usize {
        self.values.nrows() - usize::from(self.includes_class_token)
    }
}

/// Softmax output over classes; entries are nonnegative and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::domain("distribution over zero classes"));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!(
                "not a probability distribution (sum = {sum})"
            )));
        }
        Ok(ClassDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Most probable class; ties break toward the smallest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Gradients aligned with the trainable tensors of a [`ModelParams`], in
/// canonical name order.
#[derive(Debug, Clone)]
pub struct Grads<E: Scalar> {
    entries: Vec<(String, Array2<E>)>,
}

impl<E: Scalar> Grads<E> {
    /// Gradients for an explicit subset of tensors (the others are
    /// treated as zero by consumers).
    pub fn from_entries(entries: Vec<(String, Array2<E>)>) -> Self {
        Grads { entries }
    }

    pub fn entries(&self) -> &[(String, Array2<E>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Array2<E>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<E>)> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g))
    }
}

/// Run a forward/backward pass: `build` assembles a scalar loss on the
/// tape, and the returned gradients cover every trainable tensor (zero
/// where the loss does not depend on it). Non-finite gradients are
/// reported as a numeric error naming the offending tensor.
pub(crate) fn loss_and_grad<E: Scalar>(
    params: &ModelParams<E>,
    build: impl FnOnce(&mut Graph<E>, &ModelNodes) -> Result<NodeId>,
) -> Result<(f64, Grads<E>)> {
    let mut g = Graph::new();
    let nodes = insert_params(&mut g, params);
    let loss = build(&mut g, &nodes)?;
    let loss_value = g.scalar_value(loss);
    if !loss_value.is_finite() {
        return Err(Error::numeric("loss", format!("loss is {loss_value}")));
    }
    let grads = g.backward(loss);
    let mut entries = Vec::with_capacity(nodes.param_ids.len());
    for (name, id) in &nodes.param_ids {
        let grad = match &grads[*id] {
            Some(grad) => grad.clone(),
            None => Array2::zeros(g.value(*id).dim()),
        };
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(name.clone(), "non-finite gradient"));
        }
        entries.push((name.clone(), grad));
    }
    Ok((loss_value, Grads { entries }))
}

/// Evaluate `build`'s scalar loss without the backward pass.
pub(crate) fn eval_loss<E: Scalar>(
    params: &ModelParams<E>,
    build: impl FnOnce(&mut Graph<E>, &ModelNodes) -> Result<NodeId>,
) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = insert_params(&mut g, params);
    let loss = build(&mut g, &nodes)?;
    Ok(g.scalar_value(loss))
}

impl<E: Scalar> ModelParams<E> {
    fn check_patch_input(&self, values: &Array2<f64>, indices: &[usize]) -> Result<()> {
        let cfg = self.config();
        if values.ncols() != cfg.patch_dim() {
            return Err(Error::shape(format!(
                "patch dim {} does not match configured {}",
                values.ncols(),
                cfg.patch_dim()
            )));
        }
        if values.nrows() != indices.len() {
            return Err(Error::shape(format!(
                "{} patch rows but {} indices",
                values.nrows(),
                indices.len()
            )));
        }
        if indices.iter().any(|&i| i >= cfg.num_patches()) {
            return Err(Error::shape("patch index outside the grid"));
        }
        Ok(())
    }

    /// Encode visible patches into latent vectors. Positional information
    /// comes from each patch's original grid index, so the row order of
    /// the input is free.
    pub fn encode(&self, visible: &VisiblePatches) -> Result<LatentSequence> {
        self.check_patch_input(&visible.values, &visible.indices)?;
        let include_cls = self.config().use_class_token;
        let mut g = Graph::new();
        let nodes = insert_params(&mut g, self);
        let out = encode_seq(&mut g, &nodes, self, &visible.values, &visible.indices, include_cls);
        Ok(LatentSequence {
            values: g.value(out).mapv(Scalar::to_f64),
            indices: visible.indices.clone(),
            includes_class_token: include_cls,
        })
    }

    /// Decode latents into a full-grid reconstruction: visible positions
    /// take the (embedded) latent, masked positions the mask token.
    pub fn decode(&self, latents: &LatentSequence, mask: &MaskPattern) -> Result<PatchSequence> {
        let cfg = self.config();
        if mask.total() != cfg.num_patches() {
            return Err(Error::shape(format!(
                "mask covers {} patches, model expects {}",
                mask.total(),
                cfg.num_patches()
            )));
        }
        let visible = mask.visible_indices();
        if latents.num_patch_rows() != visible.len() {
            return Err(Error::shape(format!(
                "{} latent patch rows but mask leaves {} visible",
                latents.num_patch_rows(),
                visible.len()
            )));
        }
        if latents.indices != visible {
            // order must match for the scatter; re-derive from the latents'
            // own indices instead of trusting positions
            if latents.indices.len() != visible.len()
                || !latents.indices.iter().all(|i| visible.contains(i))
            {
                return Err(Error::shape("latent indices disagree with the mask"));
            }
        }
        let mut g = Graph::new();
        let nodes = insert_params(&mut g, self);
        let patch_values = if latents.includes_class_token {
            latents.values.slice(ndarray::s![1.., ..]).to_owned()
        } else {
            latents.values.clone()
        };
        let lat = g.constant_from_f64(&patch_values);
        let out = decode_seq(&mut g, &nodes, self, lat, &latents.indices)?;
        Ok(PatchSequence {
            values: g.value(out).mapv(Scalar::to_f64),
            grid_rows: cfg.grid_rows(),
            grid_cols: cfg.grid_cols(),
            channels: cfg.image_channels,
            patch_size: cfg.patch_size,
        })
    }

    /// Classify an image with every patch visible.
    pub fn classify(&self, image: &ImageTensor) -> Result<ClassDistribution> {
        let mut session = InferenceSession::new(self);
        session.classify(image)
    }
}

/// Reusable classification context: parameters are written to the tape
/// once and the per-image suffix is truncated away between calls.
pub struct InferenceSession<'p, E: Scalar> {
    params: &'p ModelParams<E>,
    graph: Graph<E>,
    nodes: ModelNodes,
    prefix: usize,
}

impl<'p, E: Scalar> InferenceSession<'p, E> {
    pub fn new(params: &'p ModelParams<E>) -> Self {
        let mut graph = Graph::new();
        let nodes = insert_params(&mut graph, params);
        let prefix = graph.len();
        InferenceSession { params, graph, nodes, prefix }
    }

    pub fn classify(&mut self, image: &ImageTensor) -> Result<ClassDistribution> {
        self.graph.truncate(self.prefix);
        let probs = classify_probs(&mut self.graph, &self.nodes, self.params, image)?;
        let row = self.graph.value(probs);
        // renormalize in f64: single-precision softmax sums can drift a
        // few ULPs past the distribution invariant
        let raw: Vec<f64> = row.row(0).iter().map(|v| v.to_f64()).collect();
        let sum: f64 = raw.iter().sum();
        ClassDistribution::new(raw.into_iter().map(|v| v / sum).collect())
    }

    pub fn classify_argmax(&mut self, image: &ImageTensor) -> Result<usize> {
        Ok(self.classify(image)?.argmax())
    }

    /// Pooled encoder features (before normalization and head); what a
    /// linear probe trains on.
    pub fn features(&mut self, image: &ImageTensor) -> Result<Vec<f64>> {
        self.graph.truncate(self.prefix);
        let pooled = pooled_features(&mut self.graph, &self.nodes, self.params, image)?;
        Ok(self.graph.value(pooled).row(0).iter().map(|v| v.to_f64()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::{corrupt, CorruptionSpec};
    use crate::numerics::RngStream;

    fn tiny_config(use_cls: bool) -> ModelConfig {
        ModelConfig {
            patch_size: 2,
            image_channels: 1,
            image_height: 4,
            image_width: 4,
            enc_dim: 8,
            enc_depth: 1,
            enc_heads: 2,
            dec_dim: 8,
            dec_depth: 1,
            dec_heads: 2,
            num_classes: 2,
            use_class_token: use_cls,
        }
    }

    fn random_image(rng: &mut RngStream, cfg: &ModelConfig) -> ImageTensor {
        let n = cfg.image_channels * cfg.image_height * cfg.image_width;
        ImageTensor::new(
            cfg.image_channels,
            cfg.image_height,
            cfg.image_width,
            (0..n).map(|_| rng.next_uniform()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn encode_shapes_with_and_without_cls() {
        for use_cls in [false, true] {
            let cfg = tiny_config(use_cls);
            let params = ModelParams::<f64>::init(&cfg, &mut RngStream::new(1, 0)).unwrap();
            let mut rng = RngStream::new(2, 0);
            let img = random_image(&mut rng, &cfg);
            let spec = CorruptionSpec { sigma: 0.0, mask_ratio: 0.25, patch_size: 2 };
            let (visible, _, _) = corrupt(&img, &spec, &mut rng).unwrap();
            let lat = params.encode(&visible).unwrap();
            assert_eq!(lat.num_patch_rows(), 3);
            assert_eq!(lat.values.nrows(), 3 + usize::from(use_cls));
            assert_eq!(lat.values.ncols(), 8);
            assert!(lat.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = tiny_config(false);
        let params = ModelParams::<f64>::init(&cfg, &mut RngStream::new(1, 0)).unwrap();
        let mut rng = RngStream::new(2, 0);
        let img = random_image(&mut rng, &cfg);
        let spec = CorruptionSpec { sigma: 0.0, mask_ratio: 0.0, patch_size: 2 };
        let (visible, _, _) = corrupt(&img, &spec, &mut rng.clone()).unwrap();
        let a = params.encode(&visible).unwrap();
        let b = params.encode(&visible).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let cfg = tiny_config(false);
        let params = ModelParams::<f64>::init(&cfg, &mut RngStream::new(1, 0)).unwrap();
        let mut rng = RngStream::new(3, 0);
        let img = random_image(&mut rng, &cfg);
        let spec = CorruptionSpec { sigma: 0.1, mask_ratio: 0.25, patch_size: 2 };
        let (visible, _, _) = corrupt(&img, &spec, &mut rng).unwrap();

        let perm = [2usize, 0, 1];
        let mut permuted = visible.clone();
        for (new_row, &old_row) in perm.iter().enumerate() {
            permuted.values.row_mut(new_row).assign(&visible.values.row(old_row));
            permuted.indices[new_row] = visible.indices[old_row];
        }

        let base = params.encode(&visible).unwrap();
        let shuffled = params.encode(&permuted).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..8 {
                let a = base.values[(old_row, c)];
                let b = shuffled.values[(new_row, c)];
                assert!((a - b).abs() < 1e-12, "row {old_row} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn decode_emits_full_grid() {
        let cfg = tiny_config(false);
        let params = ModelParams::<f64>::init(&cfg, &mut RngStream::new(1, 0)).unwrap();
        let mut rng = RngStream::new(4, 0);
        let img = random_image(&mut rng, &cfg);

        for ratio in [0.0, 0.75] {
            let spec = CorruptionSpec { sigma: 0.1, mask_ratio: ratio, patch_size: 2 };
            let (visible, mask, _) = corrupt(&img, &spec, &mut rng).unwrap();
            let lat = params.encode(&visible).unwrap();
            let rec = params.decode(&lat, &mask).unwrap();
            assert_eq!(rec.num_patches(), 4);
            assert_eq!(rec.patch_dim(), 4);
            assert!(rec.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn decode_rejects_count_mismatch() {
        let cfg = tiny_config(false);
        let params = ModelParams::<f64>::init(&cfg, &mut RngStream::new(1, 0)).unwrap();
        let mut rng = RngStream::new(4, 1);
        let img = random_image(&mut rng, &cfg);
        let spec = CorruptionSpec { sigma: 0.0, mask_ratio: 0.5, patch_size: 2 };
        let (visible, _, _) = corrupt(&img, &spec, &mut rng).unwrap();
        let lat = params.encode(&visible).unwrap();
        let other_mask = crate::corruption::MaskPattern::from_masked_indices(&[0, 1, 2], 4).unwrap();
        assert!(params.decode(&lat, &other_mask).is_err());
    }

    #[test]
    fn classify_is_normalized_and_shift_invariant() {
        let cfg = tiny_config(true);
        let mut params = ModelParams::<f64>::init(&cfg, &mut RngStream::new(1, 0)).unwrap();
        let mut rng = RngStream::new(5, 0);
        let img = random_image(&mut rng, &cfg);

        let dist = params.classify(&img).unwrap();
        let sum: f64 = dist.probs().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9);

        // adding a constant to all head biases leaves the softmax unchanged
        let before = params.classify(&img).unwrap();
        params.head_b.mapv_inplace(|b| b + 3.7);
        let after = params.classify(&img).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_head_gives_uniform() {
        let cfg = tiny_config(true);
        let mut params = ModelParams::<f64>::init(&cfg, &mut RngStream::new(1, 0)).unwrap();
        params.head_w.fill(0.0);
        params.head_b.fill(0.0);
        let mut rng = RngStream::new(6, 0);
        let img = random_image(&mut rng, &cfg);
        let dist = params.classify(&img).unwrap();
        assert_eq!(dist.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn mean_pooling_variant_runs() {
        let cfg = tiny_config(false);
        let params = ModelParams::<f64>::init(&cfg, &mut RngStream::new(1, 0)).unwrap();
        let mut rng = RngStream::new(7, 0);
        let img = random_image(&mut rng, &cfg);
        let dist = params.classify(&img).unwrap();
        assert_eq!(dist.num_classes(), 2);
    }

    #[test]
    fn classify_rejects_wrong_shape() {
        let cfg = tiny_config(true);
        let params = ModelParams::<f64>::init(&cfg, &mut RngStream::new(1, 0)).unwrap();
        let img = ImageTensor::zeros(1, 8, 8);
        assert!(params.classify(&img).is_err());
    }

    #[test]
    fn session_matches_one_shot_classify() {
        let cfg = tiny_config(true);
        let params = ModelParams::<f32>::init(&cfg, &mut RngStream::new(1, 0)).unwrap();
        let mut rng = RngStream::new(8, 0);
        let imgs: Vec<ImageTensor> = (0..4).map(|_| random_image(&mut rng, &cfg)).collect();
        let mut session = InferenceSession::new(&params);
        for img in &imgs {
            assert_eq!(session.classify(img).unwrap(), params.classify(img).unwrap());
        }
    }
}
