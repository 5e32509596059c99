//! Training loops: DMAE pre-training, robust fine-tuning (plain
//! cross-entropy or consistency regularization), and linear probing on a
//! frozen encoder. AdamW with linear warmup and cosine decay throughout;
//! every stream of randomness is derived from (seed, purpose, epoch,
//! example index), so runs are reproducible and resumable.

use super::checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
use super::config::{Mode, OptimizerConfig, RunConfig};
use super::data::{load_dataset, Dataset};
use crate::corruption::{corrupt, ImageTensor};
use crate::error::{Error, Result};
use crate::model::{Grads, ModelParams};
use crate::numerics::RngStream;
use crate::objectives;
use ndarray::Array2;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

// stream-derivation domains
const DOMAIN_INIT: u64 = 1;
const DOMAIN_SHUFFLE: u64 = 2;
const DOMAIN_PRETRAIN_NOISE: u64 = 3;
const DOMAIN_FINETUNE_NOISE: u64 = 4;
const DOMAIN_PROBE_NOISE: u64 = 5;
const DOMAIN_CLS_INIT: u64 = 6;
const DOMAIN_FLIP: u64 = 7;

const ADAM_EPS: f32 = 1e-8;
const BN_MOMENTUM: f64 = 0.9;

/// Linear warmup from zero, then cosine decay to zero.
pub fn lr_at_step(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    if step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let decay_steps = (total_steps - warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / decay_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Per-tensor learning-rate multipliers for layer-wise decay: layer l of
/// L gets decay^(L - l), so the head trains at the full rate.
pub fn layer_lr_multipliers(params: &ModelParams<f32>, decay: f64) -> Vec<(String, f64)> {
    let total = params.num_layers();
    params
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| ModelParams::<f32>::is_trainable(n))
        .map(|(n, _)| {
            let mult = decay.powi((total - params.layer_index(&n)) as i32);
            (n, mult)
        })
        .collect()
}

/// Decoupled AdamW over the trainable tensors of a model.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    step: u64,
    slots: Vec<(String, Array2<f32>, Array2<f32>)>,
}

impl AdamW {
    pub fn new(params: &ModelParams<f32>, cfg: &OptimizerConfig) -> Self {
        let slots = params
            .named_tensors()
            .into_iter()
            .filter(|(n, _)| ModelParams::<f32>::is_trainable(n))
            .map(|(n, t)| (n, Array2::zeros(t.dim()), Array2::zeros(t.dim())))
            .collect();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            step: 0,
            slots,
        }
    }

    pub fn restore(&mut self, step: u64, state: &BTreeMap<String, (Array2<f32>, Array2<f32>)>) -> Result<()> {
        self.step = step;
        for (name, m, v) in &mut self.slots {
            let (sm, sv) = state
                .get(name)
                .ok_or_else(|| Error::shape(format!("optimizer state missing {name}")))?;
            if sm.dim() != m.dim() {
                return Err(Error::shape(format!("optimizer state shape mismatch for {name}")));
            }
            *m = sm.clone();
            *v = sv.clone();
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[(String, Array2<f32>, Array2<f32>)] {
        &self.slots
    }

    /// One update. Tensors without a gradient entry are left untouched;
    /// weight decay applies to matrices only (not biases, gains, or
    /// tokens).
    pub fn step(
        &mut self,
        params: &mut ModelParams<f32>,
        grads: &Grads<f32>,
        lr: f64,
        multipliers: &[(String, f64)],
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);

        let mut tensors: BTreeMap<String, &mut Array2<f32>> =
            params.named_tensors_mut().into_iter().collect();
        for (name, m, v) in &mut self.slots {
            let Some(g) = grads.get(name) else { continue };
            let tensor = tensors.get_mut(name).expect("slot without tensor");
            let mult = multipliers
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| *m)
                .unwrap_or(1.0);
            let lr_t = (lr * mult) as f32;
            let decay = if tensor.nrows() > 1 && tensor.ncols() > 1 {
                (lr * mult * self.weight_decay) as f32
            } else {
                0.0
            };
            azip_update(tensor, m, v, g, b1, b2, bc1 as f32, bc2 as f32, lr_t, decay);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    tensor: &mut Array2<f32>,
    m: &mut Array2<f32>,
    v: &mut Array2<f32>,
    g: &Array2<f32>,
    b1: f32,
    b2: f32,
    bc1: f32,
    bc2: f32,
    lr: f32,
    decay: f32,
) {
    ndarray::Zip::from(tensor)
        .and(m)
        .and(v)
        .and(g)
        .for_each(|t, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *t -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS)) + decay * *t;
        });
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = RngStream::derive(seed, &[DOMAIN_SHUFFLE, epoch as u64]);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.index_below(i + 1);
        idx.swap(i, j);
    }
    idx
}

fn check_dataset_shape(ds: &Dataset, cfg: &RunConfig) -> Result<()> {
    if let Some(img) = ds.images.first() {
        let m = &cfg.model;
        if img.channels != m.image_channels
            || img.height != m.image_height
            || img.width != m.image_width
        {
            return Err(Error::config(format!(
                "dataset images are {}x{}x{}, model expects {}x{}x{}",
                img.channels, img.height, img.width,
                m.image_channels, m.image_height, m.image_width
            )));
        }
    }
    if ds.num_classes != cfg.model.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model expects {}",
            ds.num_classes, cfg.model.num_classes
        )));
    }
    Ok(())
}

fn meta_for(cfg: &RunConfig, epoch: usize, history: Vec<f64>) -> CheckpointMeta {
    CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: cfg.model.clone(),
        epoch,
        seed: cfg.seed,
        loss_history: history,
        opt_step: None,
    }
}

fn save_epoch_checkpoint(
    cfg: &RunConfig,
    mode: &str,
    params: &ModelParams<f32>,
    opt: &AdamW,
    epoch: usize,
    history: &[f64],
) -> Result<PathBuf> {
    let mut ckpt = Checkpoint::from_params(params, meta_for(cfg, epoch, history.to_vec()));
    ckpt.attach_opt_state(opt.step_count(), opt.moments());
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{mode}_epoch_{epoch:04}.ckpt"));
    ckpt.save(&path)?;
    Ok(path)
}

fn save_final_checkpoint(
    cfg: &RunConfig,
    mode: &str,
    params: &ModelParams<f32>,
    epoch: usize,
    history: &[f64],
) -> Result<(Checkpoint, PathBuf)> {
    let ckpt = Checkpoint::from_params(params, meta_for(cfg, epoch, history.to_vec()));
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{mode}_final.ckpt"));
    ckpt.save(&path)?;
    Ok((ckpt, path))
}

fn load_init_params(path: &Path, expect: &RunConfig) -> Result<(ModelParams<f32>, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let params = ckpt.to_params()?;
    // encoder geometry must line up; pooling may differ between stages
    let a = &ckpt.meta.model;
    let b = &expect.model;
    let same = a.patch_size == b.patch_size
        && a.image_channels == b.image_channels
        && a.image_height == b.image_height
        && a.image_width == b.image_width
        && a.enc_dim == b.enc_dim
        && a.enc_depth == b.enc_depth
        && a.enc_heads == b.enc_heads
        && a.num_classes == b.num_classes;
    if !same {
        return Err(Error::config(format!(
            "checkpoint architecture {a:?} is incompatible with configured model {b:?}"
        )));
    }
    Ok((params, ckpt))
}

/// Jointly optimize encoder and decoder on the corrupt-and-reconstruct
/// objective. Emits a checkpoint per epoch (with optimizer state, so runs
/// can resume) and a final checkpoint.
pub fn run_pretrain(cfg: &RunConfig) -> Result<Checkpoint> {
    cfg.validate_for(Mode::Pretrain)?;
    let opt_cfg = cfg.optimizer.as_ref().unwrap();
    let corr = cfg.corruption.as_ref().unwrap();
    let ds = load_dataset(cfg.data.train.as_ref().unwrap())?;
    if ds.is_empty() {
        return Err(Error::config("pre-training dataset is empty"));
    }
    check_dataset_shape(&ds, cfg)?;

    let mut start_epoch = 0usize;
    let mut history: Vec<f64> = Vec::new();
    let mut params = match &cfg.init_from {
        Some(path) => {
            let (params, ckpt) = load_init_params(path, cfg)?;
            if params.decoder.is_none() {
                return Err(Error::config(
                    "continued pre-training requires a checkpoint that still has its decoder",
                ));
            }
            if cfg.resume {
                start_epoch = ckpt.meta.epoch;
                history = ckpt.meta.loss_history.clone();
            }
            params
        }
        None => ModelParams::init(&cfg.model, &mut RngStream::derive(cfg.seed, &[DOMAIN_INIT]))?,
    };

    let mut opt = AdamW::new(&params, opt_cfg);
    if cfg.resume {
        if let Some(path) = &cfg.init_from {
            let ckpt = Checkpoint::load(path)?;
            if let Some(state) = ckpt.opt_state()? {
                opt.restore(ckpt.meta.opt_step.unwrap_or(0), &state)?;
            }
        }
    }

    let steps_per_epoch = ds.len().div_ceil(opt_cfg.batch_size);
    let total_steps = opt_cfg.epochs * steps_per_epoch;
    let warmup_steps = opt_cfg.warmup_epochs * steps_per_epoch;
    let multipliers = layer_lr_multipliers(&params, opt_cfg.layerwise_decay);

    for epoch in start_epoch..opt_cfg.epochs {
        let order = shuffled_indices(ds.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(opt_cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + batch_idx;
            let lr = lr_at_step(step, total_steps, warmup_steps, opt_cfg.base_lr);

            // corrupt outside the tape so the graph sees plain inputs
            let mut batch_inputs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut rng =
                    RngStream::derive(cfg.seed, &[DOMAIN_PRETRAIN_NOISE, epoch as u64, i as u64]);
                batch_inputs.push(corrupt(&ds.images[i], corr, &mut rng)?);
            }

            let (loss, grads) = crate::model::loss_and_grad(&params, |g, nodes| {
                let mut per_example = Vec::with_capacity(batch_inputs.len());
                for (visible, _, target) in &batch_inputs {
                    per_example.push(objectives::build_reconstruction(
                        g, nodes, &params, visible, target,
                    )?);
                }
                let stack = g.concat_rows(&per_example);
                Ok(g.mean_all(stack))
            })?;

            opt.step(&mut params, &grads, lr, &multipliers);
            epoch_loss += loss;
            batches += 1;
        }
        history.push(epoch_loss / batches.max(1) as f64);
        save_epoch_checkpoint(cfg, "pretrain", &params, &opt, epoch + 1, &history)?;
    }

    let (ckpt, _) = save_final_checkpoint(cfg, "pretrain", &params, opt_cfg.epochs, &history)?;
    Ok(ckpt)
}

/// Optimize encoder and head on noisy-input classification, with either
/// the plain cross-entropy objective or consistency regularization. The
/// decoder is discarded on entry.
pub fn run_finetune(cfg: &RunConfig) -> Result<Checkpoint> {
    cfg.validate_for(Mode::Finetune)?;
    let opt_cfg = cfg.optimizer.as_ref().unwrap();
    let h = cfg.objective.as_ref().unwrap().hparams();
    let ds = load_dataset(cfg.data.train.as_ref().unwrap())?;
    if ds.is_empty() {
        return Err(Error::config("fine-tuning dataset is empty"));
    }
    check_dataset_shape(&ds, cfg)?;

    let mut params = match &cfg.init_from {
        Some(path) => load_init_params(path, cfg)?.0,
        None => ModelParams::init(&cfg.model, &mut RngStream::derive(cfg.seed, &[DOMAIN_INIT]))?,
    };
    params.discard_decoder();
    params.set_pooling(cfg.model.use_class_token);
    params.ensure_class_token(&mut RngStream::derive(cfg.seed, &[DOMAIN_CLS_INIT]));

    let mut opt = AdamW::new(&params, opt_cfg);
    let steps_per_epoch = ds.len().div_ceil(opt_cfg.batch_size);
    let total_steps = opt_cfg.epochs * steps_per_epoch;
    let warmup_steps = opt_cfg.warmup_epochs * steps_per_epoch;
    let multipliers = layer_lr_multipliers(&params, opt_cfg.layerwise_decay);

    let mut history = Vec::new();
    for epoch in 0..opt_cfg.epochs {
        let order = shuffled_indices(ds.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(opt_cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + batch_idx;
            let lr = lr_at_step(step, total_steps, warmup_steps, opt_cfg.base_lr);

            let mut noisy_sets: Vec<(Vec<ImageTensor>, usize)> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let image = maybe_flip(&ds.images[i], cfg.seed, epoch, i);
                let mut rng =
                    RngStream::derive(cfg.seed, &[DOMAIN_FINETUNE_NOISE, epoch as u64, i as u64]);
                let sigma = objectives::sample_sigma(&h, &mut rng);
                let noises = objectives::draw_noises(&image, h.m, sigma, &mut rng);
                let noisy = noises
                    .iter()
                    .map(|n| {
                        let mut im = image.clone();
                        for (p, nv) in im.pixels.iter_mut().zip(n) {
                            *p += nv;
                        }
                        im
                    })
                    .collect();
                noisy_sets.push((noisy, ds.labels[i]));
            }

            let (loss, grads) = crate::model::loss_and_grad(&params, |g, nodes| {
                let mut per_example = Vec::with_capacity(noisy_sets.len());
                for (noisy, label) in &noisy_sets {
                    let c = objectives::build_consistency(
                        g, nodes, &params, noisy, *label, h.lambda, h.mu,
                    )?;
                    per_example.push(c.total);
                }
                let stack = g.concat_rows(&per_example);
                Ok(g.mean_all(stack))
            })?;

            opt.step(&mut params, &grads, lr, &multipliers);
            epoch_loss += loss;
            batches += 1;
        }
        history.push(epoch_loss / batches.max(1) as f64);
        save_epoch_checkpoint(cfg, "finetune", &params, &opt, epoch + 1, &history)?;
    }

    let (ckpt, _) = save_final_checkpoint(cfg, "finetune", &params, opt_cfg.epochs, &history)?;
    Ok(ckpt)
}

fn maybe_flip(image: &ImageTensor, seed: u64, epoch: usize, index: usize) -> ImageTensor {
    let mut rng = RngStream::derive(seed, &[DOMAIN_FLIP, epoch as u64, index as u64]);
    if rng.next_uniform() < 0.5 {
        image.hflipped()
    } else {
        image.clone()
    }
}

/// Train only a feature-normalization layer plus linear head on frozen
/// encoder outputs; the encoder is never touched (asserted by hashing its
/// tensors before and after).
pub fn run_probe(cfg: &RunConfig) -> Result<Checkpoint> {
    cfg.validate_for(Mode::Probe)?;
    let opt_cfg = cfg.optimizer.as_ref().unwrap();
    let h = cfg.objective.as_ref().unwrap().hparams();
    let ds = load_dataset(cfg.data.train.as_ref().unwrap())?;
    if ds.is_empty() {
        return Err(Error::config("probe dataset is empty"));
    }
    check_dataset_shape(&ds, cfg)?;

    let (mut params, _) = load_init_params(cfg.init_from.as_ref().unwrap(), cfg)?;
    params.discard_decoder();
    params.set_pooling(cfg.model.use_class_token);
    params.ensure_class_token(&mut RngStream::derive(cfg.seed, &[DOMAIN_CLS_INIT]));
    params.head_norm = None;

    let encoder_before = encoder_fingerprint(&params);
    let dim = cfg.model.enc_dim;
    let classes = cfg.model.num_classes;
    let mut running_mean = vec![0.0f64; dim];
    let mut running_var = vec![1.0f64; dim];

    let mut opt = AdamW::new(&params, opt_cfg);
    let steps_per_epoch = ds.len().div_ceil(opt_cfg.batch_size);
    let total_steps = opt_cfg.epochs * steps_per_epoch;
    let warmup_steps = opt_cfg.warmup_epochs * steps_per_epoch;

    let mut history = Vec::new();
    for epoch in 0..opt_cfg.epochs {
        let order = shuffled_indices(ds.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;

        for (batch_idx, chunk) in order.chunks(opt_cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + batch_idx;
            let lr = lr_at_step(step, total_steps, warmup_steps, opt_cfg.base_lr);

            // frozen-encoder features for this batch; the session only
            // lives while the parameters are immutable
            let mut feature_buf: Vec<(Vec<f64>, usize)> = Vec::with_capacity(chunk.len());
            {
                let mut session = crate::model::InferenceSession::new(&params);
                for &i in chunk {
                    let mut rng = RngStream::derive(
                        cfg.seed,
                        &[DOMAIN_PROBE_NOISE, epoch as u64, i as u64],
                    );
                    let sigma = objectives::sample_sigma(&h, &mut rng);
                    let noisy = ds.images[i].add_gaussian_noise(&mut rng, sigma);
                    feature_buf.push((session.features(&noisy)?, ds.labels[i]));
                }
            }

            // batch statistics for the normalization layer
            let b = feature_buf.len() as f64;
            let mut mean = vec![0.0f64; dim];
            let mut var = vec![0.0f64; dim];
            for (f, _) in &feature_buf {
                for (m, x) in mean.iter_mut().zip(f) {
                    *m += x;
                }
            }
            for m in mean.iter_mut() {
                *m /= b;
            }
            for (f, _) in &feature_buf {
                for ((v, x), m) in var.iter_mut().zip(f).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            for v in var.iter_mut() {
                *v /= b;
            }
            for k in 0..dim {
                running_mean[k] = BN_MOMENTUM * running_mean[k] + (1.0 - BN_MOMENTUM) * mean[k];
                running_var[k] = BN_MOMENTUM * running_var[k] + (1.0 - BN_MOMENTUM) * var[k];
            }

            // analytic softmax-regression gradient on normalized features
            let (gw, gb, loss) = head_gradient(&params, &feature_buf, &mean, &var, classes);
            let grads = Grads::from_entries(vec![
                ("head.w".to_string(), gw),
                ("head.b".to_string(), gb),
            ]);
            opt.step(&mut params, &grads, lr, &[]);
            epoch_loss += loss;
            batches += 1;
        }
        history.push(epoch_loss / batches.max(1) as f64);
        save_epoch_checkpoint(cfg, "probe", &params, &opt, epoch + 1, &history)?;
    }

    params.head_norm = Some(crate::model::HeadNorm {
        mean: Array2::from_shape_vec((1, dim), running_mean.iter().map(|&v| v as f32).collect())
            .expect("row shape"),
        var: Array2::from_shape_vec((1, dim), running_var.iter().map(|&v| v as f32).collect())
            .expect("row shape"),
    });

    let encoder_after = encoder_fingerprint(&params);
    if encoder_before != encoder_after {
        return Err(Error::numeric("probe", "frozen encoder was mutated"));
    }

    let (ckpt, _) = save_final_checkpoint(cfg, "probe", &params, opt_cfg.epochs, &history)?;
    Ok(ckpt)
}

/// Mean cross-entropy and its analytic gradient for the softmax head on
/// batch-normalized features.
fn head_gradient(
    params: &ModelParams<f32>,
    features: &[(Vec<f64>, usize)],
    mean: &[f64],
    var: &[f64],
    classes: usize,
) -> (Array2<f32>, Array2<f32>, f64) {
    let dim = mean.len();
    let b = features.len() as f64;
    let mut gw = Array2::<f64>::zeros((dim, classes));
    let mut gb = Array2::<f64>::zeros((1, classes));
    let mut loss = 0.0;
    for (f, label) in features {
        let normed: Vec<f64> = (0..dim)
            .map(|k| (f[k] - mean[k]) / (var[k] + crate::model::HEAD_NORM_EPS).sqrt())
            .collect();
        let mut logits = vec![0.0f64; classes];
        for (c, l) in logits.iter_mut().enumerate() {
            *l = params.head_b[(0, c)] as f64;
            for k in 0..dim {
                *l += normed[k] * params.head_w[(k, c)] as f64;
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        loss -= probs[*label].max(objectives::PROB_FLOOR).ln();
        for c in 0..classes {
            let err = probs[c] - if c == *label { 1.0 } else { 0.0 };
            gb[(0, c)] += err / b;
            for k in 0..dim {
                gw[(k, c)] += normed[k] * err / b;
            }
        }
    }
    (
        gw.mapv(|v| v as f32),
        gb.mapv(|v| v as f32),
        loss / b,
    )
}

fn encoder_fingerprint(params: &ModelParams<f32>) -> Vec<(String, Vec<u32>)> {
    params
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| !n.starts_with("head"))
        .map(|(n, t)| (n, t.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        // warmup rises linearly, then cosine decays
        let base = 1.0;
        assert!((lr_at_step(0, 100, 10, base) - 0.1).abs() < 1e-12);
        assert!((lr_at_step(9, 100, 10, base) - 1.0).abs() < 1e-12);
        let mid = lr_at_step(55, 100, 10, base);
        assert!(mid < 1.0 && mid > 0.0);
        let end = lr_at_step(99, 100, 10, base);
        assert!(end < 0.01, "{end}");
        // monotone decay after warmup
        let mut prev = f64::INFINITY;
        for s in 10..100 {
            let v = lr_at_step(s, 100, 10, base);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn multipliers_form_geometric_sequence() {
        let cfg = crate::model::ModelConfig {
            patch_size: 2,
            image_channels: 1,
            image_height: 4,
            image_width: 4,
            enc_dim: 8,
            enc_depth: 3,
            enc_heads: 2,
            dec_dim: 8,
            dec_depth: 1,
            dec_heads: 2,
            num_classes: 2,
            use_class_token: true,
        };
        let params = ModelParams::<f32>::init(&cfg, &mut RngStream::new(1, 0)).unwrap();
        let d = 0.65;
        let mults = layer_lr_multipliers(&params, d);
        let get = |name: &str| mults.iter().find(|(n, _)| n == name).unwrap().1;
        let l = params.num_layers() as i32; // 4
        assert!((get("patch_embed.w") - d.powi(l)).abs() < 1e-15);
        assert!((get("enc.0.attn.wq") - d.powi(l - 1)).abs() < 1e-15);
        assert!((get("enc.2.mlp.w1") - d.powi(1)).abs() < 1e-15);
        assert!((get("head.w") - 1.0).abs() < 1e-15);

        // decay 1.0 gives every group the base rate
        assert!(layer_lr_multipliers(&params, 1.0).iter().all(|(_, m)| *m == 1.0));
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let idx = shuffled_indices(100, 3, 2);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_eq!(idx, shuffled_indices(100, 3, 2));
        assert_ne!(idx, shuffled_indices(100, 3, 3));
    }
}
