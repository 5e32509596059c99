//! Model configuration, parameter storage, and initialization.
//!
//! Parameters are named tensors; the iteration order of
//! [`ModelParams::named_tensors`] is the canonical order used by the
//! initializer, the optimizer, the checkpoint format, and gradient
//! collection.

use super::pos::grid_pos_embed;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Architecture description: patch geometry, encoder and decoder stacks,
/// and the classification head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub num_classes: usize,
    /// Pool with a learned class token when true, mean pooling otherwise.
    pub use_class_token: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("patch_size must be positive"));
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.enc_dim == 0 || self.enc_heads == 0 || self.enc_dim % self.enc_heads != 0 {
            return Err(Error::config(format!(
                "enc_dim {} must be a positive multiple of enc_heads {}",
                self.enc_dim, self.enc_heads
            )));
        }
        if self.dec_dim == 0 || self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0 {
            return Err(Error::config(format!(
                "dec_dim {} must be a positive multiple of dec_heads {}",
                self.dec_dim, self.dec_heads
            )));
        }
        if self.enc_dim % 2 != 0 || self.dec_dim % 2 != 0 {
            return Err(Error::config(
                "embedding dimensions must be even for sinusoidal positions",
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        Ok(())
    }

    pub fn grid_rows(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn patch_dim(&self) -> usize {
        self.image_channels * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<E: Scalar> {
    pub ln1_g: Array2<E>,
    pub ln1_b: Array2<E>,
    pub wq: Array2<E>,
    pub bq: Array2<E>,
    pub wk: Array2<E>,
    pub bk: Array2<E>,
    pub wv: Array2<E>,
    pub bv: Array2<E>,
    pub wo: Array2<E>,
    pub bo: Array2<E>,
    pub ln2_g: Array2<E>,
    pub ln2_b: Array2<E>,
    pub w1: Array2<E>,
    pub b1: Array2<E>,
    pub w2: Array2<E>,
    pub b2: Array2<E>,
}

const INIT_STD: f64 = 0.02;
const MLP_EXPANSION: usize = 4;

fn trunc_normal<E: Scalar>(rng: &mut RngStream, rows: usize, cols: usize) -> Array2<E> {
    Array2::from_shape_fn((rows, cols), |_| {
        // resample outside +-2 std, the usual ViT initializer
        let z = loop {
            let z = rng.next_std_normal();
            if z.abs() <= 2.0 {
                break z;
            }
        };
        E::from_f64(z * INIT_STD)
    })
}

fn zeros<E: Scalar>(rows: usize, cols: usize) -> Array2<E> {
    Array2::zeros((rows, cols))
}

fn ones<E: Scalar>(rows: usize, cols: usize) -> Array2<E> {
    Array2::from_elem((rows, cols), E::one())
}

impl<E: Scalar> BlockParams<E> {
    fn init(rng: &mut RngStream, dim: usize) -> Self {
        let hidden = MLP_EXPANSION * dim;
        BlockParams {
            ln1_g: ones(1, dim),
            ln1_b: zeros(1, dim),
            wq: trunc_normal(rng, dim, dim),
            bq: zeros(1, dim),
            wk: trunc_normal(rng, dim, dim),
            bk: zeros(1, dim),
            wv: trunc_normal(rng, dim, dim),
            bv: zeros(1, dim),
            wo: trunc_normal(rng, dim, dim),
            bo: zeros(1, dim),
            ln2_g: ones(1, dim),
            ln2_b: zeros(1, dim),
            w1: trunc_normal(rng, dim, hidden),
            b1: zeros(1, hidden),
            w2: trunc_normal(rng, hidden, dim),
            b2: zeros(1, dim),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<E>)>) {
        out.push((format!("{prefix}.ln1.g"), &self.ln1_g));
        out.push((format!("{prefix}.ln1.b"), &self.ln1_b));
        out.push((format!("{prefix}.attn.wq"), &self.wq));
        out.push((format!("{prefix}.attn.bq"), &self.bq));
        out.push((format!("{prefix}.attn.wk"), &self.wk));
        out.push((format!("{prefix}.attn.bk"), &self.bk));
        out.push((format!("{prefix}.attn.wv"), &self.wv));
        out.push((format!("{prefix}.attn.bv"), &self.bv));
        out.push((format!("{prefix}.attn.wo"), &self.wo));
        out.push((format!("{prefix}.attn.bo"), &self.bo));
        out.push((format!("{prefix}.ln2.g"), &self.ln2_g));
        out.push((format!("{prefix}.ln2.b"), &self.ln2_b));
        out.push((format!("{prefix}.mlp.w1"), &self.w1));
        out.push((format!("{prefix}.mlp.b1"), &self.b1));
        out.push((format!("{prefix}.mlp.w2"), &self.w2));
        out.push((format!("{prefix}.mlp.b2"), &self.b2));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<E>)>) {
        out.push((format!("{prefix}.ln1.g"), &mut self.ln1_g));
        out.push((format!("{prefix}.ln1.b"), &mut self.ln1_b));
        out.push((format!("{prefix}.attn.wq"), &mut self.wq));
        out.push((format!("{prefix}.attn.bq"), &mut self.bq));
        out.push((format!("{prefix}.attn.wk"), &mut self.wk));
        out.push((format!("{prefix}.attn.bk"), &mut self.bk));
        out.push((format!("{prefix}.attn.wv"), &mut self.wv));
        out.push((format!("{prefix}.attn.bv"), &mut self.bv));
        out.push((format!("{prefix}.attn.wo"), &mut self.wo));
        out.push((format!("{prefix}.attn.bo"), &mut self.bo));
        out.push((format!("{prefix}.ln2.g"), &mut self.ln2_g));
        out.push((format!("{prefix}.ln2.b"), &mut self.ln2_b));
        out.push((format!("{prefix}.mlp.w1"), &mut self.w1));
        out.push((format!("{prefix}.mlp.b1"), &mut self.b1));
        out.push((format!("{prefix}.mlp.w2"), &mut self.w2));
        out.push((format!("{prefix}.mlp.b2"), &mut self.b2));
    }

    fn cast<F: Scalar>(&self) -> BlockParams<F> {
        let c = |a: &Array2<E>| a.mapv(|v| F::from_f64(v.to_f64()));
        BlockParams {
            ln1_g: c(&self.ln1_g),
            ln1_b: c(&self.ln1_b),
            wq: c(&self.wq),
            bq: c(&self.bq),
            wk: c(&self.wk),
            bk: c(&self.bk),
            wv: c(&self.wv),
            bv: c(&self.bv),
            wo: c(&self.wo),
            bo: c(&self.bo),
            ln2_g: c(&self.ln2_g),
            ln2_b: c(&self.ln2_b),
            w1: c(&self.w1),
            b1: c(&self.b1),
            w2: c(&self.w2),
            b2: c(&self.b2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<E: Scalar> {
    pub embed_w: Array2<E>,
    pub embed_b: Array2<E>,
    pub mask_token: Array2<E>,
    pub blocks: Vec<BlockParams<E>>,
    pub norm_g: Array2<E>,
    pub norm_b: Array2<E>,
    pub out_w: Array2<E>,
    pub out_b: Array2<E>,
}

/// Feature normalization for the linear-probe head: per-feature running
/// mean and variance, applied as constants at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadNorm<E: Scalar> {
    pub mean: Array2<E>,
    pub var: Array2<E>,
}

pub const HEAD_NORM_EPS: f64 = 1e-5;

/// All learnable weights of the encoder, the (optional) decoder, and the
/// classification head, plus the fixed positional tables derived from the
/// configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<E: Scalar> {
    cfg: ModelConfig,
    pub patch_embed_w: Array2<E>,
    pub patch_embed_b: Array2<E>,
    pub cls_token: Option<Array2<E>>,
    pub enc_blocks: Vec<BlockParams<E>>,
    pub enc_norm_g: Array2<E>,
    pub enc_norm_b: Array2<E>,
    pub decoder: Option<DecoderParams<E>>,
    pub head_w: Array2<E>,
    pub head_b: Array2<E>,
    pub head_norm: Option<HeadNorm<E>>,
    // fixed tables, recomputed from cfg rather than checkpointed
    pub(crate) pe_enc: Array2<f64>,
    pub(crate) pe_dec: Array2<f64>,
}

impl<E: Scalar> ModelParams<E> {
    /// Fresh parameters: truncated-normal weights (std 0.02), zero biases,
    /// unit layer-norm gains. Includes a decoder; drop it with
    /// [`ModelParams::discard_decoder`] for classification-only use.
    pub fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let patch_dim = cfg.patch_dim();
        let decoder = DecoderParams {
            embed_w: trunc_normal(rng, cfg.enc_dim, cfg.dec_dim),
            embed_b: zeros(1, cfg.dec_dim),
            mask_token: trunc_normal(rng, 1, cfg.dec_dim),
            blocks: (0..cfg.dec_depth).map(|_| BlockParams::init(rng, cfg.dec_dim)).collect(),
            norm_g: ones(1, cfg.dec_dim),
            norm_b: zeros(1, cfg.dec_dim),
            out_w: trunc_normal(rng, cfg.dec_dim, patch_dim),
            out_b: zeros(1, patch_dim),
        };
        Ok(ModelParams {
            patch_embed_w: trunc_normal(rng, patch_dim, cfg.enc_dim),
            patch_embed_b: zeros(1, cfg.enc_dim),
            cls_token: cfg.use_class_token.then(|| trunc_normal(rng, 1, cfg.enc_dim)),
            enc_blocks: (0..cfg.enc_depth).map(|_| BlockParams::init(rng, cfg.enc_dim)).collect(),
            enc_norm_g: ones(1, cfg.enc_dim),
            enc_norm_b: zeros(1, cfg.enc_dim),
            decoder: Some(decoder),
            head_w: trunc_normal(rng, cfg.enc_dim, cfg.num_classes),
            head_b: zeros(1, cfg.num_classes),
            head_norm: None,
            pe_enc: grid_pos_embed(cfg.enc_dim, cfg.grid_rows(), cfg.grid_cols()),
            pe_dec: grid_pos_embed(cfg.dec_dim, cfg.grid_rows(), cfg.grid_cols()),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Remove the reconstruction decoder (downstream classification does
    /// not use it).
    pub fn discard_decoder(&mut self) {
        self.decoder = None;
    }

    /// Ensure a class token exists when the configuration asks for one;
    /// used when a pre-trained checkpoint is adapted for classification.
    pub fn ensure_class_token(&mut self, rng: &mut RngStream) {
        if self.cfg.use_class_token && self.cls_token.is_none() {
            self.cls_token = Some(trunc_normal(rng, 1, self.cfg.enc_dim));
        }
    }

    pub fn set_pooling(&mut self, use_class_token: bool) {
        self.cfg.use_class_token = use_class_token;
    }

    pub fn named_tensors(&self) -> Vec<(String, &Array2<E>)> {
        let mut out = Vec::new();
        out.push(("patch_embed.w".to_string(), &self.patch_embed_w));
        out.push(("patch_embed.b".to_string(), &self.patch_embed_b));
        if let Some(cls) = &self.cls_token {
            out.push(("cls_token".to_string(), cls));
        }
        for (i, blk) in self.enc_blocks.iter().enumerate() {
            blk.visit(&format!("enc.{i}"), &mut out);
        }
        out.push(("enc_norm.g".to_string(), &self.enc_norm_g));
        out.push(("enc_norm.b".to_string(), &self.enc_norm_b));
        if let Some(dec) = &self.decoder {
            out.push(("dec.embed.w".to_string(), &dec.embed_w));
            out.push(("dec.embed.b".to_string(), &dec.embed_b));
            out.push(("dec.mask_token".to_string(), &dec.mask_token));
            for (i, blk) in dec.blocks.iter().enumerate() {
                blk.visit(&format!("dec.{i}"), &mut out);
            }
            out.push(("dec_norm.g".to_string(), &dec.norm_g));
            out.push(("dec_norm.b".to_string(), &dec.norm_b));
            out.push(("dec.out.w".to_string(), &dec.out_w));
            out.push(("dec.out.b".to_string(), &dec.out_b));
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        if let Some(hn) = &self.head_norm {
            out.push(("head_norm.mean".to_string(), &hn.mean));
            out.push(("head_norm.var".to_string(), &hn.var));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Array2<E>)> {
        let mut out = Vec::new();
        out.push(("patch_embed.w".to_string(), &mut self.patch_embed_w));
        out.push(("patch_embed.b".to_string(), &mut self.patch_embed_b));
        if let Some(cls) = &mut self.cls_token {
            out.push(("cls_token".to_string(), cls));
        }
        for (i, blk) in self.enc_blocks.iter_mut().enumerate() {
            blk.visit_mut(&format!("enc.{i}"), &mut out);
        }
        out.push(("enc_norm.g".to_string(), &mut self.enc_norm_g));
        out.push(("enc_norm.b".to_string(), &mut self.enc_norm_b));
        if let Some(dec) = &mut self.decoder {
            out.push(("dec.embed.w".to_string(), &mut dec.embed_w));
            out.push(("dec.embed.b".to_string(), &mut dec.embed_b));
            out.push(("dec.mask_token".to_string(), &mut dec.mask_token));
            for (i, blk) in dec.blocks.iter_mut().enumerate() {
                blk.visit_mut(&format!("dec.{i}"), &mut out);
            }
            out.push(("dec_norm.g".to_string(), &mut dec.norm_g));
            out.push(("dec_norm.b".to_string(), &mut dec.norm_b));
            out.push(("dec.out.w".to_string(), &mut dec.out_w));
            out.push(("dec.out.b".to_string(), &mut dec.out_b));
        }
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        if let Some(hn) = &mut self.head_norm {
            out.push(("head_norm.mean".to_string(), &mut hn.mean));
            out.push(("head_norm.var".to_string(), &mut hn.var));
        }
        out
    }

    /// Names of tensors the optimizer may update. Feature-normalization
    /// statistics are state, not weights.
    pub fn is_trainable(name: &str) -> bool {
        !name.starts_with("head_norm.")
    }

    /// Whether AdamW applies weight decay to this tensor: matrices decay,
    /// biases / gains / tokens do not.
    pub fn uses_weight_decay(&self, name: &str) -> bool {
        for (n, t) in self.named_tensors() {
            if n == name {
                return t.nrows() > 1 && t.ncols() > 1;
            }
        }
        false
    }

    /// Layer index used for layer-wise learning-rate decay: the patch
    /// embedding (and class token) is layer 0, encoder block i is layer
    /// i+1, and everything downstream of the encoder (final norm, head,
    /// decoder) is layer `enc_depth + 1`.
    pub fn layer_index(&self, name: &str) -> usize {
        if name.starts_with("patch_embed.") || name == "cls_token" {
            return 0;
        }
        if let Some(rest) = name.strip_prefix("enc.") {
            if let Some((idx, _)) = rest.split_once('.') {
                if let Ok(i) = idx.parse::<usize>() {
                    return i + 1;
                }
            }
        }
        self.num_layers()
    }

    /// Total layer count L for the decay schedule.
    pub fn num_layers(&self) -> usize {
        self.cfg.enc_depth + 1
    }

    pub fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<F: Scalar>(&self) -> ModelParams<F> {
        let c = |a: &Array2<E>| a.mapv(|v| F::from_f64(v.to_f64()));
        ModelParams {
            cfg: self.cfg.clone(),
            patch_embed_w: c(&self.patch_embed_w),
            patch_embed_b: c(&self.patch_embed_b),
            cls_token: self.cls_token.as_ref().map(&c),
            enc_blocks: self.enc_blocks.iter().map(|b| b.cast()).collect(),
            enc_norm_g: c(&self.enc_norm_g),
            enc_norm_b: c(&self.enc_norm_b),
            decoder: self.decoder.as_ref().map(|d| DecoderParams {
                embed_w: c(&d.embed_w),
                embed_b: c(&d.embed_b),
                mask_token: c(&d.mask_token),
                blocks: d.blocks.iter().map(|b| b.cast()).collect(),
                norm_g: c(&d.norm_g),
                norm_b: c(&d.norm_b),
                out_w: c(&d.out_w),
                out_b: c(&d.out_b),
            }),
            head_w: c(&self.head_w),
            head_b: c(&self.head_b),
            head_norm: self.head_norm.as_ref().map(|hn| HeadNorm {
                mean: c(&hn.mean),
                var: c(&hn.var),
            }),
            pe_enc: self.pe_enc.clone(),
            pe_dec: self.pe_dec.clone(),
        }
    }
}
