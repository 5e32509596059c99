//! Graph builders for the transformer forward passes. Training, gradient
//! checking, and inference all run through these builders, so there is a
//! single definition of the network.

use super::params::{DecoderParams, HeadNorm, ModelParams, HEAD_NORM_EPS};
use super::scalar::Scalar;
use super::tape::{Graph, NodeId};
use crate::corruption::{patchify, ImageTensor};
use crate::error::{Error, Result};
use ndarray::Array2;

const LAYER_NORM_EPS: f64 = 1e-6;

pub(crate) struct BlockNodes {
    ln1_g: NodeId,
    ln1_b: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2_g: NodeId,
    ln2_b: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

pub(crate) struct DecoderNodes {
    embed_w: NodeId,
    embed_b: NodeId,
    mask_token: NodeId,
    blocks: Vec<BlockNodes>,
    norm_g: NodeId,
    norm_b: NodeId,
    out_w: NodeId,
    out_b: NodeId,
}

/// Tape positions of every parameter tensor, plus the (name, id) pairs of
/// the trainable ones in canonical order.
pub(crate) struct ModelNodes {
    patch_embed_w: NodeId,
    patch_embed_b: NodeId,
    cls_token: Option<NodeId>,
    enc_blocks: Vec<BlockNodes>,
    enc_norm_g: NodeId,
    enc_norm_b: NodeId,
    dec: Option<DecoderNodes>,
    head_w: NodeId,
    head_b: NodeId,
    /// Feature-normalization constants (mean, 1/std); not trainable.
    head_norm: Option<(NodeId, NodeId)>,
    pub(crate) param_ids: Vec<(String, NodeId)>,
}

fn insert_block<E: Scalar>(
    g: &mut Graph<E>,
    blk: &super::params::BlockParams<E>,
    prefix: &str,
    ids: &mut Vec<(String, NodeId)>,
) -> BlockNodes {
    let mut ins = |suffix: &str, t: &Array2<E>| {
        let id = g.param(t.clone());
        ids.push((format!("{prefix}.{suffix}"), id));
        id
    };
    BlockNodes {
        ln1_g: ins("ln1.g", &blk.ln1_g),
        ln1_b: ins("ln1.b", &blk.ln1_b),
        wq: ins("attn.wq", &blk.wq),
        bq: ins("attn.bq", &blk.bq),
        wk: ins("attn.wk", &blk.wk),
        bk: ins("attn.bk", &blk.bk),
        wv: ins("attn.wv", &blk.wv),
        bv: ins("attn.bv", &blk.bv),
        wo: ins("attn.wo", &blk.wo),
        bo: ins("attn.bo", &blk.bo),
        ln2_g: ins("ln2.g", &blk.ln2_g),
        ln2_b: ins("ln2.b", &blk.ln2_b),
        w1: ins("mlp.w1", &blk.w1),
        b1: ins("mlp.b1", &blk.b1),
        w2: ins("mlp.w2", &blk.w2),
        b2: ins("mlp.b2", &blk.b2),
    }
}

/// Insert every parameter tensor as a tape leaf. The insertion order
/// matches [`ModelParams::named_tensors`].
pub(crate) fn insert_params<E: Scalar>(g: &mut Graph<E>, params: &ModelParams<E>) -> ModelNodes {
    let mut ids = Vec::new();
    let patch_embed_w = g.param(params.patch_embed_w.clone());
    ids.push(("patch_embed.w".to_string(), patch_embed_w));
    let patch_embed_b = g.param(params.patch_embed_b.clone());
    ids.push(("patch_embed.b".to_string(), patch_embed_b));
    let cls_token = params.cls_token.as_ref().map(|t| {
        let id = g.param(t.clone());
        ids.push(("cls_token".to_string(), id));
        id
    });
    let enc_blocks = params
        .enc_blocks
        .iter()
        .enumerate()
        .map(|(i, blk)| insert_block(g, blk, &format!("enc.{i}"), &mut ids))
        .collect();
    let enc_norm_g = g.param(params.enc_norm_g.clone());
    ids.push(("enc_norm.g".to_string(), enc_norm_g));
    let enc_norm_b = g.param(params.enc_norm_b.clone());
    ids.push(("enc_norm.b".to_string(), enc_norm_b));

    let dec = params.decoder.as_ref().map(|d: &DecoderParams<E>| {
        let embed_w = g.param(d.embed_w.clone());
        ids.push(("dec.embed.w".to_string(), embed_w));
        let embed_b = g.param(d.embed_b.clone());
        ids.push(("dec.embed.b".to_string(), embed_b));
        let mask_token = g.param(d.mask_token.clone());
        ids.push(("dec.mask_token".to_string(), mask_token));
        let blocks = d
            .blocks
            .iter()
            .enumerate()
            .map(|(i, blk)| insert_block(g, blk, &format!("dec.{i}"), &mut ids))
            .collect();
        let norm_g = g.param(d.norm_g.clone());
        ids.push(("dec_norm.g".to_string(), norm_g));
        let norm_b = g.param(d.norm_b.clone());
        ids.push(("dec_norm.b".to_string(), norm_b));
        let out_w = g.param(d.out_w.clone());
        ids.push(("dec.out.w".to_string(), out_w));
        let out_b = g.param(d.out_b.clone());
        ids.push(("dec.out.b".to_string(), out_b));
        DecoderNodes { embed_w, embed_b, mask_token, blocks, norm_g, norm_b, out_w, out_b }
    });

    let head_w = g.param(params.head_w.clone());
    ids.push(("head.w".to_string(), head_w));
    let head_b = g.param(params.head_b.clone());
    ids.push(("head.b".to_string(), head_b));

    let head_norm = params.head_norm.as_ref().map(|hn: &HeadNorm<E>| {
        let mean = g.constant(hn.mean.clone());
        let inv_std = g.constant(
            hn.var
                .mapv(|v| E::one() / (v + E::from_f64(HEAD_NORM_EPS)).sqrt()),
        );
        (mean, inv_std)
    });

    ModelNodes {
        patch_embed_w,
        patch_embed_b,
        cls_token,
        enc_blocks,
        enc_norm_g,
        enc_norm_b,
        dec,
        head_w,
        head_b,
        head_norm,
        param_ids: ids,
    }
}

fn linear<E: Scalar>(g: &mut Graph<E>, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn attention<E: Scalar>(g: &mut Graph<E>, x: NodeId, blk: &BlockNodes, heads: usize) -> NodeId {
    let q = linear(g, x, blk.wq, blk.bq);
    let k = linear(g, x, blk.wk, blk.bk);
    let v = linear(g, x, blk.wv, blk.bv);
    let dim = g.value(q).ncols();
    let dh = dim / heads;
    let scale = E::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        head_outs.push(g.matmul(attn, vh));
    }
    let cat = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        g.concat_cols(&head_outs)
    };
    linear(g, cat, blk.wo, blk.bo)
}

/// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
fn block<E: Scalar>(g: &mut Graph<E>, x: NodeId, blk: &BlockNodes, heads: usize) -> NodeId {
    let eps = E::from_f64(LAYER_NORM_EPS);
    let normed = g.layer_norm_rows(x, blk.ln1_g, blk.ln1_b, eps);
    let att = attention(g, normed, blk, heads);
    let x = g.add(x, att);
    let normed = g.layer_norm_rows(x, blk.ln2_g, blk.ln2_b, eps);
    let h = linear(g, normed, blk.w1, blk.b1);
    let h = g.gelu(h);
    let h = linear(g, h, blk.w2, blk.b2);
    g.add(x, h)
}

/// Encoder over a set of patches: embed, add the positional rows for the
/// ORIGINAL patch indices, optionally prepend the class token, run the
/// blocks, and apply the final norm.
pub(crate) fn encode_seq<E: Scalar>(
    g: &mut Graph<E>,
    nodes: &ModelNodes,
    params: &ModelParams<E>,
    patch_values: &Array2<f64>,
    indices: &[usize],
    include_cls: bool,
) -> NodeId {
    let cfg = params.config();
    let vals = g.constant_from_f64(patch_values);
    let mut x = linear(g, vals, nodes.patch_embed_w, nodes.patch_embed_b);

    let mut pe = Array2::zeros((indices.len(), cfg.enc_dim));
    for (r, &i) in indices.iter().enumerate() {
        pe.row_mut(r).assign(&params.pe_enc.row(i));
    }
    let pe = g.constant_from_f64(&pe);
    x = g.add(x, pe);

    if include_cls {
        let cls = nodes.cls_token.expect("class token requested but not present");
        x = g.concat_rows(&[cls, x]);
    }
    for blk in &nodes.enc_blocks {
        x = block(g, x, blk, cfg.enc_heads);
    }
    let eps = E::from_f64(LAYER_NORM_EPS);
    g.layer_norm_rows(x, nodes.enc_norm_g, nodes.enc_norm_b, eps)
}

/// Decoder from visible-patch latents to a full-grid reconstruction.
/// `latents` must be patch rows only (no class token).
pub(crate) fn decode_seq<E: Scalar>(
    g: &mut Graph<E>,
    nodes: &ModelNodes,
    params: &ModelParams<E>,
    latents: NodeId,
    visible_indices: &[usize],
) -> Result<NodeId> {
    let cfg = params.config();
    let dec = nodes
        .dec
        .as_ref()
        .ok_or_else(|| Error::shape("model has no decoder (it was discarded)"))?;
    let x = linear(g, latents, dec.embed_w, dec.embed_b);
    let total = cfg.num_patches();
    let grid = g.assemble_by_mask(x, dec.mask_token, visible_indices, total);
    let pe = g.constant_from_f64(&params.pe_dec);
    let mut x = g.add(grid, pe);
    for blk in &dec.blocks {
        x = block(g, x, blk, cfg.dec_heads);
    }
    let eps = E::from_f64(LAYER_NORM_EPS);
    let x = g.layer_norm_rows(x, dec.norm_g, dec.norm_b, eps);
    Ok(linear(g, x, dec.out_w, dec.out_b))
}

/// Encode the full image and pool: the class-token row when configured,
/// the mean over patch rows otherwise. This is the feature vector the
/// classification head (and the linear probe) consumes.
pub(crate) fn pooled_features<E: Scalar>(
    g: &mut Graph<E>,
    nodes: &ModelNodes,
    params: &ModelParams<E>,
    image: &ImageTensor,
) -> Result<NodeId> {
    let cfg = params.config();
    if image.channels != cfg.image_channels
        || image.height != cfg.image_height
        || image.width != cfg.image_width
    {
        return Err(Error::shape(format!(
            "image {}x{}x{} does not match configured {}x{}x{}",
            image.channels,
            image.height,
            image.width,
            cfg.image_channels,
            cfg.image_height,
            cfg.image_width
        )));
    }
    let patches = patchify(image, cfg.patch_size)?;
    let indices: Vec<usize> = (0..patches.num_patches()).collect();
    let latents = encode_seq(g, nodes, params, &patches.values, &indices, cfg.use_class_token);

    Ok(if cfg.use_class_token {
        g.row(latents, 0)
    } else {
        g.mean_over_rows(latents)
    })
}

/// Full classification head: encode all patches of the image, pool, apply
/// the optional feature normalization, and return softmax probabilities.
pub(crate) fn classify_probs<E: Scalar>(
    g: &mut Graph<E>,
    nodes: &ModelNodes,
    params: &ModelParams<E>,
    image: &ImageTensor,
) -> Result<NodeId> {
    let mut pooled = pooled_features(g, nodes, params, image)?;
    if let Some((mean, inv_std)) = nodes.head_norm {
        let centered = g.sub(pooled, mean);
        pooled = g.mul_elem(centered, inv_std);
    }
    let logits = linear(g, pooled, nodes.head_w, nodes.head_b);
    Ok(g.softmax_rows(logits))
}
