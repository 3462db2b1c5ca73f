//! A small pre-norm Vision Transformer.
//!
//! Sequence layout inside every block: slot 0 is the domain-shift slot,
//! slot 1 the class token, slots `2..` the patch tokens. The source model
//! re-injects a fixed slot-0 token (the class-token parameter plus the
//! slot-0 positional embedding) at each layer and passes the class token
//! between layers through a plain (identity-affine) normalization, so that
//! the lifted model at its null initialization is exactly the source model.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Epsilon shared by every normalization in the model.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ViTConfig {
    /// 32×32×1 images, patch 4, 4 layers of width 64 with 4 heads, 8 classes.
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch_size: 4,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 8,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.channels,
            self.patch_size,
            self.depth,
            self.dim,
            self.heads,
            self.mlp_ratio,
            self.num_classes,
        ];
        if positive.contains(&0) {
            return Err(Error::contract("ViT config extents must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::contract("image_size must be divisible by patch_size"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::contract("dim must be divisible by heads"));
        }
        if self.dim < 2 {
            return Err(Error::contract("dim must be at least 2"));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Tokens per sequence: shift slot, class token, patches.
    pub fn seq_len(&self) -> usize {
        2 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

/// Weights of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub query_w: Tensor,
    pub query_b: Tensor,
    pub key_w: Tensor,
    pub key_b: Tensor,
    pub value_w: Tensor,
    pub value_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// Tape handles for [`LayerWeights`].
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub norm1_gamma: Var,
    pub norm1_beta: Var,
    pub query_w: Var,
    pub query_b: Var,
    pub key_w: Var,
    pub key_b: Var,
    pub value_w: Var,
    pub value_b: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub norm2_gamma: Var,
    pub norm2_beta: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub heads: usize,
}

const LAYER_FIELDS: [&str; 16] = [
    "norm1.gamma",
    "norm1.beta",
    "attn.query.w",
    "attn.query.b",
    "attn.key.w",
    "attn.key.b",
    "attn.value.w",
    "attn.value.b",
    "attn.out.w",
    "attn.out.b",
    "norm2.gamma",
    "norm2.beta",
    "mlp.fc1.w",
    "mlp.fc1.b",
    "mlp.fc2.w",
    "mlp.fc2.b",
];

impl LayerWeights {
    fn init(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        let h = cfg.mlp_dim();
        Self {
            norm1_gamma: Tensor::ones(&[d]),
            norm1_beta: Tensor::zeros(&[d]),
            query_w: gaussian(&[d, d], 0.02, rng),
            query_b: Tensor::zeros(&[d]),
            key_w: gaussian(&[d, d], 0.02, rng),
            key_b: Tensor::zeros(&[d]),
            value_w: gaussian(&[d, d], 0.02, rng),
            value_b: Tensor::zeros(&[d]),
            out_w: gaussian(&[d, d], 0.02, rng),
            out_b: Tensor::zeros(&[d]),
            norm2_gamma: Tensor::ones(&[d]),
            norm2_beta: Tensor::zeros(&[d]),
            mlp_w1: gaussian(&[d, h], 0.02, rng),
            mlp_b1: Tensor::zeros(&[h]),
            mlp_w2: gaussian(&[h, d], 0.02, rng),
            mlp_b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.norm1_gamma,
            &self.norm1_beta,
            &self.query_w,
            &self.query_b,
            &self.key_w,
            &self.key_b,
            &self.value_w,
            &self.value_b,
            &self.out_w,
            &self.out_b,
            &self.norm2_gamma,
            &self.norm2_beta,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.norm1_gamma,
            &mut self.norm1_beta,
            &mut self.query_w,
            &mut self.query_b,
            &mut self.key_w,
            &mut self.key_b,
            &mut self.value_w,
            &mut self.value_b,
            &mut self.out_w,
            &mut self.out_b,
            &mut self.norm2_gamma,
            &mut self.norm2_beta,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }

    fn bind(&self, tape: &mut Tape, trainable: bool, heads: usize) -> LayerVars {
        let [a, b, c, d, e, f, g, h, i, j, k, l, m, n, o, p] = self.tensors().map(|t| bind_one(tape, t, trainable));
        LayerVars {
            norm1_gamma: a,
            norm1_beta: b,
            query_w: c,
            query_b: d,
            key_w: e,
            key_b: f,
            value_w: g,
            value_b: h,
            out_w: i,
            out_b: j,
            norm2_gamma: k,
            norm2_beta: l,
            mlp_w1: m,
            mlp_b1: n,
            mlp_w2: o,
            mlp_b2: p,
            heads,
        }
    }
}

impl LayerVars {
    fn all(&self) -> [Var; 16] {
        [
            self.norm1_gamma,
            self.norm1_beta,
            self.query_w,
            self.query_b,
            self.key_w,
            self.key_b,
            self.value_w,
            self.value_b,
            self.out_w,
            self.out_b,
            self.norm2_gamma,
            self.norm2_beta,
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
        ]
    }
}

fn bind_one(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

pub(crate) fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let numel = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..numel).map(|_| normal.sample(rng)).collect())
}

/// The source model: embedding, blocks, final normalization and head.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub cfg: ViTConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Tape handles for a bound [`Backbone`].
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls_token: Var,
    pub pos_embed: Var,
    pub layers: Vec<LayerVars>,
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub head_w: Var,
    pub head_b: Var,
    /// Identity affine pair used by the class-token normalization.
    pub unit_gamma: Var,
    pub unit_beta: Var,
}

impl BackboneVars {
    /// Every bound weight in [`Backbone::named_tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.patch_w, self.patch_b, self.cls_token, self.pos_embed];
        for l in &self.layers {
            out.extend(l.all());
        }
        out.extend([self.norm_gamma, self.norm_beta, self.head_w, self.head_b]);
        out
    }
}

/// Result of a forward pass through the source model.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Per-layer attention weights `[B, heads, T, T]`.
    pub attention: Vec<Var>,
}

impl Backbone {
    pub fn init(cfg: ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        Ok(Self {
            cfg,
            patch_w: gaussian(&[cfg.patch_dim(), d], 0.02, &mut rng),
            patch_b: Tensor::zeros(&[d]),
            cls_token: gaussian(&[d], 0.02, &mut rng),
            pos_embed: gaussian(&[cfg.seq_len(), d], 0.02, &mut rng),
            layers: (0..cfg.depth).map(|_| LayerWeights::init(&cfg, &mut rng)).collect(),
            norm_gamma: Tensor::ones(&[d]),
            norm_beta: Tensor::zeros(&[d]),
            head_w: gaussian(&[d, cfg.num_classes], 0.02, &mut rng),
            head_b: Tensor::zeros(&[cfg.num_classes]),
        })
    }

    /// Canonical (name, tensor) listing used for checkpoints and checksums.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch.w".into(), &self.patch_w),
            ("patch.b".into(), &self.patch_b),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(l.tensors()) {
                out.push((alloc::format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("norm.gamma".into(), &self.norm_gamma));
        out.push(("norm.beta".into(), &self.norm_beta));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Mutable tensors in [`Backbone::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([
            &mut self.norm_gamma,
            &mut self.norm_beta,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    /// Rebuilds a backbone from tensors in [`Backbone::named_tensors`] order.
    pub fn from_tensors(cfg: ViTConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut model = Self::init(cfg, 0)?;
        let expected = model.named_tensors().len();
        if tensors.len() != expected {
            return Err(Error::contract(alloc::format!(
                "backbone expects {expected} tensors, got {}",
                tensors.len()
            )));
        }
        for (slot, t) in model.tensors_mut().into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::dim("backbone tensor", slot.shape(), t.shape()));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn checksum(&self) -> u64 {
        crate::tensor::checksum(self.named_tensors().into_iter().map(|(_, t)| t))
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// The slot-0 token of the source model: the class-token parameter
    /// carrying the slot-0 positional embedding.
    pub fn shift_slot_token(&self) -> Tensor {
        let d = self.cfg.dim;
        let data = self
            .cls_token
            .data()
            .iter()
            .zip(&self.pos_embed.data()[..d])
            .map(|(c, p)| c + p)
            .collect();
        Tensor::from_parts(vec![d], data)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BackboneVars {
        let d = self.cfg.dim;
        BackboneVars {
            patch_w: bind_one(tape, &self.patch_w, trainable),
            patch_b: bind_one(tape, &self.patch_b, trainable),
            cls_token: bind_one(tape, &self.cls_token, trainable),
            pos_embed: bind_one(tape, &self.pos_embed, trainable),
            layers: self
                .layers
                .iter()
                .map(|l| l.bind(tape, trainable, self.cfg.heads))
                .collect(),
            norm_gamma: bind_one(tape, &self.norm_gamma, trainable),
            norm_beta: bind_one(tape, &self.norm_beta, trainable),
            head_w: bind_one(tape, &self.head_w, trainable),
            head_b: bind_one(tape, &self.head_b, trainable),
            unit_gamma: tape.constant(Tensor::ones(&[d])),
            unit_beta: tape.constant(Tensor::zeros(&[d])),
        }
    }

    /// Source-model forward pass on raw images in `[0, 1]`.
    pub fn forward(&self, tape: &mut Tape, vars: &BackboneVars, images: Var) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let normalized = normalize_input(tape, images)?;
        let patches = patchify(tape, normalized, cfg)?;
        let seq = embed(tape, patches, vars)?;
        let batch = tape.shape(seq)[0];
        let pos0 = tape.narrow(vars.pos_embed, 0, 0, 1)?;
        let pos0 = tape.reshape(pos0, &[cfg.dim])?;
        let slot0 = tape.add(vars.cls_token, pos0)?;
        let c1 = tape.narrow(seq, 1, 1, 1)?;
        let mut class = tape.reshape(c1, &[batch, cfg.dim])?;
        let mut x = seq;
        let mut attention = Vec::with_capacity(cfg.depth);
        for layer in &vars.layers {
            let input = crate::lifting::inject_tokens(tape, x, slot0, class)?;
            let (y, w) = layer_forward(tape, input, layer)?;
            attention.push(w);
            let split = split_slots(tape, y)?;
            class = tape.layer_norm(split.class, vars.unit_gamma, vars.unit_beta, NORM_EPS)?;
            x = y;
        }
        let logits = classify(tape, class, vars)?;
        Ok(ForwardOutput { logits, attention })
    }

    /// No-grad logits for a batch of raw images.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Attention weights of one layer from a no-grad forward pass.
    pub fn extract_attention(&self, images: &Tensor, layer_index: usize) -> Result<Tensor> {
        if layer_index >= self.cfg.depth {
            return Err(Error::Index {
                index: layer_index,
                len: self.cfg.depth,
            });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(out.attention[layer_index]).clone())
    }
}

/// The three parts of a block output.
pub struct SlotSplit {
    /// Slot-0 output `[B, d]`.
    pub shift: Var,
    /// Class-token output `[B, d]`.
    pub class: Var,
    /// Patch tokens `[B, P, d]`.
    pub patches: Var,
}

pub fn split_slots(tape: &mut Tape, y: Var) -> Result<SlotSplit> {
    let s = tape.shape(y).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let shift = tape.narrow(y, 1, 0, 1)?;
    let shift = tape.reshape(shift, &[b, d])?;
    let class = tape.narrow(y, 1, 1, 1)?;
    let class = tape.reshape(class, &[b, d])?;
    let patches = tape.narrow(y, 1, 2, t - 2)?;
    Ok(SlotSplit { shift, class, patches })
}

/// Maps pixels from `[0, 1]` to `[-1, 1]` (mean 0.5, std 0.5).
pub fn normalize_input(tape: &mut Tape, images: Var) -> Result<Var> {
    let scaled = tape.scale(images, 2.0)?;
    let shift = tape.constant(Tensor::scalar(-1.0));
    tape.add(scaled, shift)
}

/// `[B, C, H, W]` to `[B, P, C·p·p]`: non-overlapping patches in row-major
/// order (top-left first), each flattened channel-major then row-major.
pub fn patchify(tape: &mut Tape, images: Var, cfg: &ViTConfig) -> Result<Var> {
    let s = tape.shape(images).to_vec();
    if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::dim(
            "patchify",
            &s,
            &[0, cfg.channels, cfg.image_size, cfg.image_size],
        ));
    }
    let (b, c, p, g) = (s[0], cfg.channels, cfg.patch_size, cfg.patches_per_side());
    let x = tape.reshape(images, &[b, c, g, p, g, p])?;
    let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(x, &[b, g * g, c * p * p])
}

/// Linear patch projection plus positional embeddings. Slots 0 and 1 both
/// start from the class-token parameter.
pub fn embed(tape: &mut Tape, patches: Var, vars: &BackboneVars) -> Result<Var> {
    let s = tape.shape(patches).to_vec();
    let d = tape.shape(vars.patch_w)[1];
    if tape.shape(vars.patch_w)[0] != s[2] {
        return Err(Error::dim("embed", &s, tape.shape(vars.patch_w)));
    }
    let proj = tape.matmul(patches, vars.patch_w)?;
    let tokens = tape.add(proj, vars.patch_b)?;
    let cls = tape.broadcast_to(vars.cls_token, &[s[0], 1, d])?;
    let seq = tape.concat(&[cls, cls, tokens], 1)?;
    tape.add(seq, vars.pos_embed)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

/// Multi-head scaled dot-product self-attention with scale `1/sqrt(d/heads)`.
/// Returns the projected output and the attention weights `[B, heads, T, T]`.
pub fn attention(tape: &mut Tape, x: Var, layer: &LayerVars) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("attention", &s, &[]));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let heads = layer.heads;
    let hd = d / heads;
    let split_heads = |tape: &mut Tape, v: Var| -> Result<Var> {
        let v = tape.reshape(v, &[b, t, heads, hd])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        tape.reshape(v, &[b * heads, t, hd])
    };
    let q = linear(tape, x, layer.query_w, layer.query_b)?;
    let k = linear(tape, x, layer.key_w, layer.key_b)?;
    let v = linear(tape, x, layer.value_w, layer.value_b)?;
    let (q, k, v) = (split_heads(tape, q)?, split_heads(tape, k)?, split_heads(tape, v)?);
    let q = tape.scale(q, 1.0 / crate::math::sqrt(hd as f64))?;
    let scores = tape.matmul_nt(q, k)?;
    let weights = tape.softmax(scores)?;
    let mixed = tape.matmul(weights, v)?;
    let mixed = tape.reshape(mixed, &[b, heads, t, hd])?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = tape.reshape(mixed, &[b, t, d])?;
    let out = linear(tape, mixed, layer.out_w, layer.out_b)?;
    let weights = tape.reshape(weights, &[b, heads, t, t])?;
    Ok((out, weights))
}

/// Pre-norm block: `x + attn(norm(x))`, then `+ mlp(norm(.))`.
pub fn layer_forward(tape: &mut Tape, x: Var, layer: &LayerVars) -> Result<(Var, Var)> {
    let h = tape.layer_norm(x, layer.norm1_gamma, layer.norm1_beta, NORM_EPS)?;
    let (a, weights) = attention(tape, h, layer)?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, layer.norm2_gamma, layer.norm2_beta, NORM_EPS)?;
    let h = linear(tape, h, layer.mlp_w1, layer.mlp_b1)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, h, layer.mlp_w2, layer.mlp_b2)?;
    Ok((tape.add(x, h)?, weights))
}

/// Final normalization and linear head on the class token `[B, d]`.
pub fn classify(tape: &mut Tape, class: Var, vars: &BackboneVars) -> Result<Var> {
    let h = tape.layer_norm(class, vars.norm_gamma, vars.norm_beta, NORM_EPS)?;
    linear(tape, h, vars.head_w, vars.head_b)
}

#[cfg(test)]
#[path = "vit_tests.rs"]
mod tests;
