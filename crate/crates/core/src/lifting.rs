//! Dual-path lifting: per-layer domain-shift tokens, prediction networks
//! and class-token update networks wrapped around a frozen backbone.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{self, gaussian, Backbone, BackboneVars, NORM_EPS};

/// The trainable tensors of one lifting layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LiftingField {
    Token,
    PredW1,
    PredB1,
    PredW2,
    PredB2,
    UpdGamma,
    UpdBeta,
}

impl LiftingField {
    pub const ALL: [LiftingField; 7] = [
        LiftingField::Token,
        LiftingField::PredW1,
        LiftingField::PredB1,
        LiftingField::PredW2,
        LiftingField::PredB2,
        LiftingField::UpdGamma,
        LiftingField::UpdBeta,
    ];

    /// Update-network parameters form the smooth group.
    pub fn is_smooth(self) -> bool {
        matches!(self, LiftingField::UpdGamma | LiftingField::UpdBeta)
    }

    pub fn name(self) -> &'static str {
        match self {
            LiftingField::Token => "token",
            LiftingField::PredW1 => "pred.fc1.w",
            LiftingField::PredB1 => "pred.fc1.b",
            LiftingField::PredW2 => "pred.fc2.w",
            LiftingField::PredB2 => "pred.fc2.b",
            LiftingField::UpdGamma => "update.gamma",
            LiftingField::UpdBeta => "update.beta",
        }
    }
}

/// Identifies one lifting tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub field: LiftingField,
}

impl ParamId {
    pub fn name(&self) -> String {
        format!("lifting.{}.{}", self.layer, self.field.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LiftingLayer {
    /// Domain-shift token `P_l`, `[d]`.
    pub token: Tensor,
    pub pred_w1: Tensor,
    pub pred_b1: Tensor,
    pub pred_w2: Tensor,
    pub pred_b2: Tensor,
    pub upd_gamma: Tensor,
    pub upd_beta: Tensor,
}

impl LiftingLayer {
    pub fn get(&self, field: LiftingField) -> &Tensor {
        match field {
            LiftingField::Token => &self.token,
            LiftingField::PredW1 => &self.pred_w1,
            LiftingField::PredB1 => &self.pred_b1,
            LiftingField::PredW2 => &self.pred_w2,
            LiftingField::PredB2 => &self.pred_b2,
            LiftingField::UpdGamma => &self.upd_gamma,
            LiftingField::UpdBeta => &self.upd_beta,
        }
    }

    pub fn get_mut(&mut self, field: LiftingField) -> &mut Tensor {
        match field {
            LiftingField::Token => &mut self.token,
            LiftingField::PredW1 => &mut self.pred_w1,
            LiftingField::PredB1 => &mut self.pred_b1,
            LiftingField::PredW2 => &mut self.pred_w2,
            LiftingField::PredB2 => &mut self.pred_b2,
            LiftingField::UpdGamma => &mut self.upd_gamma,
            LiftingField::UpdBeta => &mut self.upd_beta,
        }
    }
}

/// All lifting parameters, one [`LiftingLayer`] per backbone layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftingParams {
    pub layers: Vec<LiftingLayer>,
}

impl LiftingParams {
    /// Tokens start as noisy copies (σ = 0.02) of the source slot-0 token,
    /// prediction networks output exactly zero, update networks are identity-affine.
    pub fn init(backbone: &Backbone, hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::contract("prediction hidden width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = backbone.shift_slot_token();
        let d = backbone.cfg.dim;
        let layers = (0..backbone.cfg.depth)
            .map(|_| {
                let noise = gaussian(&[d], 0.02, &mut rng);
                let token = Tensor::from_parts(
                    alloc::vec![d],
                    base.data().iter().zip(noise.data()).map(|(b, n)| b + n).collect(),
                );
                LiftingLayer {
                    token,
                    pred_w1: gaussian(&[d, hidden], 0.02, &mut rng),
                    pred_b1: Tensor::zeros(&[hidden]),
                    pred_w2: Tensor::zeros(&[hidden, d]),
                    pred_b2: Tensor::zeros(&[d]),
                    upd_gamma: Tensor::ones(&[d]),
                    upd_beta: Tensor::zeros(&[d]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Lifting that reproduces the source model exactly: every token equals
    /// the source slot-0 token and every prediction network is zero.
    pub fn null(backbone: &Backbone, hidden: usize) -> Result<Self> {
        let mut p = Self::init(backbone, hidden, 0)?;
        let base = backbone.shift_slot_token();
        for l in &mut p.layers {
            l.token = base.clone();
            l.pred_w1 = Tensor::zeros(l.pred_w1.shape());
        }
        Ok(p)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.layers.first().map_or(0, |l| l.pred_b1.numel())
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.layers.len())
            .flat_map(|layer| LiftingField::ALL.map(|field| ParamId { layer, field }))
            .collect()
    }

    pub fn get(&self, id: ParamId) -> Result<&Tensor> {
        let len = self.layers.len();
        self.layers
            .get(id.layer)
            .map(|l| l.get(id.field))
            .ok_or(Error::Index { index: id.layer, len })
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        let len = self.layers.len();
        self.layers
            .get_mut(id.layer)
            .map(|l| l.get_mut(id.field))
            .ok_or(Error::Index { index: id.layer, len })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.ids()
            .into_iter()
            .map(|id| (id.name(), self.layers[id.layer].get(id.field)))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn checksum(&self) -> u64 {
        crate::tensor::checksum(self.named_tensors().into_iter().map(|(_, t)| t))
    }

    /// Binds every tensor; those for which `trainable` holds become parameters.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamId) -> bool) -> Vec<LiftingVars> {
        self.layers
            .iter()
            .enumerate()
            .map(|(layer, l)| {
                let mut bind = |field: LiftingField| {
                    let t = l.get(field).clone();
                    if trainable(ParamId { layer, field }) {
                        tape.param(t)
                    } else {
                        tape.constant(t)
                    }
                };
                LiftingVars {
                    token: bind(LiftingField::Token),
                    pred_w1: bind(LiftingField::PredW1),
                    pred_b1: bind(LiftingField::PredB1),
                    pred_w2: bind(LiftingField::PredW2),
                    pred_b2: bind(LiftingField::PredB2),
                    upd_gamma: bind(LiftingField::UpdGamma),
                    upd_beta: bind(LiftingField::UpdBeta),
                }
            })
            .collect()
    }
}

/// Tape handles for one [`LiftingLayer`].
#[derive(Clone, Copy, Debug)]
pub struct LiftingVars {
    pub token: Var,
    pub pred_w1: Var,
    pub pred_b1: Var,
    pub pred_w2: Var,
    pub pred_b2: Var,
    pub upd_gamma: Var,
    pub upd_beta: Var,
}

impl LiftingVars {
    pub fn get(&self, field: LiftingField) -> Var {
        match field {
            LiftingField::Token => self.token,
            LiftingField::PredW1 => self.pred_w1,
            LiftingField::PredB1 => self.pred_b1,
            LiftingField::PredW2 => self.pred_w2,
            LiftingField::PredB2 => self.pred_b2,
            LiftingField::UpdGamma => self.upd_gamma,
            LiftingField::UpdBeta => self.upd_beta,
        }
    }
}

/// Tape handles produced inside one lifted layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerRecord {
    /// Slot-0 output `f_l^d`, `[B, d]`.
    pub shift_out: Var,
    /// Class-token output `f_l^c`, `[B, d]`.
    pub class_out: Var,
    /// Predicted domain shift `π_l`, `[B, d]`.
    pub pi: Var,
    /// Corrected class token `C_{l+1}`, `[B, d]`.
    pub class_next: Var,
}

/// Per-layer records of one lifted forward pass.
#[derive(Clone, Debug, Default)]
pub struct LiftingState {
    pub records: Vec<LayerRecord>,
}

impl LiftingState {
    pub fn pis(&self) -> Vec<Var> {
        self.records.iter().map(|r| r.pi).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LiftedOutput {
    pub logits: Var,
    pub state: LiftingState,
    pub attention: Vec<Var>,
}

/// Writes `token` (`[d]`, broadcast over the batch) into slot 0 and `class`
/// (`[B, d]`) into slot 1 of `x` (`[B, T, d]`); patch slots pass through.
pub fn inject_tokens(tape: &mut Tape, x: Var, token: Var, class: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] < 2 {
        return Err(Error::dim("inject_tokens", &s, &[]));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    if tape.shape(token) != [d] {
        return Err(Error::dim("inject_tokens", &s, tape.shape(token)));
    }
    if tape.shape(class) != [b, d] {
        return Err(Error::dim("inject_tokens", &s, tape.shape(class)));
    }
    let slot0 = tape.broadcast_to(token, &[b, 1, d])?;
    let slot1 = tape.reshape(class, &[b, 1, d])?;
    if t == 2 {
        return tape.concat(&[slot0, slot1], 1);
    }
    let patches = tape.narrow(x, 1, 2, t - 2)?;
    tape.concat(&[slot0, slot1, patches], 1)
}

/// `π_l = W2·gelu(W1·f + b1) + b2`, row-wise.
pub fn predict_shift(tape: &mut Tape, shift_out: Var, lv: &LiftingVars) -> Result<Var> {
    let h = tape.matmul(shift_out, lv.pred_w1)?;
    let h = tape.add(h, lv.pred_b1)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, lv.pred_w2)?;
    tape.add(o, lv.pred_b2)
}

/// `C_{l+1} = layer_norm(f_c − π_l; γ_l, β_l)`.
pub fn update_class(tape: &mut Tape, class_out: Var, pi: Var, lv: &LiftingVars) -> Result<Var> {
    if tape.shape(class_out) != tape.shape(pi) {
        return Err(Error::dim("update_class", tape.shape(class_out), tape.shape(pi)));
    }
    let r = tape.sub(class_out, pi)?;
    tape.layer_norm(r, lv.upd_gamma, lv.upd_beta, NORM_EPS)
}

/// Forward pass with lifting at every layer on raw images in `[0, 1]`.
pub fn lifted_forward(
    tape: &mut Tape,
    backbone: &Backbone,
    bvars: &BackboneVars,
    lvars: &[LiftingVars],
    images: Var,
) -> Result<LiftedOutput> {
    let cfg = &backbone.cfg;
    if lvars.len() != cfg.depth {
        return Err(Error::contract(format!(
            "lifting has {} layers, backbone {}",
            lvars.len(),
            cfg.depth
        )));
    }
    let normalized = vit::normalize_input(tape, images)?;
    let patches = vit::patchify(tape, normalized, cfg)?;
    let mut x = vit::embed(tape, patches, bvars)?;
    let batch = tape.shape(x)[0];
    let c1 = tape.narrow(x, 1, 1, 1)?;
    let mut class = tape.reshape(c1, &[batch, cfg.dim])?;
    let mut state = LiftingState::default();
    let mut attention = Vec::with_capacity(cfg.depth);
    for (layer, lv) in bvars.layers.iter().zip(lvars) {
        let input = inject_tokens(tape, x, lv.token, class)?;
        let (y, w) = vit::layer_forward(tape, input, layer)?;
        attention.push(w);
        let split = vit::split_slots(tape, y)?;
        let pi = predict_shift(tape, split.shift, lv)?;
        let class_next = update_class(tape, split.class, pi, lv)?;
        state.records.push(LayerRecord {
            shift_out: split.shift,
            class_out: split.class,
            pi,
            class_next,
        });
        class = class_next;
        x = y;
    }
    let logits = vit::classify(tape, class, bvars)?;
    Ok(LiftedOutput {
        logits,
        state,
        attention,
    })
}

/// Frozen backbone plus lifting parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedViT {
    pub backbone: Backbone,
    pub lifting: LiftingParams,
}

/// Values from a no-grad lifted forward pass.
#[derive(Clone, Debug)]
pub struct LiftedInference {
    pub logits: Tensor,
    pub pis: Vec<Tensor>,
    pub attention: Vec<Tensor>,
}

impl LiftedViT {
    pub fn new(backbone: Backbone, hidden: usize, seed: u64) -> Result<Self> {
        let lifting = LiftingParams::init(&backbone, hidden, seed)?;
        Ok(Self { backbone, lifting })
    }

    pub fn infer(&self, images: &Tensor) -> Result<LiftedInference> {
        let mut tape = Tape::new();
        let bvars = self.backbone.bind(&mut tape, false);
        let lvars = self.lifting.bind(&mut tape, |_| false);
        let x = tape.constant(images.clone());
        let out = lifted_forward(&mut tape, &self.backbone, &bvars, &lvars, x)?;
        Ok(LiftedInference {
            logits: tape.value(out.logits).clone(),
            pis: out.state.pis().into_iter().map(|v| tape.value(v).clone()).collect(),
            attention: out.attention.into_iter().map(|v| tape.value(v).clone()).collect(),
        })
    }

    pub fn extract_attention(&self, images: &Tensor, layer_index: usize) -> Result<Tensor> {
        let depth = self.backbone.cfg.depth;
        if layer_index >= depth {
            return Err(Error::Index {
                index: layer_index,
                len: depth,
            });
        }
        Ok(self.infer(images)?.attention.swap_remove(layer_index))
    }
}

#[cfg(test)]
#[path = "lifting_tests.rs"]
mod tests;
