//! Reliable entropy, cross-sample similarity and their balanced sum.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::lifting::LiftingState;
use crate::math;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Guard added to the product of norms in the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Default reliability threshold, `0.4·ln C` nats.
pub fn default_e0(num_classes: usize) -> f64 {
    0.4 * math::ln(num_classes as f64)
}

/// Which samples pass the entropy filter.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMask {
    pub selected: Vec<bool>,
    pub e0: f64,
}

impl EntropyMask {
    pub fn from_entropies(entropies: &[f64], e0: f64) -> Result<Self> {
        if !(e0 > 0.0) {
            return Err(Error::contract("entropy threshold must be positive"));
        }
        Ok(Self {
            selected: entropies.iter().map(|&e| e < e0).collect(),
            e0,
        })
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Balance weight `ΣI / B`.
    pub fn lambda(&self) -> f64 {
        if self.selected.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.selected.len() as f64
        }
    }

    fn as_tensor(&self) -> Tensor {
        let v: Vec<f64> = self.selected.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
        Tensor::vector(&v)
    }
}

/// `E_j = −Σ_c p_jc ln p_jc` per row, `[B]`.
pub fn per_sample_entropy(tape: &mut Tape, logits: Var) -> Result<Var> {
    if tape.shape(logits).len() != 2 {
        return Err(Error::dim("per_sample_entropy", tape.shape(logits), &[]));
    }
    let p = tape.softmax(logits)?;
    let lp = tape.log_softmax(logits)?;
    let plp = tape.mul(p, lp)?;
    let s = tape.sum_axis(plp, 1)?;
    tape.neg(s)
}

/// `L_e = (1/B)·Σ_j I_j·E_j` with `I_j = [E_j < E_0]` held constant.
pub fn reliable_entropy_loss(tape: &mut Tape, logits: Var, e0: f64) -> Result<(Var, EntropyMask)> {
    let e = per_sample_entropy(tape, logits)?;
    let mask = EntropyMask::from_entropies(tape.value(e).data(), e0)?;
    let m = tape.constant(mask.as_tensor());
    let kept = tape.mul(e, m)?;
    let loss = tape.mean(kept)?;
    Ok((loss, mask))
}

/// Reliable entropy on precomputed entropy values.
pub fn reliable_entropy_value(entropies: &[f64], e0: f64) -> Result<(f64, EntropyMask)> {
    let mask = EntropyMask::from_entropies(entropies, e0)?;
    if entropies.is_empty() {
        return Ok((0.0, mask));
    }
    let kept: f64 = entropies
        .iter()
        .zip(&mask.selected)
        .map(|(&e, &s)| if s { e } else { 0.0 })
        .sum();
    Ok((kept / entropies.len() as f64, mask))
}

/// Pairwise cosine similarity of the rows of `π`, `[B, B]`.
pub fn similarity_matrix(tape: &mut Tape, pi: Var) -> Result<Var> {
    tape.cosine_matrix(pi, COSINE_EPS)
}

/// `L_s = −(1/L)·Σ_l mean(M_l)`.
pub fn similarity_loss(tape: &mut Tape, state: &LiftingState) -> Result<Var> {
    let pis = state.pis();
    if pis.is_empty() {
        return Err(Error::contract("similarity loss needs at least one layer"));
    }
    let mut total: Option<Var> = None;
    for pi in &pis {
        let m = similarity_matrix(tape, *pi)?;
        let mean = tape.mean(m)?;
        total = Some(match total {
            None => mean,
            Some(t) => tape.add(t, mean)?,
        });
    }
    let total = total.expect("at least one layer");
    tape.scale(total, -1.0 / pis.len() as f64)
}

/// `L = L_e + λ·L_s` with `λ = ΣI / B`.
pub fn combined_loss(tape: &mut Tape, entropy: Var, similarity: Var, mask: &EntropyMask) -> Result<Var> {
    let weighted = tape.scale(similarity, mask.lambda())?;
    tape.add(entropy, weighted)
}
