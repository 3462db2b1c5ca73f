//! Gradient descent, sharpness-aware minimization and the dual-path step.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use core::fmt::Debug;

use crate::error::{Error, Result};
use crate::lifting::{lifted_forward, LiftedViT, LiftingParams, ParamId};
use crate::losses;
use crate::math;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Below this gradient norm the SAM perturbation is skipped.
pub const SAM_MIN_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    Smooth,
    NonSmooth,
}

/// Parameters sharing one optimizer rule.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup<K> {
    pub kind: GroupKind,
    pub params: Vec<K>,
    pub lr: f64,
    /// SAM radius; ignored by plain SGD.
    pub rho: f64,
}

/// Anything that owns tensors addressable by key.
pub trait ParamStore<K> {
    fn tensor(&self, key: &K) -> Result<&Tensor>;
    fn tensor_mut(&mut self, key: &K) -> Result<&mut Tensor>;
}

impl ParamStore<usize> for Vec<Tensor> {
    fn tensor(&self, key: &usize) -> Result<&Tensor> {
        self.get(*key).ok_or(Error::Index {
            index: *key,
            len: self.len(),
        })
    }

    fn tensor_mut(&mut self, key: &usize) -> Result<&mut Tensor> {
        let len = self.len();
        self.get_mut(*key).ok_or(Error::Index { index: *key, len })
    }
}

impl ParamStore<ParamId> for LiftingParams {
    fn tensor(&self, key: &ParamId) -> Result<&Tensor> {
        self.get(*key)
    }

    fn tensor_mut(&mut self, key: &ParamId) -> Result<&mut Tensor> {
        self.get_mut(*key)
    }
}

pub type Gradients<K> = BTreeMap<K, Tensor>;

fn grads_for<'a, K: Ord + Debug>(group: &ParamGroup<K>, grads: &'a Gradients<K>) -> Result<Vec<&'a Tensor>> {
    group
        .params
        .iter()
        .map(|k| {
            grads
                .get(k)
                .ok_or_else(|| Error::contract(format!("missing gradient for {k:?}")))
        })
        .collect()
}

fn axpy<K: Debug, S: ParamStore<K>>(store: &mut S, key: &K, alpha: f64, g: &Tensor) -> Result<()> {
    let t = store.tensor_mut(key)?;
    if t.shape() != g.shape() {
        return Err(Error::dim("optimizer update", t.shape(), g.shape()));
    }
    for (v, d) in t.data_mut().iter_mut().zip(g.data()) {
        *v += alpha * d;
    }
    Ok(())
}

/// `θ ← θ − η·g` for every parameter of the group.
pub fn sgd_step<K: Ord + Debug, S: ParamStore<K>>(store: &mut S, group: &ParamGroup<K>, grads: &Gradients<K>) -> Result<()> {
    let gs = grads_for(group, grads)?;
    for (k, g) in group.params.iter().zip(&gs) {
        let t = store.tensor(k)?;
        if t.shape() != g.shape() {
            return Err(Error::dim("sgd_step", t.shape(), g.shape()));
        }
    }
    for (k, g) in group.params.iter().zip(gs) {
        axpy(store, k, -group.lr, g)?;
    }
    Ok(())
}

/// `ε = ρ·g/‖g‖₂` over the concatenation of `grads`.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub eps: Vec<Tensor>,
    pub grad_norm: f64,
    pub eps_norm: f64,
}

pub fn sam_perturbation(grads: &[&Tensor], rho: f64) -> Result<Perturbation> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::contract("SAM radius must be non-negative and finite"));
    }
    let grad_norm = math::sqrt(grads.iter().map(|g| g.sq_norm()).sum());
    if !grad_norm.is_finite() {
        return Err(Error::Numeric {
            op: "sam_perturbation",
            detail: "non-finite gradient norm".into(),
        });
    }
    if grad_norm < SAM_MIN_NORM {
        return Ok(Perturbation {
            eps: grads.iter().map(|g| Tensor::zeros(g.shape())).collect(),
            grad_norm,
            eps_norm: 0.0,
        });
    }
    let c = rho / grad_norm;
    let eps: Vec<Tensor> = grads.iter().map(|g| g.map(|v| c * v)).collect();
    let eps_norm = math::sqrt(eps.iter().map(|e| e.sq_norm()).sum());
    Ok(Perturbation {
        eps,
        grad_norm,
        eps_norm,
    })
}

/// Saved copies of a group's parameters while they carry a perturbation.
#[derive(Clone, Debug)]
pub struct SamScratch {
    saved: Vec<Tensor>,
}

impl SamScratch {
    /// Saves the group and moves it to `θ + ε`.
    pub fn perturb<K: Debug, S: ParamStore<K>>(store: &mut S, params: &[K], eps: &[Tensor]) -> Result<Self> {
        if params.len() != eps.len() {
            return Err(Error::contract("perturbation length differs from group"));
        }
        let saved = params
            .iter()
            .map(|k| store.tensor(k).cloned())
            .collect::<Result<Vec<_>>>()?;
        let mut scratch = Self { saved };
        for (k, e) in params.iter().zip(eps) {
            if let Err(err) = axpy(store, k, 1.0, e) {
                scratch.restore(store, params)?;
                return Err(err);
            }
        }
        Ok(scratch)
    }

    /// Writes the saved values back, bit for bit.
    pub fn restore<K: Debug, S: ParamStore<K>>(&mut self, store: &mut S, params: &[K]) -> Result<()> {
        for (k, saved) in params.iter().zip(&self.saved) {
            store.tensor_mut(k)?.data_mut().copy_from_slice(saved.data());
        }
        Ok(())
    }
}

/// Diagnostics of one [`sam_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamReport {
    pub grad_norm: f64,
    pub eps_norm: f64,
}

/// One SAM step: gradient at `θ`, perturb by `ε`, gradient at `θ + ε`,
/// restore `θ`, then descend with the perturbed gradient. On any failure
/// the parameters are left at `θ`.
pub fn sam_step<K, S, F>(store: &mut S, group: &ParamGroup<K>, mut loss_fn: F) -> Result<SamReport>
where
    K: Ord + Debug,
    S: ParamStore<K>,
    F: FnMut(&S) -> Result<Gradients<K>>,
{
    let g = loss_fn(store)?;
    let pert = sam_perturbation(&grads_for(group, &g)?, group.rho)?;
    let mut scratch = SamScratch::perturb(store, &group.params, &pert.eps)?;
    let perturbed = loss_fn(store);
    scratch.restore(store, &group.params)?;
    sgd_step(store, group, &perturbed?)?;
    Ok(SamReport {
        grad_norm: pert.grad_norm,
        eps_norm: pert.eps_norm,
    })
}

/// Update-network parameters are smooth; tokens and prediction networks are not.
pub fn partition(lifting: &LiftingParams) -> (Vec<ParamId>, Vec<ParamId>) {
    lifting.ids().into_iter().partition(|id| id.field.is_smooth())
}

/// Checks that the groups are disjoint and together cover `all`.
pub fn validate_partition<K: Ord + Clone + Debug>(groups: &[&[K]], all: &[K]) -> Result<()> {
    let mut seen = BTreeMap::new();
    for (gi, g) in groups.iter().enumerate() {
        for k in g.iter() {
            if let Some(prev) = seen.insert(k.clone(), gi) {
                return Err(Error::contract(format!("{k:?} is in groups {prev} and {gi}")));
            }
        }
    }
    for k in all {
        if seen.remove(k).is_none() {
            return Err(Error::contract(format!("{k:?} belongs to no group")));
        }
    }
    if let Some((k, _)) = seen.into_iter().next() {
        return Err(Error::contract(format!("{k:?} is not a trainable parameter")));
    }
    Ok(())
}

/// Forward and backward evaluations performed so far.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassCounter {
    pub forward: u64,
    pub backward: u64,
}

/// The adaptation objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub e0: f64,
    /// Include `λ·L_s` in the loss.
    pub similarity: bool,
}

/// Loss terms and optional gradients of one lifted forward pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub logits: Tensor,
    pub loss: f64,
    pub entropy: f64,
    pub similarity: f64,
    pub lambda: f64,
    pub selected: usize,
    /// Present when requested and the entropy mask is non-empty.
    pub grads: Option<Gradients<ParamId>>,
}

/// Runs the lifted model on `images`; backpropagates into the tensors in
/// `trainable` when `with_grads` is set and at least one sample is reliable.
pub fn evaluate(
    model: &LiftedViT,
    images: &Tensor,
    objective: &Objective,
    trainable: &[ParamId],
    with_grads: bool,
    counter: &mut PassCounter,
) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let bvars = model.backbone.bind(&mut tape, false);
    let lvars = model.lifting.bind(&mut tape, |id| with_grads && trainable.contains(&id));
    let x = tape.constant(images.clone());
    let out = lifted_forward(&mut tape, &model.backbone, &bvars, &lvars, x)?;
    let (le, mask) = losses::reliable_entropy_loss(&mut tape, out.logits, objective.e0)?;
    let ls = losses::similarity_loss(&mut tape, &out.state)?;
    let total = if objective.similarity {
        losses::combined_loss(&mut tape, le, ls, &mask)?
    } else {
        le
    };
    counter.forward += 1;
    let loss = tape.value(total).item()?;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            op: "evaluate",
            detail: format!("non-finite loss {loss}"),
        });
    }
    let selected = mask.count();
    let grads = if with_grads && selected > 0 {
        tape.backward(total)?;
        counter.backward += 1;
        let mut g = Gradients::new();
        for &id in trainable {
            g.insert(id, tape.grad(lvars[id.layer].get(id.field)));
        }
        Some(g)
    } else {
        None
    };
    Ok(Evaluation {
        logits: tape.value(out.logits).clone(),
        loss,
        entropy: tape.value(le).item()?,
        similarity: tape.value(ls).item()?,
        lambda: mask.lambda(),
        selected,
        grads,
    })
}

/// Step sizes and radii of the dual-path step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualHyper {
    pub lr_smooth: f64,
    pub lr_nonsmooth: f64,
    pub rho_smooth: f64,
    /// SAM radius for the prediction path; `0` keeps it non-smooth.
    pub rho_pred: f64,
    pub objective: Objective,
}

/// Scalar diagnostics of an adaptation step, taken at the pre-update parameters.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: f64,
    pub entropy: f64,
    pub similarity: f64,
    pub lambda: f64,
    pub selected: usize,
    /// Norm of the smooth-group gradient at `θ_t`.
    pub grad_norm: f64,
    /// Norm of the smooth-group perturbation.
    pub eps_norm: f64,
    pub skipped: bool,
    /// Predictions for the batch before the update.
    pub logits: Tensor,
}

impl StepReport {
    fn from_eval(e: Evaluation, skipped: bool) -> Self {
        Self {
            loss: e.loss,
            entropy: e.entropy,
            similarity: e.similarity,
            lambda: e.lambda,
            selected: e.selected,
            grad_norm: 0.0,
            eps_norm: 0.0,
            skipped,
            logits: e.logits,
        }
    }
}

fn collect<'a>(g: &'a Gradients<ParamId>, ids: &[ParamId]) -> Result<Vec<&'a Tensor>> {
    ids.iter()
        .map(|id| g.get(id).ok_or_else(|| Error::contract(format!("missing gradient for {id:?}"))))
        .collect()
}

/// Two-pass step: SAM on the update networks, plain gradient descent with
/// the first-pass gradients on the tokens and prediction networks. With a
/// positive `rho_pred` the prediction path is perturbed and updated with
/// second-pass gradients too.
pub fn dual_path_step(
    model: &mut LiftedViT,
    images: &Tensor,
    hyper: &DualHyper,
    counter: &mut PassCounter,
) -> Result<StepReport> {
    let (smooth, nonsmooth) = partition(&model.lifting);
    let all = model.lifting.ids();
    let first = evaluate(model, images, &hyper.objective, &all, true, counter)?;
    let Some(g1) = first.grads.clone() else {
        return Ok(StepReport::from_eval(first, true));
    };
    let smooth_pert = sam_perturbation(&collect(&g1, &smooth)?, hyper.rho_smooth)?;
    let smooth_pred = hyper.rho_pred > 0.0;

    let mut perturbed_ids = smooth.clone();
    let mut eps = smooth_pert.eps.clone();
    if smooth_pred {
        let p = sam_perturbation(&collect(&g1, &nonsmooth)?, hyper.rho_pred)?;
        perturbed_ids.extend_from_slice(&nonsmooth);
        eps.extend(p.eps);
    }
    let mut scratch = SamScratch::perturb(&mut model.lifting, &perturbed_ids, &eps)?;
    let second = evaluate(model, images, &hyper.objective, &perturbed_ids, true, counter);
    scratch.restore(&mut model.lifting, &perturbed_ids)?;
    let second = second?;

    let mut report = StepReport::from_eval(first, false);
    report.grad_norm = smooth_pert.grad_norm;
    report.eps_norm = smooth_pert.eps_norm;
    // The perturbed batch may have no reliable sample left; then the
    // perturbed gradient is zero.
    let g2 = second.grads.unwrap_or_else(|| {
        perturbed_ids
            .iter()
            .map(|&id| (id, Tensor::zeros(model.lifting.layers[id.layer].get(id.field).shape())))
            .collect()
    });
    let smooth_group = ParamGroup {
        kind: GroupKind::Smooth,
        params: smooth,
        lr: hyper.lr_smooth,
        rho: hyper.rho_smooth,
    };
    let nonsmooth_group = ParamGroup {
        kind: GroupKind::NonSmooth,
        params: nonsmooth,
        lr: hyper.lr_nonsmooth,
        rho: hyper.rho_pred,
    };
    sgd_step(&mut model.lifting, &smooth_group, &g2)?;
    if smooth_pred {
        sgd_step(&mut model.lifting, &nonsmooth_group, &g2)?;
    } else {
        sgd_step(&mut model.lifting, &nonsmooth_group, &g1)?;
    }
    Ok(report)
}

/// One forward/backward pass and plain gradient descent on `params` only.
pub fn single_path_step(
    model: &mut LiftedViT,
    images: &Tensor,
    params: &[ParamId],
    lr: f64,
    objective: &Objective,
    counter: &mut PassCounter,
) -> Result<StepReport> {
    let eval = evaluate(model, images, objective, params, true, counter)?;
    let Some(g) = eval.grads.clone() else {
        return Ok(StepReport::from_eval(eval, true));
    };
    let group = ParamGroup {
        kind: GroupKind::Smooth,
        params: params.to_vec(),
        lr,
        rho: 0.0,
    };
    sgd_step(&mut model.lifting, &group, &g)?;
    let mut report = StepReport::from_eval(eval, false);
    report.grad_norm = math::sqrt(g.values().map(Tensor::sq_norm).sum());
    Ok(report)
}

#[cfg(test)]
#[path = "optim_tests.rs"]
mod tests;
