//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `backward()` of the scalar `f(x)` against central differences
/// with step `h`, entrywise, using the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` records its computation on the provided tape, starting from the
/// variable bound to `x`, and returns the scalar output.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let root = f(&mut tape, xv)?;
    tape.backward(root)?;
    let analytic = tape.grad(xv);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe.clone());
        let out = f(&mut t, v)?;
        t.value(out).item()
    };

    let mut probe = x.clone();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = math::abs(a).max(math::abs(numeric)).max(1e-8);
        let rel = math::abs(a - numeric) / denom;
        if rel > worst.max_rel_error || i == 0 {
            worst = GradCheck {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(worst)
}
