//! Synthetic checks of the first-order gap between smooth and non-smooth
//! update directions and of the L-smooth suboptimality bound.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math;
use crate::optim::{sam_step, sgd_step, GroupKind, Gradients, ParamGroup};
use crate::tensor::Tensor;

/// Points where the two update directions differ by less than this angle
/// (radians) are excluded from the suboptimality bound.
pub const MIN_BOUND_ANGLE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FunctionKind {
    Quadratic,
    DoubleWell,
    Custom,
}

type ValueFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A differentiable function with its exact gradient.
pub struct TestFunction {
    kind: FunctionKind,
    dim: usize,
    value: ValueFn,
    gradient: GradFn,
    smoothness: Option<f64>,
    optimum: Option<(Vec<f64>, f64)>,
    concave: bool,
}

impl core::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("TestFunction")
            .field("kind", &self.kind)
            .field("dim", &self.dim)
            .field("smoothness", &self.smoothness)
            .field("concave", &self.concave)
            .finish()
    }
}

fn psd_spectrum(a: &DMatrix<f64>) -> Result<(f64, f64)> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(Error::contract("quadratic form must be a non-empty square matrix"));
    }
    let scale = a.iter().fold(1.0f64, |m, v| m.max(math::abs(*v)));
    if (a - a.transpose()).iter().any(|v| math::abs(*v) > 1e-12 * scale) {
        return Err(Error::contract("quadratic form must be symmetric"));
    }
    let eig = SymmetricEigen::new(a.clone()).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if min < -1e-10 * max.max(1.0) {
        return Err(Error::contract("quadratic form is not positive semi-definite"));
    }
    Ok((min, max))
}

impl TestFunction {
    fn quadratic_impl(a: DMatrix<f64>, center: Vec<f64>, offset: f64, sign: f64) -> Result<Self> {
        let (_, lmax) = psd_spectrum(&a)?;
        if center.len() != a.nrows() {
            return Err(Error::dim("quadratic", &[a.nrows()], &[center.len()]));
        }
        let dim = center.len();
        let a2 = a.clone();
        let c = DVector::from_vec(center.clone());
        let c2 = c.clone();
        Ok(Self {
            kind: FunctionKind::Quadratic,
            dim,
            value: Box::new(move |w| {
                let r = DVector::from_column_slice(w) - &c;
                sign * 0.5 * r.dot(&(&a * &r)) + offset
            }),
            gradient: Box::new(move |w| {
                let r = DVector::from_column_slice(w) - &c2;
                (&a2 * r * sign).data.into()
            }),
            smoothness: Some(lmax.max(0.0)),
            optimum: Some((center, offset)),
            concave: sign < 0.0,
        })
    }

    /// `f(w) = ½(w−c)ᵀA(w−c) + f*` for PSD `A`.
    pub fn quadratic(a: DMatrix<f64>, center: Vec<f64>, min_value: f64) -> Result<Self> {
        Self::quadratic_impl(a, center, min_value, 1.0)
    }

    /// `S(w) = S* − ½(w−c)ᵀA(w−c)` for PSD `A`, maximized at `c`.
    pub fn concave_quadratic(a: DMatrix<f64>, center: Vec<f64>, max_value: f64) -> Result<Self> {
        Self::quadratic_impl(a, center, max_value, -1.0)
    }

    /// `min(50(θ−1)², (θ+1)²)`, smoothed by a soft minimum of temperature
    /// `tau`; `tau = 0` is the exact minimum with the active branch's slope.
    pub fn double_well(tau: f64) -> Result<Self> {
        if !(tau >= 0.0) {
            return Err(Error::contract("soft-min temperature must be non-negative"));
        }
        let branches = |t: f64| (50.0 * (t - 1.0) * (t - 1.0), (t + 1.0) * (t + 1.0), 100.0 * (t - 1.0), 2.0 * (t + 1.0));
        let weight = move |f1: f64, f2: f64| -> f64 {
            // weight of the sharp branch
            if tau == 0.0 {
                if f1 <= f2 {
                    1.0
                } else {
                    0.0
                }
            } else {
                1.0 / (1.0 + math::exp((f1 - f2) / tau))
            }
        };
        Ok(Self {
            kind: FunctionKind::DoubleWell,
            dim: 1,
            value: Box::new(move |w| {
                let (f1, f2, _, _) = branches(w[0]);
                let lo = f1.min(f2);
                if tau == 0.0 {
                    lo
                } else {
                    let hi = f1.max(f2);
                    lo - tau * math::ln(1.0 + math::exp(-(hi - lo) / tau))
                }
            }),
            gradient: Box::new(move |w| {
                let (f1, f2, g1, g2) = branches(w[0]);
                let s = weight(f1, f2);
                vec![s * g1 + (1.0 - s) * g2]
            }),
            smoothness: None,
            optimum: None,
            concave: false,
        })
    }

    pub fn custom(
        dim: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        smoothness: Option<f64>,
    ) -> Self {
        Self {
            kind: FunctionKind::Custom,
            dim,
            value: Box::new(value),
            gradient: Box::new(gradient),
            smoothness,
            optimum: None,
            concave: false,
        }
    }

    pub fn kind(&self) -> FunctionKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Lipschitz constant of the gradient, when known.
    pub fn smoothness(&self) -> Option<f64> {
        self.smoothness
    }

    /// Optimizer and optimal value, when known.
    pub fn optimum(&self) -> Option<(&[f64], f64)> {
        self.optimum.as_ref().map(|(w, v)| (w.as_slice(), *v))
    }

    pub fn is_concave(&self) -> bool {
        self.concave
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        (self.value)(w)
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        (self.gradient)(w)
    }

    /// Largest absolute gap between the exact gradient and central differences.
    pub fn gradient_error(&self, w: &[f64], h: f64) -> f64 {
        let g = self.gradient(w);
        let mut probe = w.to_vec();
        let mut worst = 0.0f64;
        for i in 0..w.len() {
            probe[i] = w[i] + h;
            let up = self.value(&probe);
            probe[i] = w[i] - h;
            let down = self.value(&probe);
            probe[i] = w[i];
            worst = worst.max(math::abs((up - down) / (2.0 * h) - g[i]));
        }
        worst
    }

    fn check_point(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim {
            return Err(Error::dim("test function", &[self.dim], &[w.len()]));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    math::sqrt(v.iter().map(|x| x * x).sum())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(w: &[f64], eta: f64, v: &[f64]) -> Vec<f64> {
    w.iter().zip(v).map(|(a, b)| a + eta * b).collect()
}

fn unit_gradient(f: &TestFunction, w: &[f64], op: &'static str) -> Result<(Vec<f64>, f64)> {
    let g = f.gradient(w);
    let n = norm(&g);
    if !(n >= 1e-12) {
        return Err(Error::Degenerate {
            op,
            detail: alloc::format!("gradient norm {n:e}"),
        });
    }
    Ok((g.iter().map(|x| x / n).collect(), n))
}

/// Measured and first-order predicted value gap between stepping along the
/// normalized gradient and along `v2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapResult {
    pub measured: f64,
    pub predicted: f64,
    /// Angle between the gradient and `v2`, radians.
    pub beta: f64,
}

impl GapResult {
    pub fn relative_error(&self) -> f64 {
        math::abs(self.measured - self.predicted) / math::abs(self.predicted).max(1e-12)
    }
}

pub fn gradient_gap(f: &TestFunction, phi: &[f64], v2: &[f64], eta: f64) -> Result<GapResult> {
    f.check_point(phi)?;
    f.check_point(v2)?;
    if math::abs(norm(v2) - 1.0) > 1e-9 {
        return Err(Error::contract("direction must have unit norm"));
    }
    if !(eta > 0.0) {
        return Err(Error::contract("step must be positive"));
    }
    let (v1, gnorm) = unit_gradient(f, phi, "gradient_gap")?;
    let cos = dot(&v1, v2).clamp(-1.0, 1.0);
    let measured = f.value(&axpy(phi, eta, &v1)) - f.value(&axpy(phi, eta, v2));
    Ok(GapResult {
        measured,
        predicted: eta * gnorm * (1.0 - cos),
        beta: math::acos(cos),
    })
}

fn quadratic_facts(f: &TestFunction) -> Result<(f64, &[f64], f64)> {
    match (f.kind, f.smoothness, f.optimum()) {
        (FunctionKind::Quadratic, Some(l), Some((w, v))) => Ok((l, w, v)),
        _ => Err(Error::contract("bound checks need a quadratic test function")),
    }
}

/// Counts points where `‖∇f‖²/(2L)` exceeds the optimality gap by more than `1e-12`.
pub fn lsmooth_bound_check(f: &TestFunction, points: &[Vec<f64>]) -> Result<usize> {
    let (l, _, best) = quadratic_facts(f)?;
    let mut violations = 0;
    for w in points {
        f.check_point(w)?;
        let g = f.gradient(w);
        let lhs = if l > 0.0 { dot(&g, &g) / (2.0 * l) } else { 0.0 };
        let v = f.value(w);
        let gap = if f.concave { best - v } else { v - best };
        if lhs > gap + 1e-12 {
            violations += 1;
        }
    }
    Ok(violations)
}

/// Both sides of the squared-gap bound at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundTrial {
    pub lhs: f64,
    pub rhs: f64,
    /// Allowance for the neglected higher-order terms, `10·L·η³`.
    pub slack: f64,
    pub beta: f64,
    /// True when the directions nearly coincide and the bound is not tested.
    pub excluded: bool,
}

impl BoundTrial {
    pub fn holds(&self) -> bool {
        self.excluded || self.lhs <= self.rhs + self.slack
    }
}

/// Compares the plain ascent direction at `Φ` with the ascent direction
/// taken at the sharpness-aware point `Φ + ρ·∇S/‖∇S‖`.
pub fn suboptimality_bound_check(f: &TestFunction, phi: &[f64], eta: f64, rho: f64) -> Result<BoundTrial> {
    let (l, _, best) = quadratic_facts(f)?;
    if !f.concave {
        return Err(Error::contract("the suboptimality bound is stated for a concave objective"));
    }
    f.check_point(phi)?;
    let (v1, _) = unit_gradient(f, phi, "suboptimality_bound_check")?;
    let shifted = axpy(phi, rho, &v1);
    let (v2, _) = unit_gradient(f, &shifted, "suboptimality_bound_check")?;
    let cos = dot(&v1, &v2).clamp(-1.0, 1.0);
    let beta = math::acos(cos);
    let diff = f.value(&axpy(phi, eta, &v1)) - f.value(&axpy(phi, eta, &v2));
    let one_minus = 1.0 - cos;
    Ok(BoundTrial {
        lhs: diff * diff,
        rhs: 2.0 * l * eta * eta * one_minus * one_minus * (best - f.value(phi)),
        slack: 10.0 * l * eta * eta * eta,
        beta,
        excluded: beta < MIN_BOUND_ANGLE,
    })
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_rotation(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_vec(n, n, normal_vec(rng, n * n));
    m.qr().q()
}

/// Quadratic form with eigenvalues drawn uniformly from `[lo, hi]`.
fn conditioned_form(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let q = random_rotation(rng, n);
    let d = DVector::from_iterator(n, (0..n).map(|_| rng.random_range(lo..hi)));
    let a = &q * DMatrix::from_diagonal(&d) * q.transpose();
    (&a + a.transpose()) * 0.5
}

/// Worst relative error over a battery of [`gradient_gap`] trials.
#[derive(Clone, Debug, PartialEq)]
pub struct GapBattery {
    pub results: Vec<GapResult>,
    pub max_rel_error: f64,
}

/// Concave quadratics of dimension 2–5 with eigenvalues in `[0.1, 5]`,
/// points with gradient norm at least 1 and directions at 30°–180° from the gradient.
pub fn gradient_gap_battery(trials: usize, eta: f64, seed: u64) -> Result<GapBattery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::with_capacity(trials);
    let mut max_rel_error = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(2..=5);
        let a = conditioned_form(&mut rng, n, 0.1, 5.0);
        let center = normal_vec(&mut rng, n);
        let f = TestFunction::concave_quadratic(a, center.clone(), 0.0)?;
        let mut offset = normal_vec(&mut rng, n);
        let mut phi = axpy(&center, 1.0, &offset);
        let gn = norm(&f.gradient(&phi));
        if gn < 1.0 {
            let s = 1.0 / gn.max(1e-6) * rng.random_range(1.0..3.0);
            offset.iter_mut().for_each(|v| *v *= s);
            phi = axpy(&center, 1.0, &offset);
        }
        let (v1, _) = unit_gradient(&f, &phi, "gradient_gap_battery")?;
        // unit vector orthogonal to v1
        let r = normal_vec(&mut rng, n);
        let proj = dot(&r, &v1);
        let u = axpy(&r, -proj, &v1);
        let un = norm(&u);
        let u: Vec<f64> = u.iter().map(|x| x / un).collect();
        let beta = rng.random_range(30.0f64..=180.0).to_radians();
        let v2: Vec<f64> = v1
            .iter()
            .zip(&u)
            .map(|(a, b)| math::cos(beta) * a + math::sin(beta) * b)
            .collect();
        let v2n = norm(&v2);
        let v2: Vec<f64> = v2.iter().map(|x| x / v2n).collect();
        let res = gradient_gap(&f, &phi, &v2, eta)?;
        max_rel_error = max_rel_error.max(res.relative_error());
        results.push(res);
    }
    Ok(GapBattery {
        results,
        max_rel_error,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LSmoothBattery {
    pub functions: usize,
    pub points: usize,
    pub violations: usize,
}

/// Random PSD quadratics `A = BᵀB` (dimension 2–6, possibly ill-conditioned)
/// checked at normally distributed points.
pub fn lsmooth_battery(functions: usize, points: usize, seed: u64) -> Result<LSmoothBattery> {
    lsmooth_battery_scaled(functions, points, seed, 1.0)
}

/// As [`lsmooth_battery`], but every function claims `l_scale` times its true
/// smoothness constant.
pub fn lsmooth_battery_scaled(functions: usize, points: usize, seed: u64, l_scale: f64) -> Result<LSmoothBattery> {
    if !(l_scale > 0.0) {
        return Err(Error::contract("smoothness scale must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..functions {
        let n = rng.random_range(2..=6);
        let b = DMatrix::from_vec(n, n, normal_vec(&mut rng, n * n));
        let a = b.transpose() * &b;
        let a = (&a + a.transpose()) * 0.5;
        let center = normal_vec(&mut rng, n);
        let mut f = TestFunction::quadratic(a, center, rng.random_range(-1.0..1.0))?;
        f.smoothness = f.smoothness.map(|l| l * l_scale);
        let pts: Vec<Vec<f64>> = (0..points)
            .map(|_| normal_vec(&mut rng, n).iter().map(|v| 2.0 * v).collect())
            .collect();
        violations += lsmooth_bound_check(&f, &pts)?;
    }
    Ok(LSmoothBattery {
        functions,
        points: functions * points,
        violations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundBattery {
    pub trials: Vec<BoundTrial>,
    pub excluded: usize,
    pub violations: usize,
}

/// The bound on `S = −½ΦᵀAΦ`, `A = diag(1, 20)`, at normally distributed points.
pub fn suboptimality_battery(trials: usize, eta: f64, rho: f64, seed: u64) -> Result<BoundBattery> {
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 20.0]));
    let f = TestFunction::concave_quadratic(a, vec![0.0, 0.0], 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let phi = normal_vec(&mut rng, 2);
        out.push(suboptimality_bound_check(&f, &phi, eta, rho)?);
    }
    let excluded = out.iter().filter(|t| t.excluded).count();
    let violations = out.iter().filter(|t| !t.holds()).count();
    Ok(BoundBattery {
        trials: out,
        excluded,
        violations,
    })
}

/// Final iterates of SGD and SAM on the double well.
#[derive(Clone, Debug, PartialEq)]
pub struct DoubleWellReport {
    pub starts: Vec<f64>,
    pub sgd_final: Vec<f64>,
    pub sam_final: Vec<f64>,
}

impl DoubleWellReport {
    /// Fraction of SAM runs ending within `0.2` of the flat minimum at `−1`.
    pub fn sam_flat_fraction(&self) -> f64 {
        fraction(&self.sam_final, -1.0)
    }

    /// Fraction of SGD runs ending within `0.2` of the sharp minimum at `1`.
    pub fn sgd_sharp_fraction(&self) -> f64 {
        fraction(&self.sgd_final, 1.0)
    }
}

fn fraction(xs: &[f64], target: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().filter(|&&x| math::abs(x - target) < 0.2).count() as f64 / xs.len() as f64
}

/// Runs SGD and SAM from `runs` seeded starts in `[0.5, 1.5]`.
pub fn double_well_battery(runs: usize, steps: usize, eta: f64, rho: f64, tau: f64, seed: u64) -> Result<DoubleWellReport> {
    let f = TestFunction::double_well(tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<f64> = (0..runs).map(|_| rng.random_range(0.5..=1.5)).collect();
    let group = ParamGroup {
        kind: GroupKind::Smooth,
        params: vec![0usize],
        lr: eta,
        rho,
    };
    let grad = |s: &Vec<Tensor>| -> Result<Gradients<usize>> {
        let mut g = Gradients::new();
        g.insert(0, Tensor::vector(&f.gradient(s[0].data())));
        Ok(g)
    };
    let mut sgd_final = Vec::with_capacity(runs);
    let mut sam_final = Vec::with_capacity(runs);
    for &x0 in &starts {
        let mut plain = vec![Tensor::vector(&[x0])];
        let mut sharp = plain.clone();
        for _ in 0..steps {
            let g = grad(&plain)?;
            sgd_step(&mut plain, &group, &g)?;
            sam_step(&mut sharp, &group, grad)?;
        }
        sgd_final.push(plain[0].data()[0]);
        sam_final.push(sharp[0].data()[0]);
    }
    Ok(DoubleWellReport {
        starts,
        sgd_final,
        sam_final,
    })
}

#[cfg(test)]
#[path = "smoothness_tests.rs"]
mod tests;
