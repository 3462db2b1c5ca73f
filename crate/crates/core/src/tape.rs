//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and the
//! operands it was computed from. Because operands are always created
//! before their consumers, the node order is a topological order and the
//! backward sweep is a single reverse pass over the tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    /// Tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
    Negate,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Binary {
        a: Var,
        b: Var,
        op: BinaryOp,
    },
    Unary {
        a: Var,
        op: UnaryOp,
        /// Pointwise derivative, recorded for ops that are costly to redo.
        deriv: Vec<f64>,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reduce {
        a: Var,
        op: ReduceOp,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Narrow {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        take: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
    },
    BroadcastTo {
        a: Var,
    },
    CosineMatrix {
        a: Var,
        eps: f64,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of primitive applications, replayed in reverse by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major `C = A·B (+ beta·C)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the strides above address only elements inside `a` and `b`,
    // and `c` holds at least m*n contiguous row-major elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is populated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product.
    ///
    /// `a: [.., m, k]` against `b: [k, n]` treats every leading axis of `a`
    /// as extra rows (the shape of a linear layer). With `b: [batch, k, n]`,
    /// `a` must be `[batch, m, k]` and the product is taken per batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, "matmul")
    }

    /// `a · bᵀ` over the last two axes (`b: [k-major rows]`, i.e. `[.., n, k]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, "matmul_nt")
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool, name: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::dim(name, &sa, &sb);
        if sa.len() < 2 || !(sb.len() == 2 || sb.len() == 3) {
            return Err(bad());
        }
        let k = sa[sa.len() - 1];
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(bad());
        }
        let (batch, m, out_shape) = if sb.len() == 2 {
            let m = sa.iter().product::<usize>() / k;
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(n);
            (1, m, out)
        } else {
            if sa.len() != 3 || sa[0] != sb[0] {
                return Err(bad());
            }
            (sa[0], sa[1], vec![sa[0], sa[1], n])
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[bi * m * k..(bi + 1) * m * k],
                k,
                1,
                &bv[bi * k * n..(bi + 1) * k * n],
                rsb,
                csb,
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- pointwise

    /// Pointwise binary op. `b` may have the shape of a trailing suffix of
    /// `a`'s shape, in which case it is tiled over the leading axes.
    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !is_suffix(sb, sa) {
            return Err(Error::dim("elementwise", sa, sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = av.to_vec();
        if !bv.is_empty() {
            for row in out.chunks_exact_mut(bv.len()) {
                match op {
                    BinaryOp::Add => row.iter_mut().zip(bv).for_each(|(x, y)| *x += y),
                    BinaryOp::Sub => row.iter_mut().zip(bv).for_each(|(x, y)| *x -= y),
                    BinaryOp::Mul => row.iter_mut().zip(bv).for_each(|(x, y)| *x *= y),
                }
            }
        }
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Binary { a, b, op }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn unary(&mut self, a: Var, op: UnaryOp) -> Result<Var> {
        let x = self.value(a);
        let mut deriv = Vec::new();
        let out = match op {
            UnaryOp::Exp => x.map(math::exp),
            UnaryOp::Log => {
                if let Some((index, &value)) =
                    x.data().iter().enumerate().find(|(_, &v)| !(v > 0.0))
                {
                    return Err(Error::Domain {
                        op: "log",
                        index,
                        value,
                    });
                }
                x.map(math::ln)
            }
            UnaryOp::Gelu => {
                let mut out = x.clone();
                deriv.reserve_exact(x.numel());
                for v in out.data_mut() {
                    let u = *v;
                    let t = math::tanh(GELU_C * (u + GELU_K * u * u * u));
                    deriv.push(0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u));
                    *v = 0.5 * u * (1.0 + t);
                }
                out
            }
            UnaryOp::Negate => x.map(|v| -v),
            UnaryOp::Scale(c) => x.map(|v| c * v),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Unary { a, op, deriv }, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Log)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Gelu)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Negate)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, UnaryOp::Scale(c))
    }

    // ---------------------------------------------------------------- row-wise

    fn rows_of(&self, a: Var, op: &'static str) -> Result<usize> {
        let x = self.value(a);
        if x.rank() == 0 {
            return Err(Error::dim(op, x.shape(), &[]));
        }
        if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op,
                detail: alloc::format!("non-finite input {} at index {i}", x.data()[i]),
            });
        }
        Ok(*x.shape().last().unwrap())
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.rows_of(a, "softmax")?;
        let x = self.value(a);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = math::exp(*v - max);
                sum += *v;
            }
            let inv = 1.0 / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax { a }, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.rows_of(a, "log_softmax")?;
        let x = self.value(a);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax { a }, rg))
    }

    /// Layer normalization over the last axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::dim("layer_norm", &sx, &[]))?;
        if d < 2 {
            return Err(Error::Numeric {
                op: "layer_norm",
                detail: "normalizing a width-1 axis yields 0/0 as eps -> 0".into(),
            });
        }
        if !(eps > 0.0) {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", &sx, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / math::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- reductions

    /// Sum or mean over one axis (removing it), or over everything to a scalar.
    pub fn reduce(&mut self, a: Var, op: ReduceOp, axis: Option<usize>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, sa.iter().product(), 1, Vec::new()),
            Some(ax) if ax < sa.len() => {
                let (o, l, i) = split_axis(&sa, ax);
                let mut s = sa.clone();
                s.remove(ax);
                (o, l, i, s)
            }
            Some(ax) => return Err(Error::dim("reduce", &sa, &[ax])),
        };
        let av = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &av[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        if op == ReduceOp::Mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Reduce {
                a,
                op,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, ReduceOp::Sum, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, ReduceOp::Mean, None)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, ReduceOp::Sum, Some(axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, ReduceOp::Mean, Some(axis))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", &sa, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let mut out = vec![0.0; self.value(a).numel()];
        let av = self.value(a).data();
        for_each_permuted(&sa, perm, |dst, src| out[dst] = av[src]);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Slice `start..start + take` of one axis.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, take: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || take == 0 || start + take > sa[axis] {
            return Err(Error::dim("narrow", &sa, &[axis, start, take]));
        }
        let (outer, len, inner) = split_axis(&sa, axis);
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(outer * take * inner);
        for o in 0..outer {
            out.extend_from_slice(&av[(o * len + start) * inner..(o * len + start + take) * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = take;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Narrow {
                a,
                outer,
                len,
                inner,
                start,
                take,
            },
            rg,
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Tiles `a` over new leading axes so that it has `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if !is_suffix(sa, shape) {
            return Err(Error::dim("broadcast_to", sa, shape));
        }
        let src = self.value(a).data();
        let reps = shape.iter().product::<usize>() / src.len();
        let mut out = Vec::with_capacity(reps * src.len());
        for _ in 0..reps {
            out.extend_from_slice(src);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::BroadcastTo { a }, rg))
    }

    // ---------------------------------------------------------------- similarity

    /// Pairwise cosine similarity of the rows of `a: [B, d]`:
    /// `M[j,k] = <a_j, a_k> / (|a_j| |a_k| + eps)`.
    ///
    /// A zero row contributes a zero row and column; its norm is treated
    /// as locally constant in the backward pass.
    pub fn cosine_matrix(&mut self, a: Var, eps: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::dim("cosine_matrix", &sa, &[]));
        }
        let (b, d) = (sa[0], sa[1]);
        let av = self.value(a).data();
        let norms: Vec<f64> = av
            .chunks(d)
            .map(|r| math::sqrt(r.iter().map(|v| v * v).sum()))
            .collect();
        let mut out = vec![0.0; b * b];
        gemm(b, d, b, av, d, 1, av, 1, d, 0.0, &mut out);
        for j in 0..b {
            for k in 0..b {
                out[j * b + k] /= norms[j] * norms[k] + eps;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![b, b], out), Op::CosineMatrix { a, eps, norms }, rg))
    }

    // ---------------------------------------------------------------- backward

    /// Populates gradients of the scalar `root` with respect to every leaf
    /// that requires them. Interior gradients are freed as the sweep passes.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(alloc::format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Gradient buffer for an operand, or None when it takes no gradient.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| nodes[v.0].value.data();
        let y = node.value.data();

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (val(a), val(b));
                if let Some(da) = buf!(a) {
                    // dA = G · op(B)ᵀ
                    let (rs, cs) = if trans_b { (k, 1) } else { (1, n) };
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            n,
                            1,
                            &bv[bi * k * n..(bi + 1) * k * n],
                            rs,
                            cs,
                            1.0,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if let Some(db) = buf!(b) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let asl = &av[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut db[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            // dB = Gᵀ · A, shape [n, k]
                            gemm(n, m, k, gs, 1, n, asl, k, 1, 1.0, dst);
                        } else {
                            // dB = Aᵀ · G, shape [k, n]
                            gemm(k, m, n, asl, 1, k, gs, n, 1, 1.0, dst);
                        }
                    }
                }
            }
            &Op::Binary { a, b, op } => {
                let (av, bv) = (val(a), val(b));
                let nb = bv.len().max(1);
                if let Some(da) = buf!(a) {
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => {
                            da.iter_mut().zip(g).for_each(|(d, g)| *d += g)
                        }
                        BinaryOp::Mul => {
                            for (dr, gr) in da.chunks_exact_mut(nb).zip(g.chunks_exact(nb)) {
                                for ((d, g), b) in dr.iter_mut().zip(gr).zip(bv) {
                                    *d += g * b;
                                }
                            }
                        }
                    }
                }
                if let Some(db) = buf!(b) {
                    for (gr, ar) in g.chunks_exact(nb).zip(av.chunks_exact(nb)) {
                        match op {
                            BinaryOp::Add => db.iter_mut().zip(gr).for_each(|(d, g)| *d += g),
                            BinaryOp::Sub => db.iter_mut().zip(gr).for_each(|(d, g)| *d -= g),
                            BinaryOp::Mul => {
                                for ((d, g), a) in db.iter_mut().zip(gr).zip(ar) {
                                    *d += g * a;
                                }
                            }
                        }
                    }
                }
            }
            Op::Unary { a, op, deriv } => {
                let x = val(*a);
                if let Some(da) = buf!(*a) {
                    let it = da.iter_mut().zip(g);
                    match *op {
                        UnaryOp::Exp => it.zip(y).for_each(|((d, g), y)| *d += g * y),
                        UnaryOp::Log => it.zip(x).for_each(|((d, g), x)| *d += g / x),
                        UnaryOp::Gelu => it.zip(deriv).for_each(|((d, g), s)| *d += g * s),
                        UnaryOp::Negate => it.for_each(|(d, g)| *d -= g),
                        UnaryOp::Scale(c) => it.for_each(|(d, g)| *d += c * g),
                    }
                }
            }
            &Op::Softmax { a } => {
                if let Some(da) = buf!(a) {
                    let n = *node.value.shape().last().unwrap();
                    for ((d, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for j in 0..n {
                            d[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { a } => {
                if let Some(da) = buf!(a) {
                    let n = *node.value.shape().last().unwrap();
                    for ((d, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            d[j] += gr[j] - math::exp(yr[j]) * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = val(*gamma).len();
                let gm = val(*gamma);
                if let Some(dg) = buf!(*gamma) {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((o, g), h) in dg.iter_mut().zip(gr).zip(hr) {
                            *o += g * h;
                        }
                    }
                }
                if let Some(db) = buf!(*beta) {
                    for gr in g.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(o, g)| *o += g);
                    }
                }
                if let Some(dx) = buf!(*x) {
                    let mut dh = vec![0.0; d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = gr[j] * gm[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += is * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Reduce {
                a,
                op,
                outer,
                len,
                inner,
            } => {
                if let Some(da) = buf!(a) {
                    let s = if op == ReduceOp::Mean { 1.0 / len as f64 } else { 1.0 };
                    if len == 0 {
                    } else if inner == 1 {
                        for (dr, gi) in da.chunks_exact_mut(len).zip(g) {
                            let v = s * gi;
                            dr.iter_mut().for_each(|d| *d += v);
                        }
                    } else {
                        for o in 0..outer {
                            let gr = &g[o * inner..(o + 1) * inner];
                            for dst in da[o * len * inner..(o + 1) * len * inner].chunks_exact_mut(inner) {
                                for (d, gi) in dst.iter_mut().zip(gr) {
                                    *d += s * gi;
                                }
                            }
                        }
                    }
                }
            }
            &Op::Reshape { a } | &Op::BroadcastTo { a } => {
                if let Some(da) = buf!(a) {
                    let n = da.len().max(1);
                    for gr in g.chunks_exact(n) {
                        da.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Permute { a, perm } => {
                let sa = nodes[a.0].value.shape().to_vec();
                if let Some(da) = buf!(*a) {
                    for_each_permuted(&sa, perm, |dst, src| da[src] += g[dst]);
                }
            }
            &Op::Narrow {
                a,
                outer,
                len,
                inner,
                start,
                take,
            } => {
                if let Some(da) = buf!(a) {
                    for o in 0..outer {
                        let dst = &mut da[(o * len + start) * inner..(o * len + start + take) * inner];
                        let src = &g[o * take * inner..(o + 1) * take * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = g.len() / (outer * inner);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel() / (outer * inner);
                    if let Some(dp) = buf!(p) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut dp[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::CosineMatrix { a, eps, norms } => {
                let x = val(*a);
                let b = norms.len();
                let d = x.len() / b;
                if let Some(da) = buf!(*a) {
                    // M = G / D with G = x xᵀ and D = n nᵀ + eps.
                    let mut sym_a = vec![0.0; b * b];
                    let mut dn = vec![0.0; b];
                    for j in 0..b {
                        for k in 0..b {
                            let den = norms[j] * norms[k] + eps;
                            let u = g[j * b + k];
                            sym_a[j * b + k] += u / den;
                            sym_a[k * b + j] += u / den;
                            let bm = -u * y[j * b + k] / den;
                            dn[j] += bm * norms[k];
                            dn[k] += bm * norms[j];
                        }
                    }
                    gemm(b, b, d, &sym_a, b, 1, x, d, 1, 1.0, da);
                    for j in 0..b {
                        if norms[j] > 0.0 {
                            let s = dn[j] / norms[j];
                            for c in 0..d {
                                da[j * d + c] += s * x[j * d + c];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Gradient of the last [`Tape::backward`] root with respect to the leaf `v`.
    /// Nodes the root does not depend on, and interior nodes, get zeros.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
}

/// Calls `f(out_index, in_index)` for every element of a permutation of
/// an array with shape `in_shape`.
fn for_each_permuted(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = in_shape.iter().product();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let mut dst = 0usize;
    while dst < total {
        for _ in 0..out_shape[last] {
            f(dst, src);
            dst += 1;
            src += strides[last];
        }
        src -= strides[last] * out_shape[last];
        // carry into the higher axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
#[path = "tape_tests.rs"]
mod tests;
