use super::*;
use crate::gradcheck::finite_diff_check;
use alloc::vec::Vec;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut t = Tape::new();
    let eye = t.constant(Tensor::matrix(&[[1.0, 0.0], [0.0, 1.0]]));
    let m = t.constant(Tensor::matrix(&[[1.0, 2.0], [3.0, 4.0]]));
    let col = t.constant(Tensor::matrix(&[[5.0], [6.0]]));
    let p = t.matmul(eye, m).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let q = t.matmul(m, col).unwrap();
    assert_eq!(t.shape(q), &[2, 1]);
    assert_eq!(t.value(q).data(), &[17.0, 39.0]);
}

#[test]
fn matmul_inner_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 5]));
    match t.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, [2, 3]);
            assert_eq!(rhs, [4, 5]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_nt_matches_explicit_transpose() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::new(&[2, 2, 3], (0..12).map(f64::from).collect()).unwrap());
    let b = t.constant(Tensor::new(&[2, 4, 3], (0..24).map(|v| f64::from(v) * 0.5).collect()).unwrap());
    let nt = t.matmul_nt(a, b).unwrap();
    let bt = t.permute(b, &[0, 2, 1]).unwrap();
    let nn = t.matmul(a, bt).unwrap();
    assert_eq!(t.shape(nt), &[2, 2, 4]);
    assert!(t.value(nt).bit_eq(t.value(nn)));
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(&[1.0, 2.0]));
    let b = t.constant(Tensor::vector(&[3.0, 4.0]));
    let z = t.sub(a, a).unwrap();
    assert_eq!(t.value(z).data(), &[0.0, 0.0]);
    let p = t.mul(a, b).unwrap();
    assert_eq!(t.value(p).data(), &[3.0, 8.0]);

    let x = t.constant(Tensor::zeros(&[2, 3]));
    let y = t.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(t.add(x, y), Err(Error::Dimension { .. })));
}

#[test]
fn elementwise_broadcasts_trailing_suffix() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap());
    let bias = t.param(Tensor::vector(&[10.0, 20.0, 30.0]));
    let y = t.add(x, bias).unwrap();
    assert_eq!(t.value(y).data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(bias).data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn unary_fixed_points() {
    let mut t = Tape::new();
    let zero = t.constant(Tensor::vector(&[0.0]));
    let one = t.constant(Tensor::vector(&[1.0]));
    let e = t.exp(zero).unwrap();
    let l = t.log(one).unwrap();
    let g = t.gelu(zero).unwrap();
    assert_eq!(t.value(e).data(), &[1.0]);
    assert_eq!(t.value(l).data(), &[0.0]);
    assert_eq!(t.value(g).data(), &[0.0]);
}

#[test]
fn log_of_non_positive_reports_index() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(&[1.0, 2.0, -0.5, 0.0]));
    assert!(matches!(
        t.log(x),
        Err(Error::Domain { index: 2, .. })
    ));
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let u = t.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
    let s = t.softmax(u).unwrap();
    assert!(close(t.value(s).data(), &[1.0 / 3.0; 3], 1e-15));

    let x = t.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
    let s = t.softmax(x).unwrap();
    assert!(close(t.value(s).data(), &[0.09003, 0.24473, 0.66524], 1e-5));

    let big = t.constant(Tensor::vector(&[1000.0, 0.0]));
    let s = t.softmax(big).unwrap();
    assert!(close(t.value(s).data(), &[1.0, 0.0], 1e-300));

    let nan = t.constant(Tensor::vector(&[f64::NAN, 0.0]));
    assert!(matches!(t.softmax(nan), Err(Error::Numeric { .. })));
}

#[test]
fn log_softmax_agrees_with_log_of_softmax() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[2, 3], alloc::vec![0.3, -1.2, 2.0, 5.0, 5.0, -3.0]).unwrap());
    let ls = t.log_softmax(x).unwrap();
    let s = t.softmax(x).unwrap();
    let l = t.log(s).unwrap();
    assert!(close(t.value(ls).data(), t.value(l).data(), 1e-14));
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let ones = t.constant(Tensor::ones(&[3]));
    let zeros = t.constant(Tensor::zeros(&[3]));
    let x = t.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
    let y = t.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert!(close(t.value(y).data(), &[-1.22474, 0.0, 1.22474], 1e-4));

    let c = t.constant(Tensor::vector(&[5.0, 5.0, 5.0]));
    let y = t.layer_norm(c, ones, zeros, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

    let beta = t.constant(Tensor::vector(&[0.5, -1.0, 2.0]));
    let y = t.layer_norm(x, zeros, beta, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, -1.0, 2.0]);
}

#[test]
fn layer_norm_rejects_width_one() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(&[1.0]));
    let g = t.constant(Tensor::ones(&[1]));
    let b = t.constant(Tensor::zeros(&[1]));
    assert!(matches!(t.layer_norm(x, g, b, 1e-5), Err(Error::Numeric { .. })));
}

#[test]
fn reduce_examples() {
    let mut t = Tape::new();
    let v = t.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
    let s = t.sum(v).unwrap();
    assert_eq!(t.value(s).item().unwrap(), 6.0);
    let w = t.constant(Tensor::vector(&[2.0, 4.0]));
    let m = t.mean(w).unwrap();
    assert_eq!(t.value(m).item().unwrap(), 3.0);
    let mat = t.constant(Tensor::matrix(&[[1.0, 2.0], [3.0, 4.0]]));
    let c = t.sum_axis(mat, 0).unwrap();
    assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    let r = t.sum_axis(mat, 1).unwrap();
    assert_eq!(t.value(r).data(), &[3.0, 7.0]);
    assert!(matches!(t.sum_axis(mat, 2), Err(Error::Dimension { .. })));
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(&[1.0, 2.0, 3.0]));
    let unused = t.param(Tensor::vector(&[7.0, 7.0]));
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).data(), &[1.0, 1.0, 1.0]);
    assert_eq!(t.grad(unused).data(), &[0.0, 0.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::vector(&[1.0, 2.0]));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).data(), &[2.0, 4.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(&[1.0, 2.0]));
    let y = t.scale(x, 2.0).unwrap();
    assert!(matches!(t.backward(y), Err(Error::Contract(_))));
}

#[test]
fn backward_is_repeatable_bitwise() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[2, 3], alloc::vec![0.1, -0.4, 0.9, 1.3, -2.2, 0.05]).unwrap());
    let w = t.param(Tensor::new(&[3, 3], (0..9).map(|v| f64::from(v) * 0.1 - 0.4).collect()).unwrap());
    let h = t.matmul(x, w).unwrap();
    let s = t.softmax(h).unwrap();
    let l = t.log(s).unwrap();
    let root = t.sum(l).unwrap();
    t.backward(root).unwrap();
    let (g1, w1) = (t.grad(x), t.grad(w));
    t.backward(root).unwrap();
    assert!(g1.bit_eq(&t.grad(x)));
    assert!(w1.bit_eq(&t.grad(w)));
}

#[test]
fn multiple_uses_accumulate() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(&[3.0]));
    let a = t.scale(x, 2.0).unwrap();
    let b = t.add(a, x).unwrap();
    let s = t.sum(b).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).data(), &[3.0]);
}

#[test]
fn layout_ops_round_trip() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
    let p = t.permute(x, &[2, 0, 1]).unwrap();
    assert_eq!(t.shape(p), &[4, 2, 3]);
    // element (c, a, b) of p is x[a, b, c]
    assert_eq!(t.value(p).data()[1 * 6 + 1 * 3 + 2], 1.0 * 12.0 + 2.0 * 4.0 + 1.0);
    let back = t.permute(p, &[1, 2, 0]).unwrap();
    assert!(t.value(back).bit_eq(t.value(x)));

    let head = t.narrow(x, 1, 0, 1).unwrap();
    let tail = t.narrow(x, 1, 1, 2).unwrap();
    let joined = t.concat(&[head, tail], 1).unwrap();
    assert!(t.value(joined).bit_eq(t.value(x)));
    assert!(t.narrow(x, 1, 2, 2).is_err());
}

#[test]
fn finite_diff_examples() {
    let x = Tensor::vector(&[0.3, -1.1, 2.4, 0.7]);
    let sq = |t: &mut Tape, v: Var| {
        let p = t.mul(v, v)?;
        t.sum(p)
    };
    assert!(finite_diff_check(sq, &x, 1e-5).unwrap().max_rel_error < 1e-6);

    let constant = |t: &mut Tape, _v: Var| Ok(t.constant(Tensor::scalar(4.0)));
    assert_eq!(finite_diff_check(constant, &x, 1e-5).unwrap().max_rel_error, 0.0);

    let x = Tensor::new(&[2, 2], alloc::vec![0.2, -0.5, 1.0, 0.4]).unwrap();
    let w = Tensor::new(&[2, 3], alloc::vec![0.5, -1.0, 0.25, 1.5, 0.1, -0.7]).unwrap();
    let weights = Tensor::new(&[2, 3], alloc::vec![1.0, -2.0, 0.5, 0.3, 2.0, -1.0]).unwrap();
    let composed = |t: &mut Tape, v: Var| {
        let wv = t.constant(w.clone());
        let h = t.matmul(v, wv)?;
        let s = t.softmax(h)?;
        let c = t.constant(weights.clone());
        let m = t.mul(s, c)?;
        t.sum(m)
    };
    assert!(finite_diff_check(composed, &x, 1e-5).unwrap().max_rel_error < 1e-4);

    let non_scalar = |t: &mut Tape, v: Var| t.scale(v, 1.0);
    assert!(matches!(
        finite_diff_check(non_scalar, &x, 1e-5),
        Err(Error::Contract(_))
    ));
}

#[test]
fn cosine_matrix_examples_and_gradient() {
    let mut t = Tape::new();
    let orth = t.constant(Tensor::matrix(&[[1.0, 0.0], [0.0, 1.0]]));
    let m = t.cosine_matrix(orth, 1e-8).unwrap();
    assert!(close(t.value(m).data(), &[1.0, 0.0, 0.0, 1.0], 1e-7));
    let anti = t.constant(Tensor::matrix(&[[1.0, 0.0], [-1.0, 0.0]]));
    let m = t.cosine_matrix(anti, 1e-8).unwrap();
    assert!(close(t.value(m).data(), &[1.0, -1.0, -1.0, 1.0], 1e-7));

    let x = Tensor::new(&[3, 4], (0..12).map(|v| (f64::from(v) * 0.37).sin()).collect()).unwrap();
    let weights: Vec<f64> = (0..9).map(|v| (f64::from(v) * 1.3).cos()).collect();
    let f = |t: &mut Tape, v: Var| {
        let m = t.cosine_matrix(v, 1e-8)?;
        let w = t.constant(Tensor::new(&[3, 3], weights.clone())?);
        let p = t.mul(m, w)?;
        t.sum(p)
    };
    assert!(finite_diff_check(f, &x, 1e-5).unwrap().max_rel_error < 1e-5);
}

#[test]
fn cosine_matrix_zero_rows_have_finite_gradient() {
    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(&[3, 2]));
    let m = t.cosine_matrix(x, 1e-8).unwrap();
    assert!(t.value(m).data().iter().all(|&v| v == 0.0));
    let s = t.sum(m).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(x).data().iter().all(|v| v.is_finite()));
}
