use dpal_core::data::{corrupt, generate_shapes, Corruption, CorruptionFamily, Split};
use dpal_core::losses::{reliable_entropy_value, similarity_matrix};
use dpal_core::optim::sam_perturbation;
use dpal_core::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

fn family() -> impl Strategy<Value = CorruptionFamily> {
    prop::sample::select(CorruptionFamily::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(4, 7)) {
        let mut t = Tape::new();
        let v = t.constant(x);
        let s = t.softmax(v).unwrap();
        for row in t.value(s).data().chunks(7) {
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_has_the_requested_norm(
        g in prop::collection::vec(-3.0f64..3.0, 1..20),
        rho in 0.0f64..1.0,
    ) {
        let t = Tensor::vector(&g);
        let p = sam_perturbation(&[&t], rho).unwrap();
        if t.sq_norm().sqrt() >= 1e-12 {
            prop_assert!((p.eps_norm - rho).abs() < 1e-12);
            prop_assert!((p.eps[0].sq_norm().sqrt() - rho).abs() < 1e-12);
        } else {
            prop_assert_eq!(p.eps_norm, 0.0);
        }
    }

    #[test]
    fn similarity_is_bounded_and_scale_free(x in matrix(5, 6), c in 0.1f64..10.0) {
        let mut t = Tape::new();
        let a = t.constant(x.clone());
        let m = similarity_matrix(&mut t, a).unwrap();
        let b = t.constant(x.map(|v| c * v));
        let mc = similarity_matrix(&mut t, b).unwrap();
        let (m, mc) = (t.value(m).data().to_vec(), t.value(mc).data().to_vec());
        for (p, q) in m.iter().zip(&mc) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(p));
            prop_assert!((p - q).abs() < 1e-6);
        }
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        prop_assert!((-1.0..=1.0).contains(&-mean));
    }

    #[test]
    fn entropy_mask_weight_is_a_fraction(
        e in prop::collection::vec(0.0f64..3.0, 1..40),
        e0 in 0.01f64..3.0,
    ) {
        let (loss, mask) = reliable_entropy_value(&e, e0).unwrap();
        let lambda = mask.lambda();
        prop_assert!((0.0..=1.0).contains(&lambda));
        prop_assert_eq!(lambda, mask.count() as f64 / e.len() as f64);
        prop_assert!(loss >= 0.0 && loss <= e0 * lambda + 1e-12);
    }

    #[test]
    fn corruptions_stay_in_range(f in family(), severity in 0u8..=5, seed in any::<u64>()) {
        let d = generate_shapes(8, Split::Test, seed % 1000).unwrap();
        let c = Corruption::new(f, severity, seed).unwrap();
        let out = corrupt(&d.images, &c).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(out.shape(), d.images.shape());
        if severity == 0 {
            prop_assert!(out.bit_eq(&d.images));
        }
        prop_assert!(corrupt(&d.images, &c).unwrap().bit_eq(&out));
    }
}
