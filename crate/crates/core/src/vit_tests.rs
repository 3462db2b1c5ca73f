use super::*;
use crate::gradcheck::finite_diff_check;

fn tiny() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        depth: 2,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
    }
}

fn jitter(model: &mut Backbone, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.tensors_mut() {
        let noise = gaussian(t.shape(), std, &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

fn images(cfg: &ViTConfig, batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [batch, cfg.channels, cfg.image_size, cfg.image_size];
    gaussian(&shape, 0.3, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0))
}

fn zero_layer(d: usize, h: usize) -> LayerWeights {
    LayerWeights {
        norm1_gamma: Tensor::ones(&[d]),
        norm1_beta: Tensor::zeros(&[d]),
        query_w: Tensor::zeros(&[d, d]),
        query_b: Tensor::zeros(&[d]),
        key_w: Tensor::zeros(&[d, d]),
        key_b: Tensor::zeros(&[d]),
        value_w: Tensor::zeros(&[d, d]),
        value_b: Tensor::zeros(&[d]),
        out_w: Tensor::zeros(&[d, d]),
        out_b: Tensor::zeros(&[d]),
        norm2_gamma: Tensor::ones(&[d]),
        norm2_beta: Tensor::zeros(&[d]),
        mlp_w1: Tensor::zeros(&[d, h]),
        mlp_b1: Tensor::zeros(&[h]),
        mlp_w2: Tensor::zeros(&[h, d]),
        mlp_b2: Tensor::zeros(&[d]),
    }
}

#[test]
fn config_validation() {
    assert!(ViTConfig::default().validate().is_ok());
    assert_eq!(ViTConfig::default().seq_len(), 66);
    let bad = ViTConfig {
        patch_size: 5,
        ..ViTConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = ViTConfig {
        heads: 5,
        ..ViTConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn patchify_default_layout() {
    let cfg = ViTConfig::default();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 32, 32], 0.25));
    let p = patchify(&mut tape, x, &cfg).unwrap();
    assert_eq!(tape.shape(p), &[1, 64, 16]);
    assert!(tape.value(p).data().iter().all(|&v| v == 0.25));

    let wrong = tape.constant(Tensor::zeros(&[1, 1, 28, 28]));
    assert!(matches!(patchify(&mut tape, wrong, &cfg), Err(Error::Dimension { .. })));
}

#[test]
fn patchify_hand_layout() {
    let cfg = ViTConfig {
        image_size: 2,
        patch_size: 1,
        ..ViTConfig::default()
    };
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = patchify(&mut tape, x, &cfg).unwrap();
    assert_eq!(tape.shape(p), &[1, 4, 1]);
    assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    // A 4×4 image in 2×2 patches: each patch is row-major inside itself.
    let cfg = ViTConfig {
        image_size: 4,
        patch_size: 2,
        ..ViTConfig::default()
    };
    let x = tape.constant(Tensor::new(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap());
    let p = patchify(&mut tape, x, &cfg).unwrap();
    let v = tape.value(p).data();
    assert_eq!(&v[..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&v[4..8], &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(&v[12..], &[10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn embed_places_class_token() {
    let cfg = ViTConfig::default();
    let mut model = Backbone::init(cfg, 3).unwrap();
    model.pos_embed = Tensor::zeros(&[cfg.seq_len(), cfg.dim]);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let patches = tape.constant(Tensor::zeros(&[2, 64, 16]));
    let seq = embed(&mut tape, patches, &vars).unwrap();
    assert_eq!(tape.shape(seq), &[2, 66, 64]);
    let s = tape.value(seq).data();
    assert_eq!(&s[64..128], model.cls_token.data());
    // Both samples are identical.
    assert_eq!(&s[..66 * 64], &s[66 * 64..]);
}

#[test]
fn zero_input_attends_uniformly() {
    let cfg = ViTConfig::default();
    let model = Backbone::init(cfg, 1).unwrap();
    let mut layer = model.layers[0].clone();
    layer.query_b = Tensor::zeros(&[cfg.dim]);
    layer.key_b = Tensor::zeros(&[cfg.dim]);
    let mut tape = Tape::new();
    let lv = layer.bind(&mut tape, false, cfg.heads);
    let x = tape.constant(Tensor::zeros(&[1, cfg.seq_len(), cfg.dim]));
    let (_, w) = attention(&mut tape, x, &lv).unwrap();
    assert_eq!(tape.shape(w), &[1, 4, 66, 66]);
    assert!(tape
        .value(w)
        .data()
        .iter()
        .all(|&v| (v - 1.0 / 66.0).abs() < 1e-15));
}

#[test]
fn hand_attention_two_tokens() {
    let mut layer = zero_layer(2, 2);
    let eye = Tensor::matrix(&[[1.0, 0.0], [0.0, 1.0]]);
    layer.query_w = eye.clone();
    layer.key_w = eye.clone();
    layer.value_w = eye.clone();
    layer.out_w = eye;
    let mut tape = Tape::new();
    let lv = layer.bind(&mut tape, false, 1);
    let x = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let (out, w) = attention(&mut tape, x, &lv).unwrap();
    let s = 1.0 / 2f64.sqrt();
    let a = s.exp() / (s.exp() + 1.0);
    let want = [a, 1.0 - a, 1.0 - a, a];
    for (got, want) in tape.value(out).data().iter().zip(want) {
        assert!((got - want).abs() < 1e-14);
    }
    for (got, want) in tape.value(w).data().iter().zip(want) {
        assert!((got - want).abs() < 1e-14);
    }
}

#[test]
fn zero_block_is_residual_identity() {
    let mut tape = Tape::new();
    let lv = zero_layer(8, 16).bind(&mut tape, false, 2);
    let x0 = images(&tiny(), 1, 4).reshape(&[1, 8, 8]).unwrap();
    let x = tape.constant(x0.clone());
    let (y, _) = layer_forward(&mut tape, x, &lv).unwrap();
    assert!(tape.value(y).bit_eq(&x0));
}

#[test]
fn block_gradient_matches_finite_differences() {
    let cfg = tiny();
    let mut model = Backbone::init(cfg, 5).unwrap();
    jitter(&mut model, 0.2, 6);
    let layer = model.layers[0].clone();
    let x0 = images(&cfg, 2, 7).reshape(&[2, 4, 16]).unwrap();
    let check = finite_diff_check(
        |tape, x| {
            let lv = layer.bind(tape, false, cfg.heads);
            let (y, _) = layer_forward(tape, x, &lv)?;
            let w = tape.constant(Tensor::new(&[16], (0..16).map(|i| (i as f64 * 0.37).sin()).collect())?);
            let y = tape.mul(y, w)?;
            tape.sum(y)
        },
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-4, "{check:?}");
}

#[test]
fn block_is_batch_equivariant() {
    let cfg = tiny();
    let mut model = Backbone::init(cfg, 8).unwrap();
    jitter(&mut model, 0.2, 9);
    let x0 = images(&cfg, 3, 10).reshape(&[3, 4, 16]).unwrap();
    let rows: Vec<_> = (0..3).map(|i| x0.select(i).unwrap()).collect();
    let swapped = Tensor::stack(&[rows[2].clone(), rows[0].clone(), rows[1].clone()]).unwrap();
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let lv = model.layers[0].bind(&mut tape, false, cfg.heads);
        let x = tape.constant(x.clone());
        let (y, _) = layer_forward(&mut tape, x, &lv).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (run(&x0), run(&swapped));
    assert!(b.select(0).unwrap().bit_eq(&a.select(2).unwrap()));
    assert!(b.select(1).unwrap().bit_eq(&a.select(0).unwrap()));
}

#[test]
fn classify_examples() {
    let cfg = ViTConfig {
        dim: 2,
        heads: 1,
        num_classes: 2,
        ..ViTConfig::default()
    };
    let mut model = Backbone::init(cfg, 0).unwrap();
    model.head_w = Tensor::zeros(&[2, 2]);
    model.head_b = Tensor::vector(&[0.5, -0.5]);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let c = tape.constant(Tensor::matrix(&[[1.0, 3.0], [-2.0, 7.0]]));
    let logits = classify(&mut tape, c, &vars).unwrap();
    assert_eq!(tape.value(logits).data(), &[0.5, -0.5, 0.5, -0.5]);

    model.head_w = Tensor::matrix(&[[1.0, 2.0], [3.0, 4.0]]);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let c = tape.constant(Tensor::matrix(&[[1.0, 3.0]]));
    let logits = classify(&mut tape, c, &vars).unwrap();
    let s = (1.0f64 + NORM_EPS).sqrt();
    let want = [2.0 / s + 0.5, 2.0 / s - 0.5];
    for (got, want) in tape.value(logits).data().iter().zip(want) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn argmax_survives_constant_shift() {
    let t = Tensor::matrix(&[[0.1, 2.0, -1.0], [3.0, 0.0, 1.0]]);
    assert_eq!(t.argmax_rows(), t.map(|v| v + 17.0).argmax_rows());
}

#[test]
fn extract_attention_contract() {
    let cfg = ViTConfig::default();
    let model = Backbone::init(cfg, 11).unwrap();
    let x = images(&cfg, 2, 12);
    let w = model.extract_attention(&x, 3).unwrap();
    assert_eq!(w.shape(), &[2, 4, 66, 66]);
    for row in w.data().chunks(66) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(w.bit_eq(&model.extract_attention(&x, 3).unwrap()));
    assert!(matches!(
        model.extract_attention(&x, 4),
        Err(Error::Index { index: 4, len: 4 })
    ));
}

#[test]
fn end_to_end_pixel_gradient() {
    let cfg = tiny();
    let mut model = Backbone::init(cfg, 13).unwrap();
    jitter(&mut model, 0.3, 14);
    let x0 = images(&cfg, 2, 15);
    let check = finite_diff_check(
        |tape, x| {
            let vars = model.bind(tape, false);
            let out = model.forward(tape, &vars, x)?;
            tape.sum(out.logits)
        },
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-3, "{check:?}");
}

#[test]
fn checkpoint_round_trip_and_checksum() {
    let model = Backbone::init(tiny(), 16).unwrap();
    let tensors = model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let back = Backbone::from_tensors(tiny(), tensors).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.checksum(), model.checksum());
    assert_ne!(Backbone::init(tiny(), 17).unwrap().checksum(), model.checksum());
    let names: Vec<_> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    assert!(names.contains(&"layers.1.mlp.fc2.b".into()));
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny();
    let model = Backbone::init(cfg, 18).unwrap();
    let x = images(&cfg, 3, 19);
    let a = model.predict(&x).unwrap();
    assert_eq!(a.shape(), &[3, 3]);
    assert!(a.bit_eq(&model.predict(&x).unwrap()));
}
