use super::*;
use crate::gradcheck::finite_diff_check;
use crate::vit::ViTConfig;

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

fn images(cfg: &ViTConfig, batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [batch, cfg.channels, cfg.image_size, cfg.image_size];
    gaussian(&shape, 0.3, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0))
}

fn jittered(cfg: ViTConfig, seed: u64) -> Backbone {
    let mut model = Backbone::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xff);
    for t in model.tensors_mut() {
        let noise = gaussian(t.shape(), 0.2, &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    model
}

fn hand_layer(d: usize, h: usize) -> LiftingLayer {
    LiftingLayer {
        token: Tensor::zeros(&[d]),
        pred_w1: Tensor::zeros(&[d, h]),
        pred_b1: Tensor::zeros(&[h]),
        pred_w2: Tensor::zeros(&[h, d]),
        pred_b2: Tensor::zeros(&[d]),
        upd_gamma: Tensor::ones(&[d]),
        upd_beta: Tensor::zeros(&[d]),
    }
}

fn bind_layer(tape: &mut Tape, l: &LiftingLayer) -> LiftingVars {
    LiftingParams { layers: alloc::vec![l.clone()] }.bind(tape, |_| false)[0]
}

#[test]
fn inject_overwrites_only_the_first_two_slots() {
    let mut tape = Tape::new();
    let x0 = Tensor::new(&[2, 4, 3], (0..24).map(f64::from).collect()).unwrap();
    let x = tape.constant(x0.clone());
    let token = tape.constant(Tensor::zeros(&[3]));
    let class = tape.constant(Tensor::matrix(&[[7.0, 8.0, 9.0], [-1.0, -2.0, -3.0]]));
    let y = inject_tokens(&mut tape, x, token, class).unwrap();
    let v = tape.value(y);
    for b in 0..2 {
        let s = v.select(b).unwrap();
        assert_eq!(&s.data()[..3], &[0.0; 3]);
        assert_eq!(&s.data()[6..], &x0.select(b).unwrap().data()[6..]);
    }
    assert_eq!(&v.data()[3..6], &[7.0, 8.0, 9.0]);

    let bad = tape.constant(Tensor::zeros(&[4]));
    assert!(inject_tokens(&mut tape, x, bad, class).is_err());
}

#[test]
fn predict_shift_examples() {
    let mut tape = Tape::new();
    let lv = bind_layer(&mut tape, &hand_layer(2, 1));
    let f = tape.constant(Tensor::matrix(&[[0.3, -0.7], [0.3, -0.7]]));
    let pi = predict_shift(&mut tape, f, &lv).unwrap();
    assert_eq!(tape.value(pi).data(), &[0.0; 4]);

    let mut l = hand_layer(2, 1);
    l.pred_w1 = Tensor::matrix(&[[1.0], [2.0]]);
    l.pred_b1 = Tensor::vector(&[0.5]);
    l.pred_w2 = Tensor::matrix(&[[3.0, -1.0]]);
    l.pred_b2 = Tensor::vector(&[0.1, 0.2]);
    let lv = bind_layer(&mut tape, &l);
    let pi = predict_shift(&mut tape, f, &lv).unwrap();
    // hidden pre-activation 0.3 - 1.4 + 0.5 = -0.6
    let u: f64 = -0.6;
    let g = 0.5 * u * (1.0 + ((2.0 / core::f64::consts::PI).sqrt() * (u + 0.044715 * u * u * u)).tanh());
    let want = [3.0 * g + 0.1, -g + 0.2];
    let v = tape.value(pi).data();
    for row in v.chunks(2) {
        assert!((row[0] - want[0]).abs() < 1e-14 && (row[1] - want[1]).abs() < 1e-14);
    }
    assert_eq!(&v[..2], &v[2..]);
}

#[test]
fn update_class_examples() {
    let mut l = hand_layer(3, 1);
    l.upd_beta = Tensor::vector(&[0.1, 0.2, 0.3]);
    let mut tape = Tape::new();
    let lv = bind_layer(&mut tape, &l);
    let f = tape.constant(Tensor::matrix(&[[1.0, 2.0, 4.0]]));
    let pi = tape.constant(Tensor::matrix(&[[1.0, 2.0, 4.0]]));
    let c = update_class(&mut tape, f, pi, &lv).unwrap();
    assert_eq!(tape.value(c).data(), &[0.1, 0.2, 0.3]);

    // [3, 5, 10] − [2, 3, 7] = [1, 2, 3]: mean 2, biased variance 2/3.
    let lv = bind_layer(&mut tape, &hand_layer(3, 1));
    let f = tape.constant(Tensor::matrix(&[[3.0, 5.0, 10.0]]));
    let pi = tape.constant(Tensor::matrix(&[[2.0, 3.0, 7.0]]));
    let c = update_class(&mut tape, f, pi, &lv).unwrap();
    let s = (2.0f64 / 3.0 + NORM_EPS).sqrt();
    for (got, want) in tape.value(c).data().iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn init_contract() {
    let model = Backbone::init(ViTConfig::default(), 1).unwrap();
    let a = LiftingParams::init(&model, 32, 7).unwrap();
    let b = LiftingParams::init(&model, 32, 7).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), LiftingParams::init(&model, 32, 8).unwrap().checksum());
    assert_eq!(a.num_params(), 4 * (64 + 2 * 64 * 32 + 32 + 64 + 2 * 64));
    assert_eq!(a.num_params(), 17_536);
    assert_eq!(a.ids().len(), 28);
    let base = model.shift_slot_token();
    let dev: f64 = a.layers[0]
        .token
        .data()
        .iter()
        .zip(base.data())
        .map(|(t, b)| (t - b).abs())
        .fold(0.0, f64::max);
    assert!(dev > 0.0 && dev < 0.2);

    let lifted = LiftedViT {
        backbone: model,
        lifting: a,
    };
    let out = lifted.infer(&images(&ViTConfig::default(), 3, 2)).unwrap();
    assert_eq!(out.pis.len(), 4);
    for pi in &out.pis {
        assert_eq!(pi.shape(), &[3, 64]);
        assert!(pi.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn null_lifting_reproduces_source_bitwise() {
    let cfg = ViTConfig::default();
    let backbone = Backbone::init(cfg, 21).unwrap();
    let lifted = LiftedViT {
        lifting: LiftingParams::null(&backbone, 32).unwrap(),
        backbone,
    };
    for seed in 0..10 {
        let x = images(&cfg, 4, 100 + seed);
        let source = lifted.backbone.predict(&x).unwrap();
        let out = lifted.infer(&x).unwrap();
        assert!(out.logits.bit_eq(&source), "batch {seed}");
    }
}

#[test]
fn gradient_wrt_first_token() {
    let cfg = tiny();
    let backbone = jittered(cfg, 3);
    let mut lifting = LiftingParams::init(&backbone, 8, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for id in lifting.ids() {
        let t = lifting.get_mut(id).unwrap();
        let noise = gaussian(t.shape(), 0.3, &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let x0 = images(&cfg, 3, 6);
    let p1 = lifting.layers[0].token.clone();
    let check = finite_diff_check(
        |tape, p| {
            let bvars = backbone.bind(tape, false);
            let mut lvars = lifting.bind(tape, |_| false);
            lvars[0].token = p;
            let x = tape.constant(x0.clone());
            let out = lifted_forward(tape, &backbone, &bvars, &lvars, x)?;
            let lp = tape.log_softmax(out.logits)?;
            let p = tape.softmax(out.logits)?;
            let e = tape.mul(p, lp)?;
            tape.sum(e)
        },
        &p1,
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-3, "{check:?}");
}

#[test]
fn pi_depends_on_slot_zero_output_only() {
    let cfg = tiny();
    let backbone = jittered(cfg, 30);
    let mut lifting = LiftingParams::init(&backbone, 8, 31).unwrap();
    lifting.layers[1].pred_w2 = Tensor::full(&[8, 16], 0.1);
    let mut tape = Tape::new();
    let bvars = backbone.bind(&mut tape, false);
    let lvars = lifting.bind(&mut tape, |_| false);
    let x = tape.constant(images(&cfg, 2, 32));
    let out = lifted_forward(&mut tape, &backbone, &bvars, &lvars, x).unwrap();
    for (rec, lv) in out.state.records.iter().zip(&lvars) {
        let fd = tape.constant(tape.value(rec.shift_out).clone());
        let pi = predict_shift(&mut tape, fd, lv).unwrap();
        assert!(tape.value(pi).bit_eq(tape.value(rec.pi)));
    }
}

#[test]
fn only_lifting_parameters_receive_gradients() {
    let cfg = tiny();
    let backbone = jittered(cfg, 40);
    let mut lifting = LiftingParams::init(&backbone, 8, 41).unwrap();
    for l in &mut lifting.layers {
        l.pred_w2 = Tensor::full(l.pred_w2.shape(), 0.05);
    }
    let mut tape = Tape::new();
    let bvars = backbone.bind(&mut tape, false);
    let lvars = lifting.bind(&mut tape, |_| true);
    let x = tape.constant(images(&cfg, 3, 42));
    let out = lifted_forward(&mut tape, &backbone, &bvars, &lvars, x).unwrap();
    let lp = tape.log_softmax(out.logits).unwrap();
    let root = tape.sum(lp).unwrap();
    tape.backward(root).unwrap();
    for v in bvars.all() {
        assert!(!tape.requires_grad(v));
        assert_eq!(tape.grad(v).sq_norm(), 0.0);
    }
    for lv in &lvars {
        for f in LiftingField::ALL {
            assert!(tape.grad(lv.get(f)).sq_norm() > 0.0, "{f:?}");
        }
    }
}

#[test]
fn lifted_attention_contract() {
    let cfg = tiny();
    let lifted = LiftedViT::new(Backbone::init(cfg, 50).unwrap(), 8, 51).unwrap();
    let x = images(&cfg, 2, 52);
    let w = lifted.extract_attention(&x, 1).unwrap();
    assert_eq!(w.shape(), &[2, 2, 6, 6]);
    assert!(matches!(lifted.extract_attention(&x, 2), Err(Error::Index { .. })));
}
