use proptest::prelude::*;

use super::*;

const D: ImageDims = ImageDims::DEFAULT;

fn images(n: usize, seed: u64) -> Tensor<f32> {
    RngStream::new(seed, 77).uniform_tensor(&[n, 1, D.height, D.width]).map(|v| v - 0.5)
}

fn student() -> ModelBundle {
    ModelBundle::new(Tier::Student, D, Role::Student, &mut RngStream::new(1, 0))
}

#[test]
fn head_emits_four_angles() {
    for tier in [Tier::TeacherL, Tier::TeacherS, Tier::Student] {
        let m = ModelBundle::new(tier, D, Role::Teacher, &mut RngStream::new(0, 0));
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let xl = tape.constant(images(3, 1));
        let xr = tape.constant(images(3, 2));
        let (h, y) = m.forward_pair(&mut tape, &b, xl, xr).unwrap();
        assert_eq!(tape.shape(y), &[3, 4]);
        assert_eq!(tape.shape(h), &[3, 2 * m.embed_dim()]);
    }
}

#[test]
fn swapping_eyes_swaps_embedding_halves() {
    let m = student();
    let e = m.embed_dim();
    let (a, b) = (images(2, 3), images(2, 4));
    let run = |l: &Tensor<f32>, r: &Tensor<f32>| {
        let mut tape = Tape::new();
        let bd = m.bind(&mut tape, false);
        let (xl, xr) = (tape.constant(l.clone()), tape.constant(r.clone()));
        let (h, _) = m.forward_pair(&mut tape, &bd, xl, xr).unwrap();
        tape.value(h).clone()
    };
    let h1 = run(&a, &b);
    let h2 = run(&b, &a);
    for i in 0..2 {
        let (r1, r2) = (h1.row(i), h2.row(i));
        assert_eq!(&r1[..e], &r2[e..]);
        assert_eq!(&r1[e..], &r2[..e]);
    }
}

#[test]
fn zero_head_outputs_bias() {
    let mut m = student();
    let w = m.params.index_of("head/l1/w").unwrap();
    let bi = m.params.index_of("head/l1/b").unwrap();
    let shape = m.params.get(w).shape().to_vec();
    m.params.set(w, Tensor::zeros(&shape)).unwrap();
    m.params.set(bi, Tensor::new(&[4], vec![0.1, -0.2, 0.3, -0.4]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, false);
    let (xl, xr) = (tape.constant(images(5, 5)), tape.constant(images(5, 6)));
    let (_, y) = m.forward_pair(&mut tape, &b, xl, xr).unwrap();
    for row in tape.value(y).data().chunks(4) {
        assert_eq!(row, &[0.1, -0.2, 0.3, -0.4]);
    }
}

#[test]
fn one_backbone_serves_both_eyes() {
    let m = student();
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, true);
    let (xl, xr) = (tape.constant(images(2, 7)), tape.constant(images(2, 8)));
    let (h, _) = m.forward_pair(&mut tape, &b, xl, xr).unwrap();
    // Loss on the right-eye half only still reaches the single conv weight.
    let right = tape.narrow(h, 1, m.embed_dim(), m.embed_dim()).unwrap();
    let loss = tape.sum_all(right).unwrap();
    let g = tape.backward(loss).unwrap();
    let conv0 = m.params.index_of("backbone/conv0/w").unwrap();
    assert!(g.wrt(b.vars()[conv0]).data().iter().any(|&v| v != 0.0));
    assert_eq!(m.param_indices("backbone/conv0/w").len(), 1);
}

#[test]
fn wrong_dims_rejected() {
    let m = student();
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 1, 40, 64]));
    assert!(matches!(m.forward_pair(&mut tape, &b, x, x), Err(NetError::Dims { .. })));
}

#[test]
fn projector_shape_and_identity() {
    let mut m = student();
    m.add_projector("main", &mut RngStream::new(2, 2));
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, false);
    let (xl, xr) = (tape.constant(images(3, 9)), tape.constant(images(3, 10)));
    let (h, _) = m.forward_pair(&mut tape, &b, xl, xr).unwrap();
    let z = m.project(&mut tape, &b, h, "main").unwrap();
    assert_eq!(tape.shape(z), &[3, PROJ_DIM]);
    assert!(matches!(m.project(&mut tape, &b, h, "nope"), Err(NetError::UnknownProjector(_))));

    // Dim-matched identity projector.
    let d = 2 * m.embed_dim();
    m.add_projector_with("id", d, d, Activation::Identity, &mut RngStream::new(0, 0));
    for k in 0..3 {
        let w = m.params.index_of(&format!("proj/id/l{k}/w")).unwrap();
        m.params.set(w, Tensor::eye(d)).unwrap();
    }
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, false);
    let hv = RngStream::new(3, 3).normal_tensor(&[4, d]);
    let h = tape.constant(hv.clone());
    let z = m.project(&mut tape, &b, h, "id").unwrap();
    assert_eq!(tape.value(z), &hv);
}

#[test]
fn remove_projector_restores_layout() {
    let base = student();
    let mut m = base.clone();
    m.add_projector("s2t", &mut RngStream::new(0, 1));
    m.add_projector("s2e", &mut RngStream::new(0, 2));
    m.remove_projector("s2t").unwrap();
    assert_eq!(m.projector_tags(), vec!["s2e"]);
    m.remove_projector("s2e").unwrap();
    assert_eq!(m, base);
}

#[test]
fn ema_formula_and_fixed_point() {
    let mut t = student();
    let mut s = student();
    for i in 0..t.params.len() {
        let shape = t.params.get(i).shape().to_vec();
        t.params.set(i, Tensor::ones(&shape)).unwrap();
        s.params.set(i, Tensor::zeros(&shape)).unwrap();
    }
    let cfg = EmaConfig {
        momentum: 0.99,
        interval: 100,
    };
    ema_update(&mut t, &s, &cfg).unwrap();
    assert!(t.params.flatten().iter().all(|&v| v == 0.99f32));

    let mut a = student();
    let before = a.clone();
    let src = a.clone();
    ema_update(&mut a, &src, &cfg).unwrap();
    assert_eq!(a, before);
}

#[test]
fn ema_matches_exact_rounding() {
    let mut t = student();
    let s = ModelBundle::new(Tier::Student, D, Role::Student, &mut RngStream::new(9, 9));
    let before = t.params.flatten();
    let cfg = EmaConfig {
        momentum: 0.97,
        interval: 1,
    };
    ema_update(&mut t, &s, &cfg).unwrap();
    for ((&a, &b), &c) in t.params.flatten().iter().zip(&before).zip(&s.params.flatten()) {
        assert_eq!(a, (0.97 * b as f64 + (1.0 - 0.97) * c as f64) as f32);
    }
}

#[test]
fn ema_converges_geometrically() {
    let c = 2.0f32;
    let mut t = student();
    let mut s = student();
    for i in 0..s.params.len() {
        let shape = s.params.get(i).shape().to_vec();
        s.params.set(i, Tensor::full(&shape, c)).unwrap();
    }
    let cfg = EmaConfig {
        momentum: 0.95,
        interval: 100,
    };
    let init = t.params.flatten();
    let mut gap_prev: Vec<f64> = init.iter().map(|&v| (v - c) as f64).collect();
    for n in 1..=50 {
        ema_update(&mut t, &s, &cfg).unwrap();
        let now = t.params.flatten();
        for ((&v, &v0), g) in now.iter().zip(&init).zip(gap_prev.iter_mut()) {
            let expect = c as f64 + (v0 - c) as f64 * 0.95f64.powi(n);
            assert!((v as f64 - expect).abs() <= 1e-5 * (1.0 + expect.abs()), "step {n}: {v} vs {expect}");
            let gap = (v - c) as f64;
            if g.abs() > 1e-3 {
                assert!((gap / *g - 0.95).abs() < 1e-3);
            }
            *g = gap;
        }
    }
}

#[test]
fn ema_interval() {
    let cfg = EmaConfig::default();
    assert_eq!(cfg.interval, 100);
    let due: Vec<u64> = (0..=350).filter(|&s| cfg.due(s)).collect();
    assert_eq!(due, vec![100, 200, 300]);
    assert!(EmaConfig { momentum: 1.0, interval: 1 }.validate().is_err());
    assert!(EmaConfig { momentum: 0.9, interval: 0 }.validate().is_err());
}

#[test]
fn ema_rejects_mismatch() {
    let mut t = student();
    let s = ModelBundle::new(Tier::TeacherS, D, Role::Student, &mut RngStream::new(0, 0));
    assert!(matches!(ema_update(&mut t, &s, &EmaConfig::default()), Err(NetError::Architecture(_))));
}

#[test]
fn linear_layer_count() {
    let mut p = ParamSet::new();
    p.push("w", Tensor::zeros(&[3, 4]));
    p.push("b", Tensor::zeros(&[4]));
    assert_eq!(p.numel(), 16);
}

#[test]
fn tier_budgets() {
    let count = |t: Tier| ModelBundle::new(t, D, Role::Teacher, &mut RngStream::new(0, 0)).param_count();
    for t in [Tier::TeacherL, Tier::TeacherS, Tier::Student] {
        let spec = BackboneSpec::for_tier(t);
        let n = count(t);
        assert_eq!(n, spec.inference_params(D));
        let ratio = n as f64 / spec.budget as f64;
        assert!((0.9..=1.1).contains(&ratio), "{t:?}: {n} vs {}", spec.budget);
    }
    assert!(count(Tier::Student) <= 80_000);
    assert!(count(Tier::TeacherL) as f64 / count(Tier::Student) as f64 >= 10.0);
    assert_eq!(BackboneSpec::for_tier(Tier::TeacherL).embed_dim, 192);
    assert_eq!(BackboneSpec::for_tier(Tier::TeacherS).embed_dim, 128);
    assert_eq!(BackboneSpec::for_tier(Tier::Student).embed_dim, 64);
}

#[test]
fn projectors_excluded_from_inference_count() {
    let mut m = student();
    let base = m.param_count();
    m.add_projector("main", &mut RngStream::new(0, 0));
    assert!(m.param_count() > base);
    assert_eq!(m.inference_param_count(), base);
}

#[test]
fn checkpoint_round_trip() {
    let mut m = ModelBundle::new(Tier::TeacherS, D, Role::Teacher, &mut RngStream::new(4, 4));
    m.add_projector("main", &mut RngStream::new(4, 5));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.gdck");
    m.save(&p).unwrap();
    assert_eq!(ModelBundle::load(&p).unwrap(), m);
}

#[test]
fn predict_matches_tape_forward() {
    use crate::eyegen::{make_dataset, DatasetSpec};
    let spec = DatasetSpec {
        n_subjects_pretrain: 1,
        n_subjects_syn: 1,
        n_subjects_real_train: 1,
        n_subjects_real_eval: 1,
        n_subjects_real_upper: 1,
        frames_per_recording: 3,
        ..DatasetSpec::default()
    };
    let data = make_dataset(&spec).unwrap();
    let m = student();
    let refs: Vec<&Sample> = data.syn.iter().collect();
    let y = m.predict(&refs).unwrap();
    let h = m.embed_pairs(&refs).unwrap();
    assert_eq!(y.len(), 3);
    assert_eq!(h[0].len(), 128);
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, false);
    let (xl, xr) = batch_inputs(&mut tape, &refs[..1], D, |s| (&s.image_left, &s.image_right));
    let (_, y1) = m.forward_pair(&mut tape, &b, xl, xr).unwrap();
    assert_eq!(tape.value(y1).data(), &y[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn projector_finite(seed in any::<u64>(), scale in 0.0f32..5.0) {
        let mut m = student();
        m.add_projector("main", &mut RngStream::new(seed, 1));
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let hv = RngStream::new(seed, 2).uniform_tensor(&[8, 128]).map(|v| (2.0 * v - 1.0) * scale);
        let h = tape.constant(hv);
        let z = m.project(&mut tape, &b, h, "main").unwrap();
        prop_assert!(tape.value(z).is_finite());
    }

    #[test]
    fn ema_commutes_with_flatten(seed in any::<u64>(), a in 0.5f64..0.999) {
        let mut t = ModelBundle::new(Tier::Student, D, Role::Student, &mut RngStream::new(seed, 1));
        let s = ModelBundle::new(Tier::Student, D, Role::Student, &mut RngStream::new(seed, 2));
        let (ft, fs) = (t.params.flatten(), s.params.flatten());
        ema_update(&mut t, &s, &EmaConfig { momentum: a, interval: 1 }).unwrap();
        let expect: Vec<f32> = ft.iter().zip(&fs).map(|(&x, &y)| (a * x as f64 + (1.0 - a) * y as f64) as f32).collect();
        prop_assert_eq!(t.params.flatten(), expect);
    }
}
