use axialgan::losses::{
    feature_matching_loss, hinge_d_loss, hinge_g_loss, huber_loss, perceptual_loss,
    total_generator_loss, LossWeights, PerceptualExtractor,
};
use axialgan::models::{AttentionKind, Discriminator, Generator, ModelConfig};
use axialgan::nn::Fwd;
use axialgan::reference::{self, Arr};
use axialgan::tensor::{grad_check_coords, grad_check_dir_f64};
use axialgan::{Error, Param, Result, Tape, Tensor, TensorId};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scalar(tape: &Tape, id: TensorId) -> f32 {
    tape.val(id).data[0]
}

#[test]
fn hinge_d_hand_values() {
    // (real level, fake level, loss): margins satisfied, both at zero, beyond margins
    let cases = [(1.0f32, -1.0f32, 0.0f32), (0.0, 0.0, 2.0), (2.0, -3.0, 0.0)];
    for (r, f, expect) in cases {
        let mut tape = Tape::new();
        let dr = tape.constant(Tensor::full(&[2, 1, 4, 4], r));
        let df = tape.constant(Tensor::full(&[2, 1, 4, 4], f));
        let l = hinge_d_loss(&mut tape, dr, df).unwrap();
        assert!((scalar(&tape, l) - expect).abs() < 1e-7, "({r},{f}) → {}", scalar(&tape, l));
    }
    // the two maps average independently, so their extents may differ
    let mut tape = Tape::new();
    let dr = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
    let df = tape.constant(Tensor::full(&[1, 1, 3, 3], -0.5));
    let l = hinge_d_loss(&mut tape, dr, df).unwrap();
    assert!((scalar(&tape, l) - 1.0).abs() < 1e-7);
}

#[test]
fn hinge_g_hand_values() {
    let cases: [(&[f32], f32); 3] = [(&[0.0, 0.0], 0.0), (&[1.0, 1.0], -1.0), (&[2.0, -2.0], 0.0)];
    for (vals, expect) in cases {
        let mut tape = Tape::new();
        let df = tape.constant(Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        let l = hinge_g_loss(&mut tape, df).unwrap();
        assert!((scalar(&tape, l) - expect).abs() < 1e-7, "{vals:?} → {}", scalar(&tape, l));
    }
}

#[test]
fn huber_hand_values() {
    let cases = [(0.0f32, 0.0f32), (0.5, 0.125), (2.0, 1.5)];
    for (d, expect) in cases {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full(&[2, 3, 4, 4], d));
        let t = tape.constant(Tensor::zeros(&[2, 3, 4, 4]));
        let l = huber_loss(&mut tape, p, t).unwrap();
        assert!((scalar(&tape, l) - expect).abs() < 1e-7, "d={d} → {}", scalar(&tape, l));
    }
    // mixed branches average elementwise: (0.125 + 1.5) / 2
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![2], vec![0.5, 2.0]).unwrap());
    let t = tape.constant(Tensor::zeros(&[2]));
    let l = huber_loss(&mut tape, p, t).unwrap();
    assert!((scalar(&tape, l) - 0.8125).abs() < 1e-7);

    let mut tape = Tape::new();
    let p = tape.constant(Tensor::zeros(&[2, 3]));
    let t = tape.constant(Tensor::zeros(&[3, 2]));
    match huber_loss(&mut tape, p, t) {
        Err(Error::Dim { .. }) => {}
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn huber_gradient_is_the_clamped_difference() {
    let mut r = rng(0);
    let pred = Param::new(Tensor::randn(&[3, 7], 1.5, &mut r));
    let target = Param::new(Tensor::randn(&[3, 7], 1.5, &mut r));
    let mut tape = Tape::new();
    let ip = tape.leaf(&pred);
    let it = tape.leaf(&target);
    let l = huber_loss(&mut tape, ip, it).unwrap();
    tape.backward(l).unwrap();
    let gp = pred.grad_clone().unwrap();
    let gt = target.grad_clone().unwrap();
    let n = pred.numel() as f32;
    for i in 0..pred.numel() {
        let d = pred.value().data[i] - target.value().data[i];
        let expect = d.clamp(-1.0, 1.0) / n;
        assert!((gp[i] - expect).abs() < 1e-6, "pred[{i}]: {} vs {expect}", gp[i]);
        assert!((gt[i] + expect).abs() < 1e-6, "target[{i}]: {} vs {}", gt[i], -expect);
    }
}

#[test]
fn feature_matching_hand_values() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::full(&[1, 2, 2, 2], 0.7));
    let l = feature_matching_loss(&mut tape, &[a], &[a]).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);

    let mut tape = Tape::new();
    let r1 = tape.constant(Tensor::full(&[1], 1.0));
    let f1 = tape.constant(Tensor::full(&[1], 3.0));
    let l = feature_matching_loss(&mut tape, &[r1], &[f1]).unwrap();
    assert!((scalar(&tape, l) - 2.0).abs() < 1e-7);

    // two scales with mean diffs 1 and 2 sum to 3
    let mut tape = Tape::new();
    let r1 = tape.constant(Tensor::zeros(&[2, 2]));
    let f1 = tape.constant(Tensor::full(&[2, 2], 1.0));
    let r2 = tape.constant(Tensor::full(&[3], 0.5));
    let f2 = tape.constant(Tensor::full(&[3], 2.5));
    let l = feature_matching_loss(&mut tape, &[r1, r2], &[f1, f2]).unwrap();
    assert!((scalar(&tape, l) - 3.0).abs() < 1e-7);

    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[1]));
    match feature_matching_loss(&mut tape, &[a, a], &[a]) {
        Err(Error::Contract(_)) => {}
        other => panic!("expected contract error, got {other:?}"),
    }
    match feature_matching_loss(&mut tape, &[], &[]) {
        Err(Error::Contract(_)) => {}
        other => panic!("expected contract error for empty lists, got {other:?}"),
    }
}

#[test]
fn feature_matching_trains_only_the_fake_branch() {
    let mut r = rng(1);
    let real_src = Param::new(Tensor::randn(&[2, 4], 1.0, &mut r));
    let fake_src = Param::new(Tensor::randn(&[2, 4], 1.0, &mut r));
    let mut tape = Tape::new();
    let ir = tape.leaf(&real_src);
    let ifk = tape.leaf(&fake_src);
    let rf = tape.scale(ir, 2.0).unwrap();
    let ff = tape.scale(ifk, 2.0).unwrap();
    let l = feature_matching_loss(&mut tape, &[rf], &[ff]).unwrap();
    tape.backward(l).unwrap();
    assert!(
        real_src.grad_clone().map_or(true, |g| g.iter().all(|v| *v == 0.0)),
        "gradient leaked into the real branch"
    );
    let gf = fake_src.grad_clone().expect("fake branch must receive gradient");
    assert!(gf.iter().any(|v| *v != 0.0));
}

#[test]
fn total_loss_weighting_and_term_removal() {
    // 1 + 100·0.01 with the perceptual and matching terms removed
    let mut tape = Tape::new();
    let lg = tape.constant(Tensor::scalar(1.0));
    let lh = tape.constant(Tensor::scalar(0.01));
    let lp = tape.constant(Tensor::scalar(123.0));
    let lfm = tape.constant(Tensor::scalar(-7.0));
    let w = LossWeights { lambda_h: 100.0, lambda_p: 0.0, lambda_fm: 0.0 };
    let total = total_generator_loss(&mut tape, lg, lh, lp, lfm, &w).unwrap();
    assert!((scalar(&tape, total) - 2.0).abs() < 1e-7);

    // all weights zero leaves the adversarial part bit-exact
    let w0 = LossWeights { lambda_h: 0.0, lambda_p: 0.0, lambda_fm: 0.0 };
    let t0 = total_generator_loss(&mut tape, lg, lh, lp, lfm, &w0).unwrap();
    assert_eq!(scalar(&tape, t0), scalar(&tape, lg));

    // default weights match an independently computed double-precision sum
    let parts = [0.37f32, 0.011, 1.9, 0.42];
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = parts.iter().map(|&v| tape.constant(Tensor::scalar(v))).collect();
    let w = LossWeights::default();
    let total = total_generator_loss(&mut tape, ids[0], ids[1], ids[2], ids[3], &w).unwrap();
    let expect = reference::total_generator(
        parts[0] as f64,
        parts[1] as f64,
        parts[2] as f64,
        parts[3] as f64,
        &w,
    );
    let rel = (scalar(&tape, total) as f64 - expect).abs() / expect.abs();
    assert!(rel < 1e-6, "weighted total off by {rel:.3e}");

    let bad = LossWeights { lambda_h: -1.0, ..LossWeights::default() };
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    match total_generator_loss(&mut tape, z, z, z, z, &bad) {
        Err(Error::Config(_)) => {}
        other => panic!("expected config error, got {other:?}"),
    }
}

proptest! {
    #[test]
    fn huber_matches_the_piecewise_formula(d in -3.0f32..3.0) {
        prop_assume!((d.abs() - 1.0).abs() > 1e-3);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::scalar(d));
        let t = tape.constant(Tensor::scalar(0.0));
        let l = huber_loss(&mut tape, p, t).unwrap();
        let expect = if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        prop_assert!((scalar(&tape, l) - expect).abs() < 1e-6);
    }

    #[test]
    fn hinge_d_is_monotone_in_both_arguments(
        real in proptest::collection::vec(-3.0f32..3.0, 4),
        fake in proptest::collection::vec(-3.0f32..3.0, 4),
        coord in 0usize..4,
        delta in 0.01f32..1.0,
    ) {
        let base = |rv: &[f32], fv: &[f32]| {
            let mut tape = Tape::new();
            let dr = tape.constant(Tensor::new(vec![4], rv.to_vec()).unwrap());
            let df = tape.constant(Tensor::new(vec![4], fv.to_vec()).unwrap());
            let l = hinge_d_loss(&mut tape, dr, df).unwrap();
            scalar(&tape, l)
        };
        let l0 = base(&real, &fake);
        // raising a real score never increases the loss
        let mut up = real.clone();
        up[coord] += delta;
        prop_assert!(base(&up, &fake) <= l0 + 1e-6);
        // raising a fake score never decreases it
        let mut up = fake.clone();
        up[coord] += delta;
        prop_assert!(base(&real, &up) >= l0 - 1e-6);
    }
}

// The scalar losses are piecewise polynomial, so away from the hinge points a
// wide central difference is exact up to rounding.
#[test]
fn scalar_loss_gradients_match_finite_differences() {
    let real_vals = vec![0.3f32, 1.6, -0.4, 2.2, 0.7, -1.8];
    let fake_vals = vec![-0.3f32, -1.7, 0.5, -2.1, 0.2, 1.4];
    let d_real = Param::new(Tensor::new(vec![6], real_vals).unwrap());
    let d_fake = Param::new(Tensor::new(vec![6], fake_vals).unwrap());
    let all: Vec<usize> = (0..6).collect();

    let loss = |tape: &mut Tape| {
        let ir = tape.leaf(&d_real);
        let ifk = tape.leaf(&d_fake);
        hinge_d_loss(tape, ir, ifk)
    };
    for p in [&d_real, &d_fake] {
        let err = grad_check_coords(&loss, p, &all, 5e-2).unwrap();
        assert!(err < 1e-3, "hinge_d rel err {err}");
    }

    let loss = |tape: &mut Tape| {
        let ifk = tape.leaf(&d_fake);
        hinge_g_loss(tape, ifk)
    };
    let err = grad_check_coords(&loss, &d_fake, &all, 5e-2).unwrap();
    assert!(err < 1e-3, "hinge_g rel err {err}");

    let pred = Param::new(Tensor::new(vec![6], vec![-2.0f32, -0.6, -0.2, 0.3, 0.7, 1.8]).unwrap());
    let target = Param::new(Tensor::zeros(&[6]));
    let loss = |tape: &mut Tape| {
        let ip = tape.leaf(&pred);
        let it = tape.leaf(&target);
        huber_loss(tape, ip, it)
    };
    for p in [&pred, &target] {
        let err = grad_check_coords(&loss, p, &all, 5e-2).unwrap();
        assert!(err < 1e-3, "huber rel err {err}");
    }

    let fake = Param::new(Tensor::new(vec![6], vec![0.9f32, -0.8, 1.2, -1.1, 0.6, -0.5]).unwrap());
    let loss = |tape: &mut Tape| {
        let real = tape.constant(Tensor::zeros(&[6]));
        let ifk = tape.leaf(&fake);
        feature_matching_loss(tape, &[real], &[ifk])
    };
    let err = grad_check_coords(&loss, &fake, &all, 5e-2).unwrap();
    assert!(err < 1e-3, "feature matching rel err {err}");
}

#[test]
fn perceptual_loss_is_zero_on_equal_symmetric_and_positive_on_shift() {
    let mut r = rng(2);
    let ex = PerceptualExtractor::new(11);
    let a = Tensor::randn(&[1, 3, 32, 32], 0.5, &mut r);
    let mut b = a.clone();
    for v in &mut b.data {
        *v += 0.5;
    }
    let eval = |x: &Tensor, y: &Tensor| {
        let mut tape = Tape::new();
        let mut fw = Fwd::eval(&mut tape);
        let ix = fw.tape.constant(x.clone());
        let iy = fw.tape.constant(y.clone());
        let l = perceptual_loss(&mut fw, &ex, ix, iy).unwrap();
        scalar(&tape, l)
    };
    assert_eq!(eval(&a, &a), 0.0);
    assert_eq!(eval(&a, &b), eval(&b, &a));
    assert!(eval(&a, &b) > 0.0);

    let mut tape = Tape::new();
    let mut fw = Fwd::eval(&mut tape);
    let ix = fw.tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
    let iy = fw.tape.constant(Tensor::zeros(&[1, 1, 16, 16]));
    match perceptual_loss(&mut fw, &ex, ix, iy) {
        Err(Error::Dim { .. }) => {}
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn perceptual_extractor_is_deterministic_per_seed() {
    let mut r = rng(3);
    let a = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut r);
    let b = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut r);
    let eval = |seed: u64| {
        let ex = PerceptualExtractor::new(seed);
        let mut tape = Tape::new();
        let mut fw = Fwd::eval(&mut tape);
        let ix = fw.tape.constant(a.clone());
        let iy = fw.tape.constant(b.clone());
        let l = perceptual_loss(&mut fw, &ex, ix, iy).unwrap();
        scalar(&tape, l)
    };
    assert_eq!(eval(5), eval(5));
    assert_ne!(eval(5), eval(6));
}

#[test]
fn perceptual_gradient_reaches_pred_but_never_the_extractor() {
    let mut r = rng(4);
    let ex = PerceptualExtractor::new(11);
    let pred = Param::new(Tensor::randn(&[1, 3, 16, 16], 0.5, &mut r));
    let target = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut r);
    let mut tape = Tape::new();
    let mut fw = Fwd::train_no_update(&mut tape);
    let ip = fw.leaf(&pred);
    let it = fw.tape.constant(target);
    let l = perceptual_loss(&mut fw, &ex, ip, it).unwrap();
    tape.backward(l).unwrap();
    let g = pred.grad_clone().expect("pred must receive gradient");
    assert!(g.iter().any(|v| *v != 0.0));
    for (name, w) in ex.weights() {
        assert!(
            w.grad_clone().map_or(true, |g| g.iter().all(|v| *v == 0.0)),
            "gradient leaked into {name}"
        );
    }
}

#[test]
fn perceptual_loss_matches_independent_recomputation() {
    let mut r = rng(5);
    let ex = PerceptualExtractor::new(11);
    let a = Tensor::randn(&[2, 3, 32, 32], 0.5, &mut r);
    let b = Tensor::randn(&[2, 3, 32, 32], 0.5, &mut r);
    let mut tape = Tape::new();
    let mut fw = Fwd::eval(&mut tape);
    let ia = fw.tape.constant(a.clone());
    let ib = fw.tape.constant(b.clone());
    let l = perceptual_loss(&mut fw, &ex, ia, ib).unwrap();
    let expect =
        reference::perceptual(&ex, &Arr::from_f32(&a.shape, &a.data), &Arr::from_f32(&b.shape, &b.data));
    let rel = (scalar(&tape, l) as f64 - expect).abs() / expect.abs();
    assert!(rel < 1e-4, "rel err {rel:.3e}");
}

// Minimum over a step-size ladder, as in the model gradient tests. The
// absolute-value terms here add kink crossings whose truncation error decays
// only linearly in eps, so the ladder reaches further down — the f64 oracle
// keeps even 1e-7 steps far above its noise floor.
fn ladder_check(name: &str, p: &Param, oracle: &mut dyn FnMut() -> Result<f64>) {
    let grad = p.grad_clone().unwrap_or_else(|| panic!("{name}: no gradient recorded"));
    assert!(grad.iter().any(|v| *v != 0.0), "{name}: gradient identically zero");
    let dir: Vec<f32> = grad.iter().map(|v| v.signum()).collect();
    let mut best = f64::INFINITY;
    for eps in [1e-4f32, 1e-5, 1e-6, 3e-7, 1e-7] {
        best = best.min(grad_check_dir_f64(&grad, p, &dir, eps, &mut *oracle).unwrap());
        if best < 1e-3 {
            return;
        }
    }
    panic!("{name}: rel err {best:.3e} at best step size");
}

#[test]
fn perceptual_gradients_match_finite_differences() {
    let mut r = rng(6);
    let ex = PerceptualExtractor::new(11);
    let pred = Param::new(Tensor::randn(&[1, 3, 16, 16], 0.5, &mut r));
    let target = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut r);
    let ta = Arr::from_f32(&target.shape, &target.data);
    pred.zero_grad();
    {
        let mut tape = Tape::new();
        let mut fw = Fwd::train_no_update(&mut tape);
        let ip = fw.leaf(&pred);
        let it = fw.tape.constant(target.clone());
        let l = perceptual_loss(&mut fw, &ex, ip, it).unwrap();
        tape.backward(l).unwrap();
    }
    let mut oracle =
        || -> Result<f64> { Ok(reference::perceptual(&ex, &Arr::from_param(&pred), &ta)) };
    ladder_check("pred", &pred, &mut oracle);
}

// The four-term training objective, differentiated through the tiny
// generator with the discriminator frozen — the exact shape of a training
// step's generator update.
#[test]
fn four_term_total_gradients_reach_the_generator() {
    let mut r = rng(7);
    let cfg = ModelConfig {
        base_resolution: 8,
        channel_div: 8,
        attention: AttentionKind::Axial,
        ..ModelConfig::default()
    };
    let g = Generator::new(cfg.clone(), &mut r).unwrap();
    let d = Discriminator::new(cfg, &mut r).unwrap();
    let ex = PerceptualExtractor::new(11);
    let w = LossWeights::default();
    let x = Tensor::randn(&[2, 1, 8, 8], 1.0, &mut r);
    let t_up = Tensor::randn(&[2, 1, 64, 64], 1.0, &mut r);
    let target = Tensor::uniform(&[2, 3, 64, 64], -0.9, 0.9, &mut r);

    let gen_params = g.parameters();
    for (_, p) in &gen_params {
        p.zero_grad();
    }
    for (_, p) in d.parameters() {
        p.zero_grad();
    }

    let mut tape = Tape::new();
    let total_val;
    {
        let (y, it, iv) = {
            let mut fw = Fwd::train_no_update(&mut tape);
            let ix = fw.tape.constant(x.clone());
            let it = fw.tape.constant(t_up.clone());
            let iv = fw.tape.constant(target.clone());
            (g.forward(&mut fw, ix).unwrap(), it, iv)
        };
        let (d_fake, fake_feats, real_feats) = {
            let mut fw = Fwd::train_frozen(&mut tape);
            let (d_fake, fake_feats) = d.forward(&mut fw, it, y).unwrap();
            let (_, real_feats) = d.forward(&mut fw, it, iv).unwrap();
            (d_fake, fake_feats, real_feats)
        };
        let l_p = {
            let mut fw = Fwd::train_no_update(&mut tape);
            perceptual_loss(&mut fw, &ex, y, iv).unwrap()
        };
        let l_g = hinge_g_loss(&mut tape, d_fake).unwrap();
        let l_h = huber_loss(&mut tape, y, iv).unwrap();
        let l_fm = feature_matching_loss(&mut tape, &real_feats, &fake_feats).unwrap();
        let total = total_generator_loss(&mut tape, l_g, l_h, l_p, l_fm, &w).unwrap();
        total_val = scalar(&tape, total);
        tape.backward(total).unwrap();
    }

    // the frozen discriminator must stay untouched
    for (name, p) in d.parameters() {
        assert!(
            p.grad_clone().map_or(true, |g| g.iter().all(|v| *v == 0.0)),
            "gradient leaked into frozen {name}"
        );
    }

    let xa = Arr::from_f32(&x.shape, &x.data);
    let tua = Arr::from_f32(&t_up.shape, &t_up.data);
    let ta = Arr::from_f32(&target.shape, &target.data);
    let mut oracle = || -> Result<f64> {
        let y = reference::generator(&g, &xa, true)?;
        let (d_fake, fake_feats) = reference::discriminator(&d, &tua, &y, true)?;
        let (_, real_feats) = reference::discriminator(&d, &tua, &ta, true)?;
        let l_g = reference::hinge_g(&d_fake);
        let l_h = reference::huber(&y, &ta);
        let l_p = reference::perceptual(&ex, &y, &ta);
        let l_fm = reference::feature_matching(&real_feats, &fake_feats);
        Ok(reference::total_generator(l_g, l_h, l_p, l_fm, &w))
    };

    let expect = oracle().unwrap();
    let rel = (total_val as f64 - expect).abs() / expect.abs();
    assert!(rel < 1e-4, "total loss value rel err {rel:.3e}");

    let picks =
        ["g.s00.conv.kernel", "g.s05.attn.attn_h.r_v", "g.s07.deconv.kernel", "g.out.kernel"];
    for (name, p) in gen_params.iter().filter(|(n, _)| picks.contains(&n.as_str())) {
        ladder_check(name, p, &mut oracle);
    }
}
