mod common;

use common::rng;
use fdcl_core::detector::{evaluate, gen_scenes, BackboneConfig, DetectorModel, Domain};
use fdcl_core::par;
use fdcl_core::tensor::{
    grad_check, load_checkpoint, save_checkpoint, ParamSet, SgdConfig, SgdState, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::Rng;

fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn mlp_params(r: &mut impl Rng, i: usize, h: usize, o: usize) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.push("w1", uniform(r, &[h, i], -1.0, 1.0).tracked());
    p.push("b1", uniform(r, &[h], -0.5, 0.5).tracked());
    p.push("w2", uniform(r, &[o, h], -1.0, 1.0).tracked());
    p.push("b2", uniform(r, &[o], -0.5, 0.5).tracked());
    p
}

fn mlp(tape: &mut Tape<f64>, v: &[Var], x: &Tensor<f64>) -> fdcl_core::Result<Var> {
    let xv = tape.constant(x.clone());
    let h = tape.linear(xv, v[0], v[1])?;
    let h = tape.relu(h);
    let y = tape.linear(h, v[2], v[3])?;
    let sq = tape.square(y);
    Ok(tape.mean(sq))
}

fn conv_chain(tape: &mut Tape<f64>, v: &[Var], x: &Tensor<f64>) -> fdcl_core::Result<Var> {
    let xv = tape.constant(x.clone());
    let h = tape.conv2d(xv, v[0], v[1])?;
    let h = tape.relu(h);
    let h = tape.avg_pool2d(h, 2)?;
    let h = tape.flatten(h)?;
    let y = tape.linear(h, v[2], v[3])?;
    let s = tape.sigmoid(y);
    Ok(tape.sum(s))
}

/// Smallest distance of any ReLU input from zero for these parameters.
fn margin(p: &ParamSet<f64>, f: impl Fn(&mut Tape<f64>, &[Var]) -> fdcl_core::Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let v = p.bind(&mut tape);
    f(&mut tape, &v).unwrap();
    tape.kink_margin().unwrap_or(f64::INFINITY)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn two_layer_relu_network_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = mlp_params(&mut r, 5, 6, 2);
        let x = uniform(&mut r, &[3, 5], -1.0, 1.0);
        let f = |t: &mut Tape<f64>, v: &[Var]| mlp(t, v, &x);
        prop_assume!(margin(&p, f) > 1e-2);
        let rep = grad_check(&p, 1e-3, f).unwrap();
        prop_assert!(rep.max_rel_error < 1e-3, "{rep:?}");
        prop_assert_eq!(rep.checked, p.numel());
    }

    #[test]
    fn conv_relu_pool_fc_chain_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut p = ParamSet::new();
        p.push("cw", uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5).tracked());
        p.push("cb", uniform(&mut r, &[3], -0.2, 0.2).tracked());
        p.push("fw", uniform(&mut r, &[2, 3 * 2 * 2], -0.5, 0.5).tracked());
        p.push("fb", uniform(&mut r, &[2], -0.2, 0.2).tracked());
        let x = uniform(&mut r, &[2, 2, 4, 4], 0.0, 1.0);
        let f = |t: &mut Tape<f64>, v: &[Var]| conv_chain(t, v, &x);
        prop_assume!(margin(&p, f) > 1e-2);
        let rep = grad_check(&p, 1e-4, f).unwrap();
        prop_assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }

    #[test]
    fn sgd_step_matches_its_formula(p0 in -5.0f64..5.0, g in -5.0f64..5.0, lr in 1e-4f64..0.5, m in 0.0f64..0.99, wd in 0.0f64..0.1) {
        let mut p = ParamSet::new();
        p.push("p", Tensor::scalar(p0).tracked());
        let mut s = SgdState::new(SgdConfig { lr, momentum: m, weight_decay: wd });
        p.get_mut("p").unwrap().set_grad(vec![g]).unwrap();
        s.step(&mut p).unwrap();
        let v1 = g + wd * p0;
        let p1 = p0 - lr * v1;
        prop_assert!((p.flat()[0] - p1).abs() < 1e-12);
        p.get_mut("p").unwrap().set_grad(vec![g]).unwrap();
        s.step(&mut p).unwrap();
        let v2 = m * v1 + g + wd * p1;
        prop_assert!((p.flat()[0] - (p1 - lr * v2)).abs() < 1e-12);
    }
}

#[test]
fn linear_model_is_exact_and_constants_have_zero_gradient() {
    let mut r = rng(1);
    let mut p = ParamSet::new();
    p.push("w", uniform(&mut r, &[4], -1.0, 1.0).tracked());
    let x = uniform(&mut r, &[4], -1.0, 1.0);
    let rep = grad_check(&p, 1e-3, |t, v| {
        let xv = t.constant(x.clone());
        let y = t.mul(v[0], xv)?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(rep.max_rel_error < 1e-6);

    let mut tape = Tape::new();
    let v = p.bind(&mut tape);
    let zero = tape.scale(v[0], 0.0);
    let s = tape.sum(zero);
    let c = tape.add_scalar(s, 3.0);
    let grads = tape.backward(c).unwrap();
    assert!(grads.get(v[0]).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn grad_check_rejects_bad_epsilon_and_reports_non_finite() {
    let mut p = ParamSet::new();
    p.push("w", Tensor::<f64>::scalar(1.0).tracked());
    let f = |t: &mut Tape<f64>, v: &[Var]| Ok(t.sum(v[0]));
    assert!(grad_check(&p, 1e-6, f).is_err());
    assert!(grad_check(&p, 0.1, f).is_err());
    let blowup = |t: &mut Tape<f64>, v: &[Var]| {
        let big = t.scale(v[0], 1e200);
        let sq = t.square(big);
        Ok(t.sum(sq))
    };
    let err = grad_check(&p, 1e-3, blowup).unwrap_err();
    assert!(matches!(err, fdcl_core::Error::NonFinite { index: 0, .. }), "{err}");
}

#[test]
fn parallel_and_sequential_kernels_agree_bitwise() {
    let mut r = rng(9);
    let x = uniform(&mut r, &[4, 3, 8, 8], 0.0, 1.0).cast::<f32>();
    let w = uniform(&mut r, &[5, 3, 3, 3], -1.0, 1.0).cast::<f32>().tracked();
    let b = uniform(&mut r, &[5], -1.0, 1.0).cast::<f32>().tracked();
    let run = || {
        let mut tape = Tape::<f32>::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.leaf(&w), tape.leaf(&b));
        let y = tape.conv2d(xv, wv, bv).unwrap();
        let y = tape.relu(y);
        let l = tape.mean(y);
        let g = tape.backward(l).unwrap();
        (
            tape.value(y).to_vec(),
            g.get(wv).unwrap().to_vec(),
            g.get(bv).unwrap().to_vec(),
        )
    };
    let par_out = run();
    par::force_sequential(true);
    let seq_out = run();
    par::force_sequential(false);
    assert_eq!(par_out, seq_out);
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let mut model = DetectorModel::new(
        BackboneConfig {
            channels: [4, 4, 8],
            feature_dim: 16,
            input_channels: 3,
        },
        &mut fdcl_core::rng::stream(3, fdcl_core::rng::Stream::Init),
    );
    // Push logits over the threshold so detections exist.
    for v in model.decoder.get_mut("cls.b").unwrap().data_mut() {
        *v = 2.0;
    }
    let scenes = gen_scenes(3, 0, 6, Domain::Day);
    let refs: Vec<_> = scenes.iter().collect();
    let before = evaluate(&model, &refs).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fdcl");
    save_checkpoint(&path, &model.to_params()).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.flat(), model.to_params().flat());

    let mut fresh = DetectorModel::new(
        model.config,
        &mut fdcl_core::rng::stream(99, fdcl_core::rng::Stream::Init),
    );
    fresh.load_params(&loaded).unwrap();
    assert_eq!(evaluate(&fresh, &refs).unwrap(), before);

    std::fs::write(&path, b"FDCL1 truncated").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
