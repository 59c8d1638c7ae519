mod common;

use common::{random_image, rng};
use fdcl_core::contrastive::{
    adapt_step, empirical_fisher, ewc_penalty, ewc_penalty_tape, fcl_loss, AdaptConfig, AdaptOptim, AdaptRngs,
    FisherAnchor, ProjectionConfig, SiameseState,
};
use fdcl_core::detector::BackboneConfig;
use fdcl_core::fourier::{BetaSchedule, ImagePlane};
use fdcl_core::rng::{stream, Stream};
use fdcl_core::tensor::{ParamSet, SgdConfig, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

const BACKBONE: BackboneConfig = BackboneConfig {
    channels: [4, 4, 8],
    feature_dim: 16,
    input_channels: 3,
};
const PROJ: ProjectionConfig = ProjectionConfig {
    feature_dim: 16,
    hidden: 16,
    out: 8,
    pred_hidden: 16,
};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn random_params(r: &mut impl Rng, shapes: &[&[usize]], lo: f32, hi: f32) -> ParamSet {
    let mut p = ParamSet::new();
    for (i, s) in shapes.iter().enumerate() {
        let n = s.iter().product();
        p.push(
            format!("p{i}"),
            Tensor::new(s, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap(),
        );
    }
    p
}

fn setup(seed: u64, mu: f64) -> (SiameseState, FisherAnchor, Vec<ImagePlane>, Vec<ImagePlane>) {
    let mut init = stream(seed, Stream::Init);
    let features = BACKBONE.init(&mut init);
    let state = SiameseState::new(&features, &PROJ, mu, &mut init).unwrap();
    let mut r = rng(seed);
    let mut fisher = features.clone();
    fisher.set_tracked(false);
    for t in fisher.iter_mut() {
        t.1.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.0..2.0));
    }
    // Anchor slightly away from the start so the penalty has a gradient.
    let mut star = fisher.clone();
    for ((_, s), f) in star.iter_mut().zip(features.tensors()) {
        for (s, &f) in s.data_mut().iter_mut().zip(f.data()) {
            *s = f + r.random_range(-0.1..0.1);
        }
    }
    let anchor = FisherAnchor::new(fisher, star, 4).unwrap();
    let day: Vec<_> = (0..4).map(|_| random_image(&mut r, 16, 16, 3)).collect();
    let night: Vec<_> = (0..3).map(|_| random_image(&mut r, 16, 16, 3)).collect();
    (state, anchor, day, night)
}

fn cfg(lambda: f64) -> AdaptConfig {
    AdaptConfig {
        lambda_ewc: lambda,
        sgd: SgdConfig {
            lr: 0.05,
            momentum: 0.0,
            weight_decay: 0.0,
        },
        beta: BetaSchedule::standard(),
        crop_probability: 0.25,
    }
}

fn step(state: &mut SiameseState, anchor: &FisherAnchor, day: &[ImagePlane], night: &[ImagePlane], c: &AdaptConfig) {
    let d: Vec<_> = day.iter().collect();
    let n: Vec<_> = night.iter().collect();
    adapt_step(
        state,
        anchor,
        &d,
        &n,
        &mut AdaptRngs::new(7),
        c,
        &mut AdaptOptim::new(c.sgd),
    )
    .unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fcl_matches_loop_and_ignores_scale(b in 1usize..6, d in 1usize..10, seed in any::<u64>(), k in 0.01f64..100.0) {
        let mut r = rng(seed);
        let q: Vec<f64> = (0..b * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..b * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let want = (0..b)
            .map(|i| 2.0 - 2.0 * cosine(&q[i * d..(i + 1) * d], &t[i * d..(i + 1) * d]))
            .sum::<f64>() / b as f64;
        let qt = Tensor::new(&[b, d], q.clone()).unwrap();
        let tt = Tensor::new(&[b, d], t).unwrap();
        let got = fcl_loss(&qt, &tt).unwrap();
        prop_assert!((got - want).abs() < 1e-9);
        prop_assert!((-1e-12..=4.0 + 1e-12).contains(&got));
        let scaled = Tensor::new(&[b, d], q.iter().map(|v| v * k).collect()).unwrap();
        prop_assert!((fcl_loss(&scaled, &tt).unwrap() - got).abs() < 1e-9);
        prop_assert!(fcl_loss(&qt, &qt).unwrap().abs() < 1e-9);
    }

    #[test]
    fn ewc_matches_loop_and_its_gradient(seed in any::<u64>()) {
        let mut r = rng(seed);
        let shapes: [&[usize]; 2] = [&[2, 3], &[4]];
        let theta = random_params(&mut r, &shapes, -1.0, 1.0);
        let star = random_params(&mut r, &shapes, -1.0, 1.0);
        let fisher = random_params(&mut r, &shapes, 0.0, 3.0);
        let anchor = FisherAnchor::new(fisher.clone(), star.clone(), 1).unwrap();
        let (th, st, fi) = (theta.flat(), star.flat(), fisher.flat());
        let mut want = 0.0f64;
        for i in 0..10 {
            let d = th[i] as f64 - st[i] as f64;
            want += fi[i] as f64 * d * d;
        }
        prop_assert!((ewc_penalty(&theta, &anchor).unwrap() - want).abs() < 1e-9 * want.max(1.0));
        prop_assert_eq!(ewc_penalty(&star, &anchor).unwrap(), 0.0);

        let mut tracked = theta.clone();
        tracked.set_tracked(true);
        let mut tape = Tape::<f32>::new();
        let v = tracked.bind(&mut tape);
        let l = ewc_penalty_tape(&mut tape, &v, &anchor).unwrap();
        prop_assert!((tape.scalar(l) as f64 - want).abs() < 1e-4 * want.max(1.0));
        let g = tape.backward(l).unwrap();
        let grads: Vec<f32> = v.iter().flat_map(|&x| g.get(x).unwrap().to_vec()).collect();
        for i in 0..10 {
            prop_assert!((grads[i] - 2.0 * fi[i] * (th[i] - st[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn fisher_matches_per_sample_loop(seed in any::<u64>(), n in 1usize..8) {
        let mut r = rng(seed);
        let w: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let xs: Vec<[f64; 3]> = (0..n).map(|_| [r.random(), r.random(), r.random()]).collect();
        let ys: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let mut params = ParamSet::<f64>::new();
        params.push("w", Tensor::new(&[3], w.clone()).unwrap().tracked());
        let got = empirical_fisher(&params, n, |tape, v, i| {
            let x = tape.constant(Tensor::new(&[3], xs[i].to_vec())?);
            let p = tape.mul(v[0], x)?;
            let s = tape.sum(p);
            let e = tape.add_scalar(s, -ys[i]);
            let sq = tape.square(e);
            Ok(tape.sum(sq))
        })
        .unwrap();
        // d/dw (w.x - y)^2 = 2 (w.x - y) x
        let mut want = [0.0f64; 3];
        for i in 0..n {
            let e: f64 = w.iter().zip(&xs[i]).map(|(a, b)| a * b).sum::<f64>() - ys[i];
            for j in 0..3 {
                want[j] += (2.0 * e * xs[i][j]).powi(2) / n as f64;
            }
        }
        for (g, w) in got.flat().iter().zip(want) {
            prop_assert!((g - w).abs() < 1e-12 * w.max(1.0));
        }
    }
}

#[test]
fn ema_endpoints_are_exact() {
    for mu in [0.0, 1.0] {
        let (mut s, _, _, _) = setup(1, mu);
        let key_before = (s.key_f.clone(), s.key_pro.clone());
        for (_, t) in s.query_f.iter_mut().chain(s.query_pro.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v += 0.25);
        }
        s.ema_update().unwrap();
        if mu == 0.0 {
            assert_eq!(s.key_f.flat(), s.query_f.flat());
            assert_eq!(s.key_pro.flat(), s.query_pro.flat());
        } else {
            assert_eq!(s.key_f.flat(), key_before.0.flat());
            assert_eq!(s.key_pro.flat(), key_before.1.flat());
        }
    }
}

#[test]
fn key_follows_query_by_ema_only() {
    let (mut s, anchor, day, night) = setup(2, 0.99);
    let old_key: Vec<f32> = s.key_f.flat().into_iter().chain(s.key_pro.flat()).collect();
    step(&mut s, &anchor, &day, &night, &cfg(0.9));
    let new_q: Vec<f32> = s.query_f.flat().into_iter().chain(s.query_pro.flat()).collect();
    let new_key: Vec<f32> = s.key_f.flat().into_iter().chain(s.key_pro.flat()).collect();
    let mut moved = 0.0f32;
    for ((k0, k1), q) in old_key.iter().zip(&new_key).zip(&new_q) {
        let want = 0.99 * k0 + 0.01 * q;
        assert!((k1 - want).abs() <= 1e-6 * (1.0 + want.abs()));
        // The key moves at most 1% of its gap to the query.
        assert!((k1 - k0).abs() <= 0.01 * (q - k0).abs() + 1e-6);
        moved = moved.max((k1 - k0).abs());
    }
    assert!(moved > 0.0);
}

#[test]
fn pure_ewc_step_is_the_penalty_gradient() {
    let (mut s, anchor, day, night) = setup(3, 0.99);
    let (pro0, pre0) = (s.query_pro.clone(), s.predictor.clone());
    let theta0 = s.query_f.flat();
    step(&mut s, &anchor, &day, &night, &cfg(1.0));
    let (f, st) = (anchor.fisher.flat(), anchor.theta_star.flat());
    for (i, (&new, &old)) in s.query_f.flat().iter().zip(&theta0).enumerate() {
        let want = old - 0.05 * 2.0 * f[i] * (old - st[i]);
        assert!((new - want).abs() < 1e-6, "entry {i}: {new} vs {want}");
    }
    assert_eq!(s.query_pro.flat(), pro0.flat());
    assert_eq!(s.predictor.flat(), pre0.flat());
}

#[test]
fn contrastive_only_step_ignores_the_anchor() {
    let (s0, anchor, day, night) = setup(4, 0.99);
    let mut other = anchor.clone();
    for (_, t) in other.fisher.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    }
    let (mut a, mut b) = (s0.clone(), s0.clone());
    step(&mut a, &anchor, &day, &night, &cfg(0.0));
    step(&mut b, &other, &day, &night, &cfg(0.0));
    assert_eq!(a, b);
    assert_ne!(a.query_f, s0.query_f);
}

#[test]
fn steps_are_reproducible_and_bad_config_is_rejected() {
    let (s0, anchor, day, night) = setup(5, 0.99);
    let (mut a, mut b) = (s0.clone(), s0.clone());
    step(&mut a, &anchor, &day, &night, &cfg(0.9));
    step(&mut b, &anchor, &day, &night, &cfg(0.9));
    assert_eq!(a, b);

    let d: Vec<_> = day.iter().collect();
    let n: Vec<_> = night.iter().collect();
    let bad = cfg(1.5);
    let mut c = s0.clone();
    assert!(adapt_step(
        &mut c,
        &anchor,
        &d,
        &n,
        &mut AdaptRngs::new(0),
        &bad,
        &mut AdaptOptim::new(bad.sgd)
    )
    .is_err());
    assert!(adapt_step(
        &mut c,
        &anchor,
        &d,
        &[],
        &mut AdaptRngs::new(0),
        &cfg(0.5),
        &mut AdaptOptim::new(bad.sgd)
    )
    .is_err());
    assert_eq!(c, s0);
}
