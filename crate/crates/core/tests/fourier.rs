mod common;

use common::{oracle_fda, phase_gap, random_image, rng};
use fdcl_core::fourier::{
    analyze, fda_translate, fda_translate_raw, make_mask, mask_side, sample_beta, synthesize, translate_spectrum,
    BetaSchedule, ImagePlane, Spectrum,
};
use fdcl_core::pipeline::{cmd_translate, TranslateOptions};
use proptest::prelude::*;

fn max_plane_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn planes(img: &ImagePlane) -> Vec<Vec<f64>> {
    (0..img.channels())
        .map(|c| img.channel(c).iter().map(|&v| v as f64).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matches_naive_dft(h in 2usize..13, w in 2usize..13, three in any::<bool>(), beta in 0.0f64..0.999, seed in any::<u64>()) {
        let c = if three { 3 } else { 1 };
        let mut r = rng(seed);
        let src = random_image(&mut r, h, w, c);
        let tgt = random_image(&mut r, h, w, c);
        let got = fda_translate_raw(&src, &tgt, beta).unwrap();
        let want = oracle_fda(&src, &tgt, beta);
        prop_assert!(max_plane_diff(&got, &want) < 1e-6);
    }

    #[test]
    fn self_target_and_zero_beta_are_identity(h in 1usize..17, w in 1usize..17, beta in 0.0f64..0.999, seed in any::<u64>()) {
        let mut r = rng(seed);
        let src = random_image(&mut r, h, w, 3);
        let other = random_image(&mut r, h, w, 3);
        prop_assert!(fda_translate(&src, &src, beta).unwrap().max_abs_diff(&src) < 1e-5);
        prop_assert!(fda_translate(&src, &other, 0.0).unwrap().max_abs_diff(&src) < 1e-5);
    }

    #[test]
    fn roundtrip(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let img = random_image(&mut rng(seed), h, w, 3);
        let back = synthesize(&analyze(&img).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn amplitude_swapped_inside_kept_outside(h in 2usize..12, w in 2usize..12, beta in 0.0f64..0.999, seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = analyze(&random_image(&mut r, h, w, 3)).unwrap();
        let t = analyze(&random_image(&mut r, h, w, 3)).unwrap();
        let mask = make_mask(h, w, beta).unwrap();
        let out = translate_spectrum(&s, &t, &mask).unwrap();
        for c in 0..3 {
            for (i, &inside) in mask.grid().iter().enumerate() {
                let want = if inside { t.bins(c)[i].norm() } else { s.bins(c)[i].norm() };
                prop_assert!((out.bins(c)[i].norm() - want).abs() < 1e-9);
                if s.bins(c)[i].norm() > 1e-9 {
                    prop_assert!(phase_gap(out.bins(c)[i].arg(), s.bins(c)[i].arg()) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn mask_grows_with_beta(h in 1usize..40, w in 1usize..40, a in 0.0f64..0.999, b in 0.0f64..0.999) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (m1, m2) = (make_mask(h, w, lo).unwrap(), make_mask(h, w, hi).unwrap());
        for (x, y) in m1.grid().iter().zip(m2.grid()) {
            prop_assert!(!x || *y);
        }
        prop_assert_eq!(m2.count(), m2.side() * m2.side());
    }
}

#[test]
fn hundred_pixel_one_percent_is_the_centre_bin() {
    let m = make_mask(100, 100, 0.01).unwrap();
    assert_eq!(m.side(), 1);
    assert_eq!(m.count(), 1);
    assert!(m.contains(50, 50));
    assert_eq!(make_mask(64, 64, 0.0).unwrap().count(), 0);
    assert!(make_mask(8, 8, 1.0).is_err());
    assert!(make_mask(8, 8, -0.1).is_err());
    assert_eq!(mask_side(720, 1280, 0.01).unwrap(), 7);
}

#[test]
fn phase_preserved_on_strong_bins() {
    let mut r = rng(11);
    for _ in 0..10 {
        let src = random_image(&mut r, 32, 24, 3);
        let tgt = random_image(&mut r, 32, 24, 3);
        let raw = fda_translate_raw(&src, &tgt, 0.3).unwrap();
        let out = Spectrum::from_real_planes(32, 24, &raw).unwrap();
        let s = analyze(&src).unwrap();
        for c in 0..3 {
            let amp = s.amplitude(c);
            let top = amp.iter().cloned().fold(0.0, f64::max);
            for (i, (&a, (&po, &ps))) in amp.iter().zip(out.phase(c).iter().zip(&s.phase(c))).enumerate() {
                if a > 0.01 * top {
                    assert!(phase_gap(po, ps) < 1e-4, "bin {i}: {po} vs {ps}");
                }
            }
        }
    }
}

#[test]
fn translation_is_idempotent_in_amplitude_for_odd_sides() {
    let mut r = rng(5);
    for beta in [0.05, 0.15, 0.25, 0.45] {
        let src = random_image(&mut r, 20, 20, 3);
        let tgt = random_image(&mut r, 20, 20, 3);
        let mask = make_mask(20, 20, beta).unwrap();
        assert_eq!(mask.side() % 2, 1, "beta {beta}");
        let once = fda_translate_raw(&src, &tgt, beta).unwrap();
        let s1 = Spectrum::from_real_planes(20, 20, &once).unwrap();
        let s2 = translate_spectrum(&s1, &analyze(&tgt).unwrap(), &mask).unwrap();
        for c in 0..3 {
            for (i, &inside) in mask.grid().iter().enumerate() {
                if inside {
                    assert!((s2.bins(c)[i].norm() - s1.bins(c)[i].norm()).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn translation_reduces_to_oracle_on_square_images() {
    let mut r = rng(64);
    for _ in 0..3 {
        let src = random_image(&mut r, 64, 64, 3);
        let tgt = random_image(&mut r, 64, 64, 3);
        for beta in [0.01, 0.05, 0.11, 0.56] {
            let got = fda_translate_raw(&src, &tgt, beta).unwrap();
            assert!(max_plane_diff(&got, &oracle_fda(&src, &tgt, beta)) < 1e-6);
        }
    }
    // Clamping is the only difference between the two outputs.
    let src = random_image(&mut r, 64, 64, 3);
    let tgt = random_image(&mut r, 64, 64, 3);
    let clamped: Vec<Vec<f64>> = fda_translate_raw(&src, &tgt, 0.1)
        .unwrap()
        .into_iter()
        .map(|p| p.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
        .collect();
    assert!(max_plane_diff(&planes(&fda_translate(&src, &tgt, 0.1).unwrap()), &clamped) < 1e-6);
}

#[test]
fn target_of_another_size_is_resampled() {
    let mut r = rng(8);
    let src = random_image(&mut r, 16, 16, 3);
    let tgt = random_image(&mut r, 32, 40, 3);
    let out = fda_translate(&src, &tgt, 0.2).unwrap();
    assert_eq!((out.height(), out.width()), (16, 16));
    assert!(fda_translate(&src, &random_image(&mut r, 16, 16, 1), 0.2).is_err());
}

#[test]
fn beta_schedule_statistics() {
    let mut r = rng(2024);
    let n = 10_000;
    let low = (0..n).filter(|_| sample_beta(&mut r) == 0.01).count();
    let frac = low as f64 / n as f64;
    assert!((0.88..=0.92).contains(&frac), "{frac}");

    let single = BetaSchedule::new(vec![(0.01, 1.0)]).unwrap();
    assert!((0..100).all(|_| single.sample(&mut r) == 0.01));
    assert!(BetaSchedule::new(vec![(0.01, 0.5)]).is_err());
    assert!(BetaSchedule::new(vec![(1.2, 1.0)]).is_err());
}

#[test]
fn translate_against_itself_reproduces_source() {
    let dir = tempfile::tempdir().unwrap();
    let (src, out) = (dir.path().join("src"), dir.path().join("out"));
    std::fs::create_dir(&src).unwrap();
    let img = random_image(&mut rng(3), 24, 24, 3);
    img.save(&src.join("a.png")).unwrap();
    let summary = cmd_translate(&TranslateOptions {
        src_dir: src.clone(),
        night_dir: src.clone(),
        out_dir: out.clone(),
        beta: None,
        schedule: BetaSchedule::standard(),
        seed: 1,
        sweep: false,
    })
    .unwrap();
    assert_eq!(summary.written.len(), 1);
    let a = ImagePlane::load(&src.join("a.png")).unwrap();
    let b = ImagePlane::load(&out.join("a.png")).unwrap();
    assert_eq!(a, b);
}
