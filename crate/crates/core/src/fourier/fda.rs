use num_complex::Complex64;

use super::spectrum::phase_of;
use super::{analyze, make_mask, synthesize, BetaMask, ImagePlane, Spectrum};
use crate::{Error, Result};

/// Amplitude swap inside `mask`, source phase everywhere.
pub fn translate_spectrum(src: &Spectrum, tgt: &Spectrum, mask: &BetaMask) -> Result<Spectrum> {
    if src.channels() != tgt.channels() {
        return Err(Error::invalid(
            "fda_translate",
            format!("channel mismatch: {} vs {}", src.channels(), tgt.channels()),
        ));
    }
    if (src.height(), src.width()) != (tgt.height(), tgt.width())
        || (mask.height(), mask.width()) != (src.height(), src.width())
    {
        return Err(Error::invalid("fda_translate", "spectrum and mask dimensions differ"));
    }
    let bins = (0..src.channels())
        .map(|c| {
            src.bins(c)
                .iter()
                .zip(tgt.bins(c))
                .zip(mask.grid())
                .map(|((&s, &t), &inside)| {
                    if inside {
                        Complex64::from_polar(t.norm(), phase_of(s))
                    } else {
                        s
                    }
                })
                .collect()
        })
        .collect();
    Spectrum::from_centered(src.height(), src.width(), bins)
}

fn prepare(src: &ImagePlane, tgt: &ImagePlane, beta: f64) -> Result<(Spectrum, Spectrum, BetaMask)> {
    if src.channels() != tgt.channels() {
        return Err(Error::invalid(
            "fda_translate",
            format!("channel mismatch: {} vs {}", src.channels(), tgt.channels()),
        ));
    }
    let mask = make_mask(src.height(), src.width(), beta)?;
    let tgt = tgt.resize_nearest(src.height(), src.width());
    Ok((analyze(src)?, analyze(&tgt)?, mask))
}

/// Replaces the low-frequency amplitude of `src` with that of `tgt` and keeps
/// the phase of `src`. `tgt` is resampled to the source size first. The
/// result is clamped to `[0, 1]`.
pub fn fda_translate(src: &ImagePlane, tgt: &ImagePlane, beta: f64) -> Result<ImagePlane> {
    let (s, t, mask) = prepare(src, tgt, beta)?;
    synthesize(&translate_spectrum(&s, &t, &mask)?)
}

/// Same as [`fda_translate`] but returns the real-valued planes before
/// clamping and quantisation.
pub fn fda_translate_raw(src: &ImagePlane, tgt: &ImagePlane, beta: f64) -> Result<Vec<Vec<f64>>> {
    let (s, t, mask) = prepare(src, tgt, beta)?;
    Ok(translate_spectrum(&s, &t, &mask)?.to_real_planes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(h: usize, w: usize, c: usize, seed: u64) -> ImagePlane {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn self_target_is_identity() {
        let s = random(16, 12, 3, 1);
        for beta in [0.0, 0.1, 0.5, 0.9] {
            let out = fda_translate(&s, &s, beta).unwrap();
            assert!(out.max_abs_diff(&s) < 1e-5, "beta {beta}");
        }
    }

    #[test]
    fn zero_beta_is_identity() {
        let s = random(16, 16, 3, 2);
        let t = random(16, 16, 3, 3);
        assert!(fda_translate(&s, &t, 0.0).unwrap().max_abs_diff(&s) < 1e-5);
    }

    #[test]
    fn inputs_are_untouched_and_target_resampled() {
        let s = random(16, 16, 3, 4);
        let t = random(8, 8, 3, 5);
        let (s0, t0) = (s.clone(), t.clone());
        let out = fda_translate(&s, &t, 0.2).unwrap();
        assert_eq!((out.height(), out.width()), (16, 16));
        assert_eq!(s, s0);
        assert_eq!(t, t0);
    }

    #[test]
    fn errors() {
        let s = random(8, 8, 3, 6);
        let g = random(8, 8, 1, 7);
        assert!(fda_translate(&s, &g, 0.1).is_err());
        assert!(fda_translate(&s, &s, 1.0).is_err());
        assert!(fda_translate(&s, &s, -0.1).is_err());
    }
}
