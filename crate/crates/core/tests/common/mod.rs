//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use fdcl_core::fourier::ImagePlane;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> ImagePlane {
    ImagePlane::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// Naive 1-D DFT along rows then columns. `inverse` uses the `+i` kernel and
/// divides by `h * w`.
pub fn dft2(data: &[Complex64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let table = |n: usize| -> Vec<Complex64> {
        (0..n)
            .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
            .collect()
    };
    let (tw, th) = (table(w), table(h));
    let mut rows = vec![Complex64::default(); h * w];
    for y in 0..h {
        for v in 0..w {
            let mut acc = Complex64::default();
            for x in 0..w {
                acc += data[y * w + x] * tw[(v * x) % w];
            }
            rows[y * w + v] = acc;
        }
    }
    let mut out = vec![Complex64::default(); h * w];
    for v in 0..w {
        for u in 0..h {
            let mut acc = Complex64::default();
            for y in 0..h {
                acc += rows[y * w + v] * th[(u * y) % h];
            }
            out[u * w + v] = acc;
        }
    }
    if inverse {
        let n = (h * w) as f64;
        out.iter_mut().for_each(|z| *z /= n);
    }
    out
}

/// Is frequency `(u, v)` (uncentred indices) inside the centred square of
/// side `s`? The square covers centred rows `h/2 - s/2 .. h/2 - s/2 + s`.
pub fn in_square(u: usize, v: usize, h: usize, w: usize, s: usize) -> bool {
    if s == 0 {
        return false;
    }
    let cy = (u + h / 2) % h;
    let cx = (v + w / 2) % w;
    let (y0, x0) = (h / 2 - s / 2, w / 2 - s / 2);
    (y0..y0 + s).contains(&cy) && (x0..x0 + s).contains(&cx)
}

pub fn side(h: usize, w: usize, beta: f64) -> usize {
    (beta * h.min(w) as f64 + 1e-9).floor() as usize
}

/// Amplitude swap computed with the naive transform; unclamped planes.
pub fn oracle_fda(src: &ImagePlane, tgt: &ImagePlane, beta: f64) -> Vec<Vec<f64>> {
    let (h, w) = (src.height(), src.width());
    let s = side(h, w, beta);
    (0..src.channels())
        .map(|c| {
            let to_c = |p: &[f32]| p.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect::<Vec<_>>();
            let fs = dft2(&to_c(src.channel(c)), h, w, false);
            let ft = dft2(&to_c(tgt.channel(c)), h, w, false);
            let mixed: Vec<Complex64> = (0..h * w)
                .map(|i| {
                    if in_square(i / w, i % w, h, w, s) {
                        Complex64::from_polar(ft[i].norm(), fs[i].arg())
                    } else {
                        fs[i]
                    }
                })
                .collect();
            dft2(&mixed, h, w, true).into_iter().map(|z| z.re).collect()
        })
        .collect()
}

/// Smallest angle between two phases.
pub fn phase_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}
