use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::ImagePlane;
use crate::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Per-channel complex spectrum, zero frequency at `(H / 2, W / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    bins: Vec<Vec<Complex64>>,
}

/// Unnormalised 2-D DFT (forward) or its exact inverse, in place, standard layout.
fn fft2d(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let (row, col) = if inverse {
            (p.plan_fft_inverse(w), p.plan_fft_inverse(h))
        } else {
            (p.plan_fft_forward(w), p.plan_fft_forward(h))
        };
        row.process(data);
        let mut t = vec![Complex64::default(); h * w];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = data[y * w + x];
            }
        }
        col.process(&mut t);
        let scale = if inverse { 1.0 / (h * w) as f64 } else { 1.0 };
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = t[x * h + y] * scale;
            }
        }
    });
}

/// Moves bin `(k, l)` of the standard layout to `((k + H/2) % H, (l + W/2) % W)`.
fn center(data: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); h * w];
    for y in 0..h {
        for x in 0..w {
            out[((y + h / 2) % h) * w + (x + w / 2) % w] = data[y * w + x];
        }
    }
    out
}

fn uncenter(data: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = data[((y + h / 2) % h) * w + (x + w / 2) % w];
        }
    }
    out
}

/// Argument mapped into `(-pi, pi]`.
pub(crate) fn phase_of(z: Complex64) -> f64 {
    let p = z.im.atan2(z.re);
    if p <= -PI {
        p + 2.0 * PI
    } else {
        p
    }
}

impl Spectrum {
    /// Builds a spectrum from centred bins, one vector of `H * W` per channel.
    pub fn from_centered(height: usize, width: usize, bins: Vec<Vec<Complex64>>) -> Result<Self> {
        if height == 0 || width == 0 || bins.is_empty() {
            return Err(Error::invalid("spectrum", "empty spectrum"));
        }
        if bins.iter().any(|b| b.len() != height * width) {
            return Err(Error::invalid(
                "spectrum",
                format!("every channel must hold {} bins", height * width),
            ));
        }
        Ok(Self { height, width, bins })
    }

    /// Builds a spectrum from centred amplitude and phase planes.
    pub fn from_polar(height: usize, width: usize, amplitude: &[Vec<f64>], phase: &[Vec<f64>]) -> Result<Self> {
        if amplitude.len() != phase.len() {
            return Err(Error::invalid("spectrum", "amplitude/phase channel counts differ"));
        }
        let bins = amplitude
            .iter()
            .zip(phase)
            .map(|(a, p)| a.iter().zip(p).map(|(&r, &t)| Complex64::from_polar(r, t)).collect())
            .collect();
        Self::from_centered(height, width, bins)
    }

    /// Forward transform of real-valued planes (`H * W` each).
    pub fn from_real_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("analyze", "zero-sized image"));
        }
        let bins = planes
            .iter()
            .map(|p| {
                let mut d: Vec<Complex64> = p.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                fft2d(&mut d, height, width, false);
                center(&d, height, width)
            })
            .collect();
        Self::from_centered(height, width, bins)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.bins.len()
    }

    /// Centred bins of channel `c`.
    pub fn bins(&self, c: usize) -> &[Complex64] {
        &self.bins[c]
    }

    pub fn bin(&self, c: usize, y: usize, x: usize) -> Complex64 {
        self.bins[c][y * self.width + x]
    }

    /// Bins of channel `c` in standard (uncentred) DFT layout.
    pub fn uncentered(&self, c: usize) -> Vec<Complex64> {
        uncenter(&self.bins[c], self.height, self.width)
    }

    pub fn amplitude(&self, c: usize) -> Vec<f64> {
        self.bins[c].iter().map(|z| z.norm()).collect()
    }

    pub fn phase(&self, c: usize) -> Vec<f64> {
        self.bins[c].iter().map(|&z| phase_of(z)).collect()
    }

    /// Inverse transform, real part, no clamping.
    pub fn to_real_planes(&self) -> Vec<Vec<f64>> {
        self.bins
            .iter()
            .map(|b| {
                let mut d = uncenter(b, self.height, self.width);
                fft2d(&mut d, self.height, self.width, true);
                d.into_iter().map(|z| z.re).collect()
            })
            .collect()
    }
}

/// Forward DFT of every channel, centred.
pub fn analyze(img: &ImagePlane) -> Result<Spectrum> {
    if !img.is_finite() {
        return Err(Error::invalid("analyze", "image contains non-finite pixels"));
    }
    let planes: Vec<Vec<f64>> = (0..img.channels())
        .map(|c| img.channel(c).iter().map(|&v| v as f64).collect())
        .collect();
    Spectrum::from_real_planes(img.height(), img.width(), &planes)
}

/// Inverse DFT, real part, clamped to `[0, 1]`.
pub fn synthesize(spec: &Spectrum) -> Result<ImagePlane> {
    let channels = spec.channels();
    if channels != 1 && channels != 3 {
        return Err(Error::invalid(
            "synthesize",
            format!("expected 1 or 3 channels, got {channels}"),
        ));
    }
    let pixels = spec
        .to_real_planes()
        .into_iter()
        .flatten()
        .map(|v| v.clamp(0.0, 1.0) as f32)
        .collect();
    ImagePlane::new(spec.height(), spec.width(), channels, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_dc_only() {
        let n = 6;
        let c = 0.37f32;
        let img = ImagePlane::filled(n, n, 1, c).unwrap();
        let s = analyze(&img).unwrap();
        let amp = s.amplitude(0);
        for y in 0..n {
            for x in 0..n {
                let a = amp[y * n + x];
                if (y, x) == (n / 2, n / 2) {
                    assert!((a - c as f64 * (n * n) as f64).abs() < 1e-6);
                } else {
                    assert!(a < 1e-6, "bin ({y},{x}) = {a}");
                }
            }
        }
    }

    #[test]
    fn two_by_two_matches_hand_dft() {
        let img = ImagePlane::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = analyze(&img).unwrap();
        let raw = s.uncentered(0);
        let want = [10.0, -2.0, -4.0, 0.0];
        for (z, w) in raw.iter().zip(want) {
            assert!((z.re - w).abs() < 1e-12 && z.im.abs() < 1e-12, "{z} vs {w}");
        }
        // Centred: DC moves to (1, 1).
        assert!((s.bin(0, 1, 1).re - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_spectrum_synthesizes_black() {
        let s = Spectrum::from_centered(4, 4, vec![vec![Complex64::default(); 16]]).unwrap();
        let img = synthesize(&s).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conjugate_pair_gives_cosine_wave() {
        // X[0,1] = X[0,3]* = N^2 / 2 * e^{i phi} gives cos(2 pi x / 4 + phi).
        let (n, phi) = (4usize, 0.3f64);
        let mut raw = vec![Complex64::default(); n * n];
        let half = (n * n) as f64 / 2.0;
        raw[1] = Complex64::from_polar(half, phi);
        raw[3] = Complex64::from_polar(half, -phi);
        let s = Spectrum::from_centered(n, n, vec![center(&raw, n, n)]).unwrap();
        let planes = s.to_real_planes();
        for y in 0..n {
            for x in 0..n {
                let want = (2.0 * PI * x as f64 / n as f64 + phi).cos();
                assert!((planes[0][y * n + x] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phase_is_in_half_open_interval() {
        assert_eq!(phase_of(Complex64::new(-1.0, -0.0)), PI);
        assert_eq!(phase_of(Complex64::new(-1.0, 0.0)), PI);
    }

    #[test]
    fn rejects_nonfinite_input() {
        let img = ImagePlane::new(1, 2, 1, vec![0.0, f32::NAN]).unwrap();
        assert!(analyze(&img).is_err());
    }
}
