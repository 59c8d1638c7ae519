//! Fourier analysis/synthesis and amplitude-swap image translation.
//!
//! Spectra are stored centred: the zero-frequency bin sits at
//! `(H / 2, W / 2)` (integer division). The translation mask is a square of
//! side `floor(beta * min(H, W))` around that bin, so `beta` is a fraction
//! of the image side, not of its area.

mod beta;
mod fda;
mod image;
mod mask;
mod spectrum;

pub use beta::{sample_beta, BetaSchedule};
pub use fda::{fda_translate, fda_translate_raw, translate_spectrum};
pub use image::{CropSpec, ImagePlane};
pub use mask::{make_mask, mask_side, BetaMask};
pub use spectrum::{analyze, synthesize, Spectrum};
