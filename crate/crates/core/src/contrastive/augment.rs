use rand::Rng;

use crate::fourier::{CropSpec, ImagePlane};

/// Chance of a random square crop instead of the full image.
pub const CROP_PROBABILITY: f64 = 0.25;

/// Full image with probability `1 - p_crop`, else a square of side drawn
/// uniformly from `ceil(min/2)..=min` at a uniform position.
pub fn sample_crop<R: Rng + ?Sized>(height: usize, width: usize, p_crop: f64, rng: &mut R) -> CropSpec {
    if rng.random::<f64>() >= p_crop {
        return CropSpec::Full;
    }
    let min = height.min(width);
    let lo = min.div_ceil(2);
    if min < 2 {
        return CropSpec::Full;
    }
    let side = rng.random_range(lo..=min);
    CropSpec::Square {
        x: rng.random_range(0..=width - side),
        y: rng.random_range(0..=height - side),
        side,
    }
}

/// Augmented image and the crop used, so the paired image can be cut identically.
pub fn augment<R: Rng + ?Sized>(img: &ImagePlane, rng: &mut R) -> (ImagePlane, CropSpec) {
    let crop = sample_crop(img.height(), img.width(), CROP_PROBABILITY, rng);
    (img.apply_crop(crop), crop)
}
