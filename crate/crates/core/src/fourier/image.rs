use std::path::Path;

use ::image::{ImageBuffer, Rgb};

use crate::{Error, Result};

/// Planar image with pixels in `[0, 1]`, stored `[channel][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

/// Square crop region, reusable across a day image and its translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropSpec {
    Full,
    Square { x: usize, y: usize, side: usize },
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image", format!("zero-sized image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(
                "image",
                format!("expected 1 or 3 channels, got {channels}"),
            ));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::invalid(
                "image",
                format!(
                    "{height}x{width}x{channels} needs {} pixels, got {}",
                    height * width * channels,
                    pixels.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.pixels[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    pub fn clamp_unit(&mut self) {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn max_abs_diff(&self, other: &ImagePlane) -> f32 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Nearest-neighbour resampling.
    pub fn resize_nearest(&self, height: usize, width: usize) -> ImagePlane {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = vec![0.0; height * width * self.channels];
        for c in 0..self.channels {
            for y in 0..height {
                let sy = y * self.height / height;
                for x in 0..width {
                    let sx = x * self.width / width;
                    out[(c * height + y) * width + x] = self.get(c, sy, sx);
                }
            }
        }
        ImagePlane {
            height,
            width,
            channels: self.channels,
            pixels: out,
        }
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> ImagePlane {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut out = vec![0.0; height * width * self.channels];
        for c in 0..self.channels {
            for y in 0..height {
                let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let ty = fy - y0 as f32;
                for x in 0..width {
                    let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let tx = fx - x0 as f32;
                    let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bot = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    out[(c * height + y) * width + x] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        ImagePlane {
            height,
            width,
            channels: self.channels,
            pixels: out,
        }
    }

    /// Cuts the region and resizes it back to the original size.
    pub fn apply_crop(&self, crop: CropSpec) -> ImagePlane {
        match crop {
            CropSpec::Full => self.clone(),
            CropSpec::Square { x, y, side } => {
                let mut out = vec![0.0; side * side * self.channels];
                for c in 0..self.channels {
                    for yy in 0..side {
                        for xx in 0..side {
                            out[(c * side + yy) * side + xx] = self.get(c, y + yy, x + xx);
                        }
                    }
                }
                let cropped = ImagePlane {
                    height: side,
                    width: side,
                    channels: self.channels,
                    pixels: out,
                };
                cropped.resize_bilinear(self.height, self.width)
            }
        }
    }

    /// Loads PNG or binary PPM; grey images load as one channel.
    pub fn load(path: &Path) -> Result<ImagePlane> {
        let img = ::image::open(path)?;
        if img.color().channel_count() <= 2 {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let px = g.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
            return ImagePlane::new(h as usize, w as usize, 1, px);
        }
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut px = vec![0.0; 3 * w * h];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                px[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 255.0;
            }
        }
        ImagePlane::new(h, w, 3, px)
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            if self.channels == 1 {
                let v = q(self.get(0, y, x));
                Rgb([v, v, v])
            } else {
                Rgb([q(self.get(0, y, x)), q(self.get(1, y, x)), q(self.get(2, y, x))])
            }
        })
    }

    /// Saves as PNG or binary PPM (P6), chosen by extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        let buf = self.to_rgb8();
        match ext.as_str() {
            "ppm" | "pnm" => buf.save_with_format(path, ::image::ImageFormat::Pnm)?,
            _ => buf.save_with_format(path, ::image::ImageFormat::Png)?,
        }
        Ok(())
    }

    /// Lays images out on a grid (row-major) separated by `gap` pixels of white.
    pub fn grid(rows: &[Vec<ImagePlane>], gap: usize) -> Result<ImagePlane> {
        let cell_h = rows.iter().flatten().map(|i| i.height).max().unwrap_or(0);
        let cell_w = rows.iter().flatten().map(|i| i.width).max().unwrap_or(0);
        let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
        if rows.is_empty() || ncols == 0 {
            return Err(Error::invalid("grid", "no images"));
        }
        let h = rows.len() * cell_h + (rows.len() - 1) * gap;
        let w = ncols * cell_w + (ncols - 1) * gap;
        let mut out = ImagePlane::filled(h, w, 3, 1.0)?;
        for (r, row) in rows.iter().enumerate() {
            for (col, img) in row.iter().enumerate() {
                let (oy, ox) = (r * (cell_h + gap), col * (cell_w + gap));
                for c in 0..3 {
                    let src_c = if img.channels == 1 { 0 } else { c };
                    for y in 0..img.height {
                        for x in 0..img.width {
                            out.set(c, oy + y, ox + x, img.get(src_c, y, x));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
