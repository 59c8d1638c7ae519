use rand::Rng;

use super::{IMAGE_SIZE, NUM_CLASSES};
use crate::fourier::ImagePlane;
use crate::par;
use crate::rng::{indexed, Rng as StdRng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Day,
    Night,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Day => "day",
            Domain::Night => "night",
        }
    }
}

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::invalid("bbox", format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn contains_point(&self, x: f32, y: f32) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImagePlane,
    pub annotations: Vec<Annotation>,
    pub domain: Domain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Shape {
    class_id: usize,
    cx: f32,
    cy: f32,
    radius: f32,
    color: [f32; 3],
}

impl Shape {
    /// Coverage test at pixel centre.
    fn covers(&self, x: usize, y: usize) -> bool {
        let px = x as f32 + 0.5;
        let py = y as f32 + 0.5;
        let (dx, dy, r) = (px - self.cx, py - self.cy, self.radius);
        match self.class_id {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= r && dy.abs() <= r,
            _ => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
        }
    }

    fn pixel_range(&self) -> (usize, usize, usize, usize) {
        let lo = |c: f32| (c - self.radius - 1.0).floor().max(0.0) as usize;
        let hi = |c: f32| ((c + self.radius + 1.0).ceil() as usize).min(IMAGE_SIZE);
        (lo(self.cx), hi(self.cx), lo(self.cy), hi(self.cy))
    }

    fn mask(&self) -> Vec<(usize, usize)> {
        let (x0, x1, y0, y1) = self.pixel_range();
        let mut out = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if self.covers(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    fn tight_box(&self) -> Option<BBox> {
        let m = self.mask();
        let x1 = m.iter().map(|p| p.0).min()? as f32;
        let x2 = m.iter().map(|p| p.0).max()? as f32 + 1.0;
        let y1 = m.iter().map(|p| p.1).min()? as f32;
        let y2 = m.iter().map(|p| p.1).max()? as f32 + 1.0;
        BBox::new(x1, y1, x2, y2).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Grating {
    fx: f32,
    fy: f32,
    phase: f32,
    amp: f32,
}

/// Scene content before any domain shift: background and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    base: [f32; 3],
    gratings: [Grating; 2],
    noise_seed: u64,
    shapes: Vec<Shape>,
}

const MIN_RADIUS: f32 = 5.0;
const MAX_RADIUS: f32 = 10.0;

impl SceneLayout {
    pub fn sample(rng: &mut StdRng) -> Self {
        let base = [
            rng.random_range(0.55..0.85),
            rng.random_range(0.55..0.85),
            rng.random_range(0.55..0.85),
        ];
        let mut grating = || Grating {
            fx: rng.random_range(-4.0f32..4.0),
            fy: rng.random_range(-4.0f32..4.0),
            phase: rng.random_range(0.0..std::f32::consts::TAU),
            amp: rng.random_range(0.02..0.05),
        };
        let gratings = [grating(), grating()];
        let noise_seed = rng.random();

        let wanted = rng.random_range(1..=4usize);
        let mut shapes: Vec<Shape> = Vec::with_capacity(wanted);
        let mut boxes: Vec<BBox> = Vec::new();
        for _attempt in 0..64 {
            if shapes.len() == wanted {
                break;
            }
            let radius = rng.random_range(MIN_RADIUS..=MAX_RADIUS);
            let lo = radius + 1.0;
            let hi = IMAGE_SIZE as f32 - radius - 1.0;
            let shape = Shape {
                class_id: rng.random_range(0..NUM_CLASSES),
                cx: rng.random_range(lo..hi),
                cy: rng.random_range(lo..hi),
                radius,
                color: [
                    rng.random_range(0.0..0.35),
                    rng.random_range(0.0..0.35),
                    rng.random_range(0.0..0.35),
                ],
            };
            let Some(b) = shape.tight_box() else { continue };
            // Keep shapes apart (1px gap) so every box has its own centre cell.
            let clear = boxes
                .iter()
                .all(|o| b.x2 + 1.0 <= o.x1 || o.x2 + 1.0 <= b.x1 || b.y2 + 1.0 <= o.y1 || o.y2 + 1.0 <= b.y1);
            let cell = |b: &BBox| {
                let (cx, cy) = b.center();
                ((cx / 8.0) as usize, (cy / 8.0) as usize)
            };
            if clear && boxes.iter().all(|o| cell(o) != cell(&b)) {
                boxes.push(b);
                shapes.push(shape);
            }
        }
        Self {
            base,
            gratings,
            noise_seed,
            shapes,
        }
    }

    pub fn num_objects(&self) -> usize {
        self.shapes.len()
    }

    /// Background intensity without shapes.
    pub fn render_background(&self) -> ImagePlane {
        let n = IMAGE_SIZE;
        let mut img = ImagePlane::filled(n, n, 3, 0.0).expect("valid size");
        let mut noise = indexed(self.noise_seed, Stream::Scenes, 0, 0);
        let tex: Vec<f32> = (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f32 / n as f32, (i % n) as f32 / n as f32);
                let g: f32 = self
                    .gratings
                    .iter()
                    .map(|g| g.amp * (std::f32::consts::TAU * (g.fx * x + g.fy * y) + g.phase).sin())
                    .sum();
                g + noise.random_range(-0.02..0.02)
            })
            .collect();
        for c in 0..3 {
            for (p, t) in img.channel_mut(c).iter_mut().zip(&tex) {
                *p = (self.base[c] + t).clamp(0.0, 1.0);
            }
        }
        img
    }

    /// Day rendering and annotations.
    pub fn render_day(&self) -> (ImagePlane, Vec<Annotation>) {
        let mut img = self.render_background();
        let mut anns = Vec::with_capacity(self.shapes.len());
        for s in &self.shapes {
            for (x, y) in s.mask() {
                for c in 0..3 {
                    img.set(c, y, x, s.color[c]);
                }
            }
            anns.push(Annotation {
                class_id: s.class_id,
                bbox: s.tight_box().expect("placed shapes are non-empty"),
            });
        }
        (img, anns)
    }

    /// Pixel coordinates covered by object `i`.
    pub fn object_pixels(&self, i: usize) -> Vec<(usize, usize)> {
        self.shapes[i].mask()
    }
}

/// Night transform: brightness scale, low-frequency colour cast, noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NightShift {
    pub brightness: f32,
    cast: [[f32; 3]; 2],
    noise_seed: u64,
}

impl NightShift {
    pub fn sample(rng: &mut StdRng) -> Self {
        let brightness = rng.random_range(0.1..=0.3);
        let mut cast = [[0.0f32; 3]; 2];
        for row in cast.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.random_range(0.0..0.06);
            }
        }
        Self {
            brightness,
            cast,
            noise_seed: rng.random(),
        }
    }

    pub fn apply(&self, img: &ImagePlane) -> ImagePlane {
        let (h, w) = (img.height(), img.width());
        let mut out = img.clone();
        let mut noise = indexed(self.noise_seed, Stream::Night, 0, 0);
        let normal = rand_distr::Normal::new(0.0f32, 0.02).expect("valid sigma");
        for c in 0..3 {
            let ch = out.channel_mut(c);
            for y in 0..h {
                // Vertical gradient between the two cast colours.
                let t = y as f32 / (h - 1).max(1) as f32;
                let cast = (1.0 - t) * self.cast[0][c] + t * self.cast[1][c];
                for x in 0..w {
                    let v = &mut ch[y * w + x];
                    let n: f32 = rand_distr::Distribution::sample(&normal, &mut noise);
                    *v = (*v * self.brightness + cast + n).clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

/// One synthetic scene. Day and night scenes drawn from generators with the
/// same state share their layout.
pub fn gen_scene(rng: &mut StdRng, domain: Domain) -> Scene {
    let layout = SceneLayout::sample(rng);
    let (day, annotations) = layout.render_day();
    let image = match domain {
        Domain::Day => day,
        Domain::Night => NightShift::sample(rng).apply(&day),
    };
    Scene {
        image,
        annotations,
        domain,
    }
}

/// `count` scenes; scene `i` depends only on `(seed, family, i)`.
pub fn gen_scenes(seed: u64, family: u64, count: usize, domain: Domain) -> Vec<Scene> {
    par::map_range(count, |i| {
        let mut rng = indexed(seed, Stream::Data, family, i as u64);
        gen_scene(&mut rng, domain)
    })
}
