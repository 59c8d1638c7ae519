use rand::Rng;

use super::{GRID, IMAGE_SIZE, NUM_CLASSES};
use crate::fourier::ImagePlane;
use crate::rng::Rng as StdRng;
use crate::tensor::{ParamSet, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Widths of the feature extractor.
///
/// Layout: 2x2 average pool, then three `3x3 conv -> ReLU` blocks (the first
/// two followed by a 2x2 average pool), then a `1x1 conv -> ReLU` lifting to
/// `feature_dim` channels. Output stride is 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub channels: [usize; 3],
    pub feature_dim: usize,
    pub input_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: [8, 16, 24],
            feature_dim: 512,
            input_channels: 3,
        }
    }
}

/// Output stride of the feature extractor.
pub const STRIDE: usize = 8;

fn uniform(rng: &mut StdRng, shape: &[usize], bound: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

impl BackboneConfig {
    /// Freshly initialised feature-extractor parameters.
    pub fn init(&self, rng: &mut StdRng) -> ParamSet {
        let mut p = ParamSet::new();
        let mut cin = self.input_channels;
        for (i, &cout) in self.channels.iter().enumerate() {
            let bound = (6.0 / (cin * 9) as f32).sqrt();
            p.push(
                format!("conv{}.w", i + 1),
                uniform(rng, &[cout, cin, 3, 3], bound).tracked(),
            );
            p.push(format!("conv{}.b", i + 1), Tensor::zeros(&[cout]).tracked());
            cin = cout;
        }
        let bound = (6.0 / cin as f32).sqrt();
        p.push("embed.w", uniform(rng, &[self.feature_dim, cin, 1, 1], bound).tracked());
        p.push("embed.b", Tensor::zeros(&[self.feature_dim]).tracked());
        p
    }

    /// Decoder heads: per-cell class logits and box deltas from 1x1 convs.
    pub fn init_decoder(&self, rng: &mut StdRng) -> ParamSet {
        let f = self.feature_dim;
        let bound = (1.0 / f as f32).sqrt();
        // Prior probability 0.01 on every class at initialisation.
        let prior = -((1.0f32 - 0.01) / 0.01).ln();
        let mut p = ParamSet::new();
        p.push("cls.w", uniform(rng, &[NUM_CLASSES, f, 1, 1], bound).tracked());
        p.push("cls.b", Tensor::full(&[NUM_CLASSES], prior).tracked());
        p.push("box.w", uniform(rng, &[4, f, 1, 1], bound * 0.1).tracked());
        p.push("box.b", Tensor::zeros(&[4]).tracked());
        p
    }
}

/// Feature extractor forward: `[N, C, H, W] -> [N, F, H/8, W/8]`.
/// `f` holds the vars bound from [`BackboneConfig::init`] in order.
pub fn features_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, f: &[Var]) -> Result<Var> {
    if f.len() != 8 {
        return Err(Error::Misaligned(format!(
            "feature extractor expects 8 tensors, got {}",
            f.len()
        )));
    }
    let mut h = tape.avg_pool2d(x, 2)?;
    for block in 0..3 {
        h = tape.conv2d(h, f[2 * block], f[2 * block + 1])?;
        h = tape.relu(h);
        if block < 2 {
            h = tape.avg_pool2d(h, 2)?;
        }
    }
    let h = tape.conv2d(h, f[6], f[7])?;
    Ok(tape.relu(h))
}

/// Decoder forward: class logits `[N, 3, G, G]` and box deltas `[N, 4, G, G]`.
pub fn decoder_forward<T: Scalar>(tape: &mut Tape<T>, feat: Var, d: &[Var]) -> Result<(Var, Var)> {
    if d.len() != 4 {
        return Err(Error::Misaligned(format!("decoder expects 4 tensors, got {}", d.len())));
    }
    let logits = tape.conv2d(feat, d[0], d[1])?;
    let deltas = tape.conv2d(feat, d[2], d[3])?;
    Ok((logits, deltas))
}

/// Stacks images into `[N, C, H, W]`.
pub fn images_to_tensor<T: Scalar>(images: &[&ImagePlane]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("images_to_tensor", "empty batch"))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels(), img.height(), img.width()) != (c, h, w) {
            return Err(Error::shape(
                "images_to_tensor",
                &[c, h, w],
                &[img.channels(), img.height(), img.width()],
            ));
        }
        data.extend(img.pixels().iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(&[images.len(), c, h, w], data)
}

/// Feature extractor parameters `theta_f` and decoder parameters `theta_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: BackboneConfig,
    pub features: ParamSet,
    pub decoder: ParamSet,
}

/// Per-cell outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetOutput {
    /// `[3, G, G]`
    pub logits: Tensor,
    /// `[4, G, G]`: centre offsets within the cell, log width, log height.
    pub deltas: Tensor,
}

impl DetOutput {
    pub fn grid(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn logit(&self, class: usize, row: usize, col: usize) -> f32 {
        let g = self.grid();
        self.logits.data()[(class * g + row) * g + col]
    }

    pub fn delta(&self, k: usize, row: usize, col: usize) -> f32 {
        let g = self.grid();
        self.deltas.data()[(k * g + row) * g + col]
    }
}

impl DetectorModel {
    pub fn new(config: BackboneConfig, rng: &mut StdRng) -> Self {
        let features = config.init(rng);
        let decoder = config.init_decoder(rng);
        Self {
            config,
            features,
            decoder,
        }
    }

    /// All parameters with `f.` / `d.` prefixes, for checkpoints.
    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, t) in self.features.iter() {
            p.push(format!("f.{n}"), t.clone());
        }
        for (n, t) in self.decoder.iter() {
            p.push(format!("d.{n}"), t.clone());
        }
        p
    }

    /// Restores values from [`to_params`](Self::to_params) output.
    pub fn load_params(&mut self, p: &ParamSet) -> Result<()> {
        let mut f = ParamSet::new();
        let mut d = ParamSet::new();
        for (n, t) in p.iter() {
            if let Some(rest) = n.strip_prefix("f.") {
                f.push(rest, t.clone());
            } else if let Some(rest) = n.strip_prefix("d.") {
                d.push(rest, t.clone());
            } else {
                return Err(Error::Misaligned(format!("unexpected checkpoint entry `{n}`")));
            }
        }
        self.features.copy_values_from(&f)?;
        self.decoder.copy_values_from(&d)?;
        Ok(())
    }

    /// Batched inference, one output per image.
    pub fn predict(&self, images: &[&ImagePlane]) -> Result<Vec<DetOutput>> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(images_to_tensor(images)?);
        let f = self.features.bind_frozen(&mut tape);
        let d = self.decoder.bind_frozen(&mut tape);
        let feat = features_forward(&mut tape, x, &f)?;
        let (logits, deltas) = decoder_forward(&mut tape, feat, &d)?;
        let g = tape.shape(logits)[2];
        let lv = tape.value(logits);
        let dv = tape.value(deltas);
        let per_l = NUM_CLASSES * g * g;
        let per_d = 4 * g * g;
        (0..images.len())
            .map(|i| {
                Ok(DetOutput {
                    logits: Tensor::new(&[NUM_CLASSES, g, g], lv[i * per_l..(i + 1) * per_l].to_vec())?,
                    deltas: Tensor::new(&[4, g, g], dv[i * per_d..(i + 1) * per_d].to_vec())?,
                })
            })
            .collect()
    }
}

/// Forward pass on one 64x64 RGB image.
pub fn det_forward(model: &DetectorModel, image: &ImagePlane) -> Result<DetOutput> {
    if (image.height(), image.width(), image.channels()) != (IMAGE_SIZE, IMAGE_SIZE, model.config.input_channels) {
        return Err(Error::shape(
            "det_forward",
            &[IMAGE_SIZE, IMAGE_SIZE, model.config.input_channels],
            &[image.height(), image.width(), image.channels()],
        ));
    }
    let out = model.predict(&[image])?.remove(0);
    debug_assert_eq!(out.grid(), GRID);
    Ok(out)
}
