use super::model::{DetOutput, STRIDE};
use super::scene::{Annotation, Scene};
use super::NUM_CLASSES;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Classification and box-regression loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetLoss {
    pub l_cls: f64,
    pub l_boxreg: f64,
}

impl DetLoss {
    pub fn combined(&self) -> f64 {
        self.l_cls + self.l_boxreg
    }
}

/// Loss weighting.
///
/// `l_cls = sum_i w_i * bce_i / (N * 3 * G * G)` with `w_i = pos_weight` at
/// positive entries and 1 elsewhere. `l_boxreg` sums smooth-L1 over the four
/// deltas of positive cells and divides by `max(1, positives)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetLossConfig {
    pub pos_weight: f64,
}

impl Default for DetLossConfig {
    fn default() -> Self {
        Self { pos_weight: 10.0 }
    }
}

/// Dense per-cell targets for a batch, layout `[N, C, G, G]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetTargets {
    pub batch: usize,
    pub grid: usize,
    pub cls: Vec<f64>,
    pub boxes: Vec<f64>,
    pub positive: Vec<bool>,
    pub num_positive: usize,
}

impl DetTargets {
    /// Each annotation goes to the cell containing its box centre; on a
    /// collision the later annotation wins.
    pub fn build(scenes: &[&[Annotation]], grid: usize) -> Self {
        let n = scenes.len();
        let gg = grid * grid;
        let cell = STRIDE as f64;
        let mut cls = vec![0.0; n * NUM_CLASSES * gg];
        let mut boxes = vec![0.0; n * 4 * gg];
        let mut positive = vec![false; n * gg];
        for (i, anns) in scenes.iter().enumerate() {
            for a in anns.iter() {
                let (cx, cy) = a.bbox.center();
                let (cx, cy) = (cx as f64 / cell, cy as f64 / cell);
                let col = (cx.floor() as usize).min(grid - 1);
                let row = (cy.floor() as usize).min(grid - 1);
                let at = row * grid + col;
                if positive[i * gg + at] {
                    for k in 0..NUM_CLASSES {
                        cls[(i * NUM_CLASSES + k) * gg + at] = 0.0;
                    }
                }
                positive[i * gg + at] = true;
                cls[(i * NUM_CLASSES + a.class_id) * gg + at] = 1.0;
                let t = [
                    cx - col as f64,
                    cy - row as f64,
                    (a.bbox.width() as f64 / cell).ln(),
                    (a.bbox.height() as f64 / cell).ln(),
                ];
                for (k, v) in t.into_iter().enumerate() {
                    boxes[(i * 4 + k) * gg + at] = v;
                }
            }
        }
        let num_positive = positive.iter().filter(|&&p| p).count();
        Self {
            batch: n,
            grid,
            cls,
            boxes,
            positive,
            num_positive,
        }
    }

    pub fn from_scenes(scenes: &[&Scene], grid: usize) -> Self {
        let anns: Vec<&[Annotation]> = scenes.iter().map(|s| s.annotations.as_slice()).collect();
        Self::build(&anns, grid)
    }
}

/// Loss nodes recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DetLossVars {
    pub l_cls: Var,
    pub l_boxreg: Var,
    pub total: Var,
}

/// Records the detection loss for `logits [N,3,G,G]` and `deltas [N,4,G,G]`.
pub fn det_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    deltas: Var,
    targets: &DetTargets,
    cfg: &DetLossConfig,
) -> Result<DetLossVars> {
    let (n, g) = (targets.batch, targets.grid);
    let gg = g * g;
    let cls_shape = [n, NUM_CLASSES, g, g];
    let box_shape = [n, 4, g, g];
    if tape.shape(logits) != cls_shape {
        return Err(Error::shape("det_loss", &cls_shape, tape.shape(logits)));
    }
    if tape.shape(deltas) != box_shape {
        return Err(Error::shape("det_loss", &box_shape, tape.shape(deltas)));
    }
    let norm = 1.0 / (n * NUM_CLASSES * gg) as f64;
    let weights: Vec<f64> = targets
        .cls
        .iter()
        .map(|&t| if t > 0.5 { cfg.pos_weight * norm } else { norm })
        .collect();
    let t = tape.constant(Tensor::from_f64(&cls_shape, &targets.cls)?);
    let w = tape.constant(Tensor::from_f64(&cls_shape, &weights)?);
    let bce = tape.bce_with_logits(logits, t)?;
    let weighted = tape.mul(bce, w)?;
    let l_cls = tape.sum(weighted);

    let box_norm = 1.0 / targets.num_positive.max(1) as f64;
    let mut mask = vec![0.0; n * 4 * gg];
    for i in 0..n {
        for c in 0..gg {
            if targets.positive[i * gg + c] {
                for k in 0..4 {
                    mask[(i * 4 + k) * gg + c] = box_norm;
                }
            }
        }
    }
    let bt = tape.constant(Tensor::from_f64(&box_shape, &targets.boxes)?);
    let m = tape.constant(Tensor::from_f64(&box_shape, &mask)?);
    let diff = tape.sub(deltas, bt)?;
    let sl1 = tape.smooth_l1(diff);
    let masked = tape.mul(sl1, m)?;
    let l_boxreg = tape.sum(masked);
    let total = tape.add(l_cls, l_boxreg)?;
    Ok(DetLossVars { l_cls, l_boxreg, total })
}

/// Loss of one image's predictions against its scene.
pub fn det_loss(preds: &DetOutput, scene: &Scene, cfg: &DetLossConfig) -> Result<DetLoss> {
    let g = preds.grid();
    let targets = DetTargets::from_scenes(&[scene], g);
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(preds.logits.cast::<f64>().reshape(&[1, NUM_CLASSES, g, g])?);
    let d = tape.constant(preds.deltas.cast::<f64>().reshape(&[1, 4, g, g])?);
    let v = det_loss_tape(&mut tape, l, d, &targets, cfg)?;
    Ok(DetLoss {
        l_cls: tape.scalar(v.l_cls),
        l_boxreg: tape.scalar(v.l_boxreg),
    })
}
