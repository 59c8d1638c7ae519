use super::model::{DetOutput, DetectorModel, STRIDE};
use super::scene::{BBox, Scene};
use super::NUM_CLASSES;
use crate::fourier::ImagePlane;
use crate::par;
use crate::{Error, Result};

/// Minimum sigmoid score for a cell/class to become a detection.
pub const SCORE_THRESHOLD: f32 = 0.5;
/// IoU above which a lower-scored detection is suppressed.
pub const NMS_IOU: f32 = 0.5;
/// Log-size deltas are clamped before `exp` so a wild prediction stays finite.
const MAX_LOG_SIZE: f32 = 4.0;

pub fn iou(a: &BBox, b: &BBox) -> Result<f32> {
    a.validate()?;
    b.validate()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f32,
    pub bbox: BBox,
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Thresholded cell predictions followed by per-class greedy NMS.
pub fn decode_predictions(out: &DetOutput, image_size: usize) -> Vec<Detection> {
    let g = out.grid();
    let cell = STRIDE as f32;
    let lim = image_size as f32;
    let mut raw = Vec::new();
    for row in 0..g {
        for col in 0..g {
            for k in 0..NUM_CLASSES {
                let score = sigmoid(out.logit(k, row, col));
                if score < SCORE_THRESHOLD {
                    continue;
                }
                let cx = (col as f32 + out.delta(0, row, col)) * cell;
                let cy = (row as f32 + out.delta(1, row, col)) * cell;
                let w = cell * out.delta(2, row, col).clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp();
                let h = cell * out.delta(3, row, col).clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp();
                let x1 = (cx - 0.5 * w).clamp(0.0, lim);
                let x2 = (cx + 0.5 * w).clamp(0.0, lim);
                let y1 = (cy - 0.5 * h).clamp(0.0, lim);
                let y2 = (cy + 0.5 * h).clamp(0.0, lim);
                if let Ok(bbox) = BBox::new(x1, y1, x2, y2) {
                    raw.push(Detection {
                        class_id: k,
                        score,
                        bbox,
                    });
                }
            }
        }
    }
    nms(raw, NMS_IOU)
}

/// Greedy per-class NMS. Output sorted by descending score; ties keep input order.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f32) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox).unwrap_or(0.0) > iou_thresh);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

/// 11-point interpolated AP from `(score, is_true_positive)` pairs.
///
/// Detections sharing a score are consumed as one group, so the result does
/// not depend on how ties are ordered.
pub fn average_precision_11pt(scored: &[(f32, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    (0..=10)
        .map(|r| {
            let r = r as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Per-class AP (`None` for classes absent from the ground truth) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// AP of precomputed detections against scenes at one IoU threshold.
pub fn ap_from_detections(dets: &[Vec<Detection>], scenes: &[&Scene], iou_thresh: f32) -> Result<ApResult> {
    if scenes.is_empty() {
        return Err(Error::invalid("eval_ap", "empty scene set"));
    }
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::invalid(
            "eval_ap",
            format!("iou threshold {iou_thresh} outside (0, 1)"),
        ));
    }
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    for k in 0..NUM_CLASSES {
        let mut scored = Vec::new();
        let mut num_gt = 0;
        for (scene, image_dets) in scenes.iter().zip(dets) {
            let gts: Vec<&BBox> = scene
                .annotations
                .iter()
                .filter(|a| a.class_id == k)
                .map(|a| &a.bbox)
                .collect();
            num_gt += gts.len();
            let mut taken = vec![false; gts.len()];
            // Higher scores claim ground truth first.
            let mut ranked: Vec<&Detection> = image_dets.iter().filter(|d| d.class_id == k).collect();
            ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
            for d in ranked {
                let mut best: Option<(usize, f32)> = None;
                for (j, g) in gts.iter().enumerate() {
                    let v = iou(&d.bbox, g)?;
                    if !taken[j] && v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
                if let Some((j, _)) = best {
                    taken[j] = true;
                }
                scored.push((d.score, best.is_some()));
            }
        }
        per_class.push((num_gt > 0).then(|| average_precision_11pt(&scored, num_gt)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(ApResult { per_class, mean })
}

const EVAL_CHUNK: usize = 16;

/// Decoded detections for every scene, in scene order.
pub fn detect_all(model: &DetectorModel, scenes: &[&Scene]) -> Result<Vec<Vec<Detection>>> {
    let chunks: Vec<&[&Scene]> = scenes.chunks(EVAL_CHUNK).collect();
    let outs = par::map(&chunks, |chunk| {
        let images: Vec<&ImagePlane> = chunk.iter().map(|s| &s.image).collect();
        model.predict(&images).map(|outs| {
            outs.iter()
                .zip(chunk.iter())
                .map(|(o, s)| decode_predictions(o, s.image.width()))
                .collect::<Vec<_>>()
        })
    });
    let mut all = Vec::with_capacity(scenes.len());
    for o in outs {
        all.extend(o?);
    }
    Ok(all)
}

pub fn eval_ap(model: &DetectorModel, scenes: &[&Scene], iou_thresh: f32) -> Result<ApResult> {
    if scenes.is_empty() {
        return Err(Error::invalid("eval_ap", "empty scene set"));
    }
    let dets = detect_all(model, scenes)?;
    ap_from_detections(&dets, scenes, iou_thresh)
}

/// AP50 and AP averaged over IoU 0.50:0.05:0.95, per class and mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ap50: ApResult,
    pub ap: ApResult,
}

pub fn evaluate(model: &DetectorModel, scenes: &[&Scene]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("eval_ap", "empty scene set"));
    }
    let dets = detect_all(model, scenes)?;
    let ap50 = ap_from_detections(&dets, scenes, 0.5)?;
    let mut sums = vec![0.0; NUM_CLASSES];
    let mut mean = 0.0;
    for i in 0..10 {
        let r = ap_from_detections(&dets, scenes, 0.5 + 0.05 * i as f32)?;
        for (s, v) in sums.iter_mut().zip(&r.per_class) {
            *s += v.unwrap_or(0.0) / 10.0;
        }
        mean += r.mean / 10.0;
    }
    let per_class = ap50.per_class.iter().zip(sums).map(|(p, s)| p.map(|_| s)).collect();
    Ok(EvalReport {
        ap50,
        ap: ApResult { per_class, mean },
    })
}
