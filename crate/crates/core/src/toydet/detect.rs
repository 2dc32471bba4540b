use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::iff::IffConfig;
use crate::tensor::Tensor;

use super::loss::sigmoid;
use super::model::{DetectorModel, CELL, GRID, HEAD_CHANNELS, NUM_CLASSES, PRIOR};
use super::scene::{BBox, ShapeClass};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: ShapeClass,
    /// Objectness times class probability, in `[0, 1]`.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeParams {
    pub score_thresh: f64,
    pub iou_thresh: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            score_thresh: 0.5,
            iou_thresh: 0.5,
        }
    }
}

impl DecodeParams {
    /// Low score cut-off for precision/recall evaluation.
    pub fn for_evaluation() -> Self {
        Self {
            score_thresh: 0.05,
            ..Self::default()
        }
    }
}

// Keeps exp() of the size logits in a sane pixel range.
const MAX_LOG_SCALE: f64 = 4.0;

/// Turns a `[7, 12, 12]` head output into per-cell detections scoring at
/// least `score_thresh`. Cells are visited in row-major order.
pub fn decode(y: &Tensor, score_thresh: f64) -> Result<Vec<Detection>> {
    if y.shape() != [HEAD_CHANNELS, GRID, GRID] {
        return Err(Error::ShapeMismatch {
            op: "decode",
            expected: vec![HEAD_CHANNELS, GRID, GRID],
            got: y.shape().to_vec(),
        });
    }
    let plane = GRID * GRID;
    let d = y.data();
    let mut out = Vec::new();
    for row in 0..GRID {
        for col in 0..GRID {
            let cell = row * GRID + col;
            let at = |ch: usize| d[ch * plane + cell];
            let logits: Vec<f64> = (0..NUM_CLASSES).map(|k| at(5 + k)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let (best, best_logit) = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &l)| if l > acc.1 { (k, l) } else { acc });
            let p = (best_logit - m).exp() / z;
            let score = sigmoid(at(0)) * p;
            if score < score_thresh {
                continue;
            }
            let cx = (col as f64 + sigmoid(at(1))) * CELL;
            let cy = (row as f64 + sigmoid(at(2))) * CELL;
            let w = PRIOR * at(3).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
            let h = PRIOR * at(4).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
            out.push(Detection {
                bbox: BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h),
                class: ShapeClass::from_index(best).expect("class index in range"),
                score,
            });
        }
    }
    Ok(out)
}

/// Greedy per-class non-maximum suppression. Detections are visited by
/// descending score (ties keep input order) and kept when their IoU with
/// every kept detection of the same class is below `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept
            .iter()
            .filter(|k| k.class == d.class)
            .all(|k| k.bbox.iou(&d.bbox) < iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}

/// Backbone, feedback loop, decode of the final head output, then NMS.
pub fn detect(
    model: &DetectorModel,
    image: &Tensor,
    cfg: &IffConfig,
    params: &DecodeParams,
) -> Result<Vec<Detection>> {
    let trajectory = model.forward(image, cfg)?;
    Ok(nms(&decode(trajectory.output(), params.score_thresh)?, params.iou_thresh))
}
