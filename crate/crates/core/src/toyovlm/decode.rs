use serde::{Deserialize, Serialize};

use super::GroundingOutput;
use crate::error::{Result, VistexError};
use crate::evaluation::iou;
use crate::synthdata::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Turns dense head output into scored boxes.
///
/// A cell's score for class `c` is the max over `c`'s token columns of
/// `sigmoid(logit)`; surviving candidates go through greedy per-class NMS.
pub fn decode_detections(output: &GroundingOutput, class_map: &[Option<usize>], params: &DecodeParams) -> Result<Vec<Detection>> {
    if class_map.iter().all(Option::is_none) {
        return Err(VistexError::InvalidInput("token map has no classes".into()));
    }
    if !(0.0 < params.score_threshold && params.score_threshold < 1.0) || !(0.0 < params.nms_iou && params.nms_iou < 1.0) {
        return Err(VistexError::InvalidInput("thresholds must lie in (0, 1)".into()));
    }
    if output.token_count() != class_map.len() {
        return Err(VistexError::Shape(format!(
            "{} logit columns for {} tokens",
            output.token_count(),
            class_map.len()
        )));
    }
    let mut classes: Vec<usize> = class_map.iter().flatten().copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let size = output.image_size as f64;

    let mut all = Vec::new();
    for &c in &classes {
        let cols: Vec<usize> = (0..class_map.len()).filter(|&t| class_map[t] == Some(c)).collect();
        let mut cands = Vec::new();
        for (j, grid) in output.grids.iter().enumerate() {
            let logits = &output.logits[j];
            for cell in 0..logits.rows {
                let row = logits.row(cell);
                let best = cols.iter().map(|&t| row[t]).fold(f64::NEG_INFINITY, f64::max);
                let score = sigmoid(best);
                if score < params.score_threshold {
                    continue;
                }
                let (cx, cy) = grid.center(cell);
                let d = output.box_deltas[j].row(cell);
                let bbox = BBox::new(
                    (cx - d[0] * grid.stride_x).clamp(0.0, size),
                    (cy - d[1] * grid.stride_y).clamp(0.0, size),
                    (cx + d[2] * grid.stride_x).clamp(0.0, size),
                    (cy + d[3] * grid.stride_y).clamp(0.0, size),
                );
                cands.push(Detection {
                    bbox,
                    class_id: c,
                    score,
                });
            }
        }
        all.extend(nms(cands, params.nms_iou));
    }
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)));
    all.truncate(params.max_detections);
    Ok(all)
}

/// Greedy NMS: keep the highest score, drop everything overlapping it by
/// more than `thresh`, repeat. Ties keep input order.
pub fn nms(mut cands: Vec<Detection>, thresh: f64) -> Vec<Detection> {
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in cands {
        if keep.iter().all(|k| iou(&k.bbox, &d.bbox) <= thresh) {
            keep.push(d);
        }
    }
    keep
}
