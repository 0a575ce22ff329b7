//! Decoding raw head tensors into detections, IoU and non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::architecture::{NetworkConfig, RawOutputs, ANCHORS_PER_HEAD};
use crate::engine::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.45;

/// Normalized center-format box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub class_probs: Vec<f64>,
    pub class_id: usize,
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // Areas from the same corners, so identical boxes give exactly 1.
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Decodes one image's head, `[S, S, 3, 5 + nc]` raw values (row, column,
/// anchor), keeping slots whose confidence reaches `conf_threshold`.
pub fn decode_head(
    head: &Tensor,
    anchors: &[(f64, f64); ANCHORS_PER_HEAD],
    conf_threshold: f64,
) -> Result<Vec<Detection>> {
    let (s, attrs) = match head.shape() {
        &[s, s2, a, attrs] if s == s2 && s >= 1 && a == ANCHORS_PER_HEAD && attrs >= 6 => (s, attrs),
        other => {
            return Err(Error::Dimension(format!(
                "head must be [S, S, {ANCHORS_PER_HEAD}, 5 + nc], got {other:?}"
            )))
        }
    };
    let d = head.data();
    let mut out = Vec::new();
    for row in 0..s {
        for col in 0..s {
            for (a, anchor) in anchors.iter().enumerate() {
                let o = ((row * s + col) * ANCHORS_PER_HEAD + a) * attrs;
                let v = &d[o..o + attrs];
                let confidence = sigmoid(v[4]);
                if confidence < conf_threshold {
                    continue;
                }
                let class_probs: Vec<f64> = v[5..].iter().map(|&t| sigmoid(t)).collect();
                let class_id = class_probs
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &p)| if p > class_probs[best] { i } else { best });
                out.push(Detection {
                    bbox: BBox {
                        x: (sigmoid(v[0]) + col as f64) / s as f64,
                        y: (sigmoid(v[1]) + row as f64) / s as f64,
                        w: anchor.0 * v[2].exp(),
                        h: anchor.1 * v[3].exp(),
                    },
                    confidence,
                    class_probs,
                    class_id,
                });
            }
        }
    }
    Ok(out)
}

/// Greedy suppression. Output is sorted by confidence, ties by input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.iter().all(|k| iou(&k.bbox, &dets[i].bbox) < iou_threshold) {
            kept.push(dets[i].clone());
        }
    }
    kept
}

/// Detections and body-fat estimate for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub bfp: Option<f64>,
    /// After suppression, highest confidence first.
    pub detections: Vec<Detection>,
    /// Set when no person was detected; the BFP is still reported.
    pub low_confidence: bool,
}

/// Decodes all three heads of image `index` in a batch and applies NMS.
pub fn postprocess_image(
    raw: &RawOutputs,
    index: usize,
    config: &NetworkConfig,
    conf_threshold: f64,
    nms_threshold: f64,
) -> Result<ImageResult> {
    let mut dets = Vec::new();
    for (scale, head) in raw.heads.iter().enumerate() {
        let shape = head.shape();
        if shape.len() != 5 || index >= shape[0] {
            return Err(Error::Dimension(format!("no image {index} in head of shape {shape:?}")));
        }
        let per = shape[1..].iter().product::<usize>();
        let slice = Tensor::new(
            shape[1..].to_vec(),
            head.data()[index * per..(index + 1) * per].to_vec(),
        )?;
        dets.extend(decode_head(&slice, &config.head_anchors(scale), conf_threshold)?);
    }
    let detections = nms(&dets, nms_threshold);
    Ok(ImageResult {
        bfp: raw.bf.as_ref().map(|b| b.data()[index]),
        low_confidence: detections.is_empty(),
        detections,
    })
}

/// Highest-confidence slot over all heads, ignoring any threshold.
pub fn best_detection(raw: &RawOutputs, index: usize, config: &NetworkConfig) -> Result<Detection> {
    let r = postprocess_image(raw, index, config, 0.0, 1.0 + f64::EPSILON)?;
    r.detections
        .into_iter()
        .next()
        .ok_or_else(|| Error::Evaluation("network produced no detection slots".into()))
}
