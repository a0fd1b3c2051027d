use std::cmp::Ordering;

use crate::metrics::{BBox, Detection};
use crate::tensor::{sigmoid_scalar, Tensor};

/// Anchor boxes and strides of the three prediction levels.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub strides: Vec<f64>,
    /// `(w, h)` per anchor, per level.
    pub sizes: Vec<Vec<(f64, f64)>>,
}

impl AnchorSet {
    pub const SCALES: [f64; 3] = [0.5, 1.0, 2.0];

    /// Square anchors at 0.5x, 1x and 2x the stride of levels at strides 8, 16, 32.
    pub fn standard() -> Self {
        Self::from_strides(&[8.0, 16.0, 32.0])
    }

    pub fn from_strides(strides: &[f64]) -> Self {
        Self {
            strides: strides.to_vec(),
            sizes: strides
                .iter()
                .map(|s| Self::SCALES.iter().map(|k| (k * s, k * s)).collect())
                .collect(),
        }
    }

    /// Every stride and anchor multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            strides: self.strides.iter().map(|v| v * s).collect(),
            sizes: self
                .sizes
                .iter()
                .map(|lvl| lvl.iter().map(|(w, h)| (w * s, h * s)).collect())
                .collect(),
        }
    }

    pub fn per_cell(&self) -> usize {
        self.sizes[0].len()
    }
}

/// Per-anchor channel offsets inside a raw prediction map.
pub(crate) const TX: usize = 0;
pub(crate) const TY: usize = 1;
pub(crate) const TW: usize = 2;
pub(crate) const TH: usize = 3;
pub(crate) const OBJ: usize = 4;
pub(crate) const CLS: usize = 5;

/// Decoded box of one anchor: center offset in `(-0.5, 1.5)` cells, size in
/// `(0, 4)` anchors.
pub(crate) fn decode_box(t: [f64; 4], col: usize, row: usize, stride: f64, anchor: (f64, f64)) -> BBox {
    let sx = sigmoid_scalar(t[0]);
    let sy = sigmoid_scalar(t[1]);
    let sw = sigmoid_scalar(t[2]);
    let sh = sigmoid_scalar(t[3]);
    BBox::new(
        (sx * 2.0 - 0.5 + col as f64) * stride,
        (sy * 2.0 - 0.5 + row as f64) * stride,
        (sw * 2.0).powi(2) * anchor.0,
        (sh * 2.0).powi(2) * anchor.1,
    )
}

pub(crate) fn num_classes(raw: &Tensor, anchors_per_cell: usize) -> usize {
    raw.dim(0) / anchors_per_cell - 5
}

/// Decodes raw head outputs into scored boxes and applies per-class greedy NMS.
///
/// Each anchor contributes at most one candidate (its best class) when
/// `sigmoid(obj) * sigmoid(class)` exceeds `conf_thresh`. Ties in score are
/// broken by candidate order (level, anchor, row, column).
pub fn decode_predictions(raw: &[Tensor], anchors: &AnchorSet, conf_thresh: f64, iou_thresh: f64) -> Vec<Detection> {
    let a_n = anchors.per_cell();
    let mut cands: Vec<Detection> = Vec::new();
    for (lvl, map) in raw.iter().enumerate() {
        let k_n = num_classes(map, a_n);
        let (h, w) = (map.dim(1), map.dim(2));
        let hw = h * w;
        let at = |ch: usize, cell: usize| map.data()[ch * hw + cell];
        for a in 0..a_n {
            let base = a * (5 + k_n);
            for row in 0..h {
                for col in 0..w {
                    let cell = row * w + col;
                    let obj = sigmoid_scalar(at(base + OBJ, cell));
                    if obj <= conf_thresh {
                        continue;
                    }
                    let (best_k, best_logit) = (0..k_n)
                        .map(|k| (k, at(base + CLS + k, cell)))
                        .fold((0, f64::NEG_INFINITY), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
                    let score = obj * sigmoid_scalar(best_logit);
                    if score <= conf_thresh {
                        continue;
                    }
                    let t = [at(base + TX, cell), at(base + TY, cell), at(base + TW, cell), at(base + TH, cell)];
                    cands.push(Detection {
                        bbox: decode_box(t, col, row, anchors.strides[lvl], anchors.sizes[lvl][a]),
                        class_id: best_k,
                        score,
                    });
                }
            }
        }
    }
    nms(cands, iou_thresh)
}

/// Greedy per-class non-maximum suppression, stable in input order on ties.
pub fn nms(dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class_id == dets[i].class_id && dets[k].bbox.iou(&dets[i].bbox) > iou_thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nms_keeps_one_of_identical_boxes() {
        let d = Detection {
            bbox: BBox::new(10.0, 10.0, 8.0, 8.0),
            class_id: 1,
            score: 0.9,
        };
        assert_eq!(nms(vec![d.clone(), d.clone()], 0.45).len(), 1);
        let other = Detection { class_id: 2, ..d.clone() };
        assert_eq!(nms(vec![d, other], 0.45).len(), 2);
    }

    #[test]
    fn anchor_layout() {
        let a = AnchorSet::standard();
        assert_eq!(a.sizes[1], vec![(8.0, 8.0), (16.0, 16.0), (32.0, 32.0)]);
        assert_eq!(a.scaled(2.0).strides, vec![16.0, 32.0, 64.0]);
    }
}
