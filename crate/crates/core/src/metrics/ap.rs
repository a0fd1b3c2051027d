use std::cmp::Ordering;
use std::fmt;

use super::{Detection, GroundTruth};

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// True-positive flags of `dets` in descending-score order (stable on ties).
///
/// Each detection claims the unmatched ground truth it overlaps most, if that
/// overlap reaches `iou_thresh`; equal overlaps go to the earlier box.
fn match_image(dets: &[&Detection], gts: &[&GroundTruth], iou_thresh: f64) -> Vec<(f64, bool)> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in sorted_by_score(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = d.bbox.iou(&g.bbox);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        out.push((d.score, best.is_some()));
    }
    out
}

fn sorted_by_score<'a>(dets: &[&'a Detection]) -> Vec<&'a Detection> {
    let mut v = dets.to_vec();
    v.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    v
}

/// Area under the monotone precision envelope of a ranked TP/FP list.
fn area_all_points(ranked: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(ranked.len() + 2);
    let mut precision = Vec::with_capacity(ranked.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    let mut tp = 0usize;
    for (i, &hit) in ranked.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .filter(|&i| recall[i] != recall[i - 1])
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// Single-class AP of one image's detections, or `None` without ground truth.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Option<f64> {
    let d: Vec<&Detection> = dets.iter().collect();
    let g: Vec<&GroundTruth> = gts.iter().collect();
    average_precision_images(&[(d, g)], iou_thresh)
}

/// Single-class AP pooled over images; matching never crosses images.
pub fn average_precision_images(images: &[(Vec<&Detection>, Vec<&GroundTruth>)], iou_thresh: f64) -> Option<f64> {
    let n_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    if n_gt == 0 {
        return None;
    }
    // (score, image, rank within image, hit); sorting on (score desc, image,
    // rank) keeps input order on ties
    let mut all: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (img, (d, g)) in images.iter().enumerate() {
        for (rank, (score, hit)) in match_image(d, g, iou_thresh).into_iter().enumerate() {
            all.push((score, img, rank, hit));
        }
    }
    all.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let ranked: Vec<bool> = all.iter().map(|x| x.3).collect();
    Some(area_all_points(&ranked, n_gt))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub map50: f64,
    pub map50_95: f64,
    /// AP at 0.5 per class; `None` for classes without ground truth.
    pub per_class50: Vec<Option<f64>>,
    pub per_class50_95: Vec<Option<f64>>,
}

impl MapReport {
    /// `key=value` lines, one per metric.
    pub fn key_values(&self, class_names: &[&str]) -> Vec<(String, String)> {
        let mut out = vec![
            ("mAP50".to_string(), format!("{:.6}", self.map50)),
            ("mAP50_95".to_string(), format!("{:.6}", self.map50_95)),
        ];
        for (k, ap) in self.per_class50.iter().enumerate() {
            let name = class_names.get(k).copied().unwrap_or("class");
            let v = ap.map_or("nan".to_string(), |v| format!("{v:.6}"));
            out.push((format!("AP50.{name}"), v));
        }
        out
    }
}

impl fmt::Display for MapReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>10} {:>12}", "class", "AP50", "AP50:95")?;
        for (k, (a, b)) in self.per_class50.iter().zip(&self.per_class50_95).enumerate() {
            let show = |v: &Option<f64>| v.map_or("-".to_string(), |x| format!("{:.4}", x));
            writeln!(f, "{:<10} {:>10} {:>12}", k, show(a), show(b))?;
        }
        write!(f, "{:<10} {:>10.4} {:>12.4}", "all", self.map50, self.map50_95)
    }
}

fn class_mean(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// mAP over `classes` classes and per-image detection/ground-truth lists.
///
/// `map50` uses the first threshold; `map50_95` averages the class-mean over
/// all thresholds. Classes without ground truth are left out of every mean.
pub fn mean_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    classes: usize,
    thresholds: &[f64],
) -> MapReport {
    let mut per_threshold: Vec<Vec<Option<f64>>> = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let aps = (0..classes)
            .map(|k| {
                let images: Vec<(Vec<&Detection>, Vec<&GroundTruth>)> = dets
                    .iter()
                    .zip(gts)
                    .map(|(d, g)| {
                        (
                            d.iter().filter(|x| x.class_id == k).collect(),
                            g.iter().filter(|x| x.class_id == k).collect(),
                        )
                    })
                    .collect();
                average_precision_images(&images, t)
            })
            .collect();
        per_threshold.push(aps);
    }
    let per_class50 = per_threshold.first().cloned().unwrap_or_else(|| vec![None; classes]);
    let per_class50_95 = (0..classes)
        .map(|k| {
            let v: Vec<f64> = per_threshold.iter().filter_map(|row| row[k]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let means: Vec<f64> = per_threshold.iter().map(|row| class_mean(row)).collect();
    MapReport {
        map50: means.first().copied().unwrap_or(0.0),
        map50_95: if means.is_empty() {
            0.0
        } else {
            means.iter().sum::<f64>() / means.len() as f64
        },
        per_class50,
        per_class50_95,
    }
}
