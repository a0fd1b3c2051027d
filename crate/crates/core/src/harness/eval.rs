use crate::data::{par_map, worker_threads, SamplePair, CLASS_NAMES};
use crate::detector::Detector;
use crate::error::Result;
use crate::metrics::{coco_thresholds, mean_ap, prepare_gt, Detection, GtForm, MapReport};

/// Detections for every sample, computed on up to [`worker_threads`] workers.
pub fn predict(det: &Detector, samples: &[SamplePair], conf: f64, iou: f64) -> Result<Vec<Vec<Detection>>> {
    par_map(samples, worker_threads(), |s| det.detect(&s.rgb, &s.tir, conf, iou))
        .into_iter()
        .collect()
}

/// mAP of `det` on `samples` against the `form` ground truth.
pub fn evaluate(det: &Detector, samples: &[SamplePair], form: GtForm, conf: f64, iou: f64) -> Result<MapReport> {
    let dets = predict(det, samples, conf, iou)?;
    Ok(score(&dets, samples, form))
}

pub fn score(dets: &[Vec<Detection>], samples: &[SamplePair], form: GtForm) -> MapReport {
    let gts: Vec<_> = samples.iter().map(|s| prepare_gt(&s.rgb_gts, &s.tir_gts, form)).collect();
    mean_ap(dets, &gts, CLASS_NAMES.len(), &coco_thresholds())
}

/// Aligned table followed by `key=value` lines.
pub fn render_report(r: &MapReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("{:<8} {:>8} {:>10}\n", "class", "AP50", "AP50:95"));
    for (k, name) in CLASS_NAMES.iter().enumerate() {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.4}", x));
        s.push_str(&format!(
            "{:<8} {:>8} {:>10}\n",
            name,
            show(r.per_class50[k]),
            show(r.per_class50_95[k])
        ));
    }
    s.push_str(&format!("{:<8} {:>8.4} {:>10.4}\n\n", "all", r.map50, r.map50_95));
    for (k, v) in r.key_values(&CLASS_NAMES) {
        s.push_str(&format!("{k}={v}\n"));
    }
    s
}
