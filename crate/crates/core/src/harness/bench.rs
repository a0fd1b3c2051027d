use std::fmt::Write as _;
use std::time::Duration;

use crate::data::{generate_sample, SynthSpec};
use crate::detector::{Detector, StageTimes};
use crate::error::{Error, Result};

pub const WARMUP: usize = 3;
pub const MIN_ITERATIONS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub image_size: usize,
    pub iterations: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    /// Mean per-stage latency in milliseconds.
    pub backbone_ms: f64,
    pub fusion_ms: f64,
    pub neck_head_ms: f64,
    pub decode_ms: f64,
}

impl BenchReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let rows = [
            ("backbone", self.backbone_ms),
            ("fusion", self.fusion_ms),
            ("neck+head", self.neck_head_ms),
            ("decode", self.decode_ms),
            ("total", self.mean_ms),
        ];
        writeln!(s, "{:<10} {:>10}", "stage", "ms").unwrap();
        for (k, v) in rows {
            writeln!(s, "{k:<10} {v:>10.3}").unwrap();
        }
        writeln!(s).unwrap();
        for (k, v) in [
            ("image_size", self.image_size as f64),
            ("iterations", self.iterations as f64),
            ("mean_ms", self.mean_ms),
            ("p50_ms", self.p50_ms),
            ("p95_ms", self.p95_ms),
            ("fps", self.fps),
            ("backbone_ms", self.backbone_ms),
            ("fusion_ms", self.fusion_ms),
            ("neck_head_ms", self.neck_head_ms),
            ("decode_ms", self.decode_ms),
        ] {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Single-image forward + decode latency on a synthetic pair of side `image_size`.
pub fn bench(det: &Detector, image_size: usize, iterations: usize, conf: f64, iou: f64) -> Result<BenchReport> {
    if iterations < MIN_ITERATIONS {
        return Err(Error::Config(format!(
            "bench needs at least {MIN_ITERATIONS} iterations, got {iterations}"
        )));
    }
    let spec = SynthSpec {
        image_size,
        ..SynthSpec::default()
    };
    spec.validate()?;
    let s = generate_sample(0, 0, &spec);
    for _ in 0..WARMUP {
        det.detect_timed(&s.rgb, &s.tir, conf, iou)?;
    }
    let mut totals = Vec::with_capacity(iterations);
    let mut sum = StageTimes::default();
    for _ in 0..iterations {
        let (_, t) = det.detect_timed(&s.rgb, &s.tir, conf, iou)?;
        totals.push(ms(t.total()));
        sum.backbone += t.backbone;
        sum.fusion += t.fusion;
        sum.neck_head += t.neck_head;
        sum.decode += t.decode;
    }
    let n = iterations as f64;
    let mean_ms = totals.iter().sum::<f64>() / n;
    totals.sort_by(f64::total_cmp);
    Ok(BenchReport {
        image_size,
        iterations,
        mean_ms,
        p50_ms: percentile(&totals, 50.0),
        p95_ms: percentile(&totals, 95.0),
        fps: 1000.0 / mean_ms,
        backbone_ms: ms(sum.backbone) / n,
        fusion_ms: ms(sum.fusion) / n,
        neck_head_ms: ms(sum.neck_head) / n,
        decode_ms: ms(sum.decode) / n,
    })
}
