use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eval::evaluate;
use crate::config::RunConfig;
use crate::data::SamplePair;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::metrics::{prepare_gt, total_loss, GroundTruth, LossParts};
use crate::params::Parameters;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's samples.
    pub loss: LossParts,
    pub val_map50: f64,
    pub val_map50_95: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch={} lr={:.6} loss={:.6} box={:.6} obj={:.6} cls={:.6} val_mAP50={:.6} val_mAP50_95={:.6} seconds={:.2}",
            self.epoch,
            self.lr,
            self.loss.total,
            self.loss.bbox,
            self.loss.obj,
            self.loss.cls,
            self.val_map50,
            self.val_map50_95,
            self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the highest validation mAP50.
    pub best: Detector,
    pub best_epoch: usize,
    pub best_map50: f64,
    pub last: Detector,
    pub history: Vec<EpochLog>,
}

/// Seeds of the independent random streams of one run.
fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0xA076_1D64_78BD_642F))
}

const INIT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

/// Training samples used to calibrate the initial activation scales.
pub const CALIBRATION_SAMPLES: usize = 16;

pub fn init_detector(cfg: &RunConfig) -> Result<Detector> {
    Detector::init(cfg.detector_config(), &mut stream(cfg.seed, INIT_STREAM))
}

/// Random horizontal flip of the pair, and per-channel gain and offset on RGB.
pub fn augment(rgb: &Tensor, tir: &Tensor, gts: &[GroundTruth], rng: &mut impl Rng) -> (Tensor, Tensor, Vec<GroundTruth>) {
    let flip = rng.gen_bool(0.5);
    let gains: [f64; 3] = [rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2)];
    let offset = rng.gen_range(-0.08..0.08);
    let w = rgb.dim(2);
    let (mut r, mut t) = if flip { (flip_h(rgb), flip_h(tir)) } else { (rgb.clone(), tir.clone()) };
    let hw = r.dim(1) * w;
    for (c, g) in gains.iter().enumerate() {
        for v in &mut r.data_mut()[c * hw..(c + 1) * hw] {
            *v = (*v * g + offset).clamp(0.0, 1.0);
        }
    }
    let gts = gts
        .iter()
        .map(|g| {
            let mut g = g.clone();
            if flip {
                g.bbox = g.bbox.flipped_horizontally(w as f64);
                g.polygon = g.polygon.map(|p| {
                    let mut q = p;
                    for x in q.iter_mut().step_by(2) {
                        *x = w as f64 - *x;
                    }
                    q
                });
            }
            g
        })
        .collect();
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    (r, t, gts)
}

fn flip_h(img: &Tensor) -> Tensor {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        img.data()[i - x + (w - 1 - x)]
    })
}

/// Per-sample loss of `det` with the configured ground-truth form, without
/// augmentation.
pub fn dataset_loss(det: &Detector, cfg: &RunConfig, samples: &[SamplePair]) -> Result<LossParts> {
    let loss_cfg = cfg.loss_config();
    let mut acc = LossParts::default();
    for s in samples {
        let gts = prepare_gt(&s.rgb_gts, &s.tir_gts, cfg.gt_form);
        let raw = det.forward(&s.rgb, &s.tir)?;
        acc.accumulate(&total_loss(&raw, &gts, &loss_cfg)?.0);
    }
    Ok(acc.scaled(1.0 / samples.len().max(1) as f64))
}

fn global_norm(grads: &Detector) -> f64 {
    grads.sum_squares().sqrt()
}

/// Mini-batch SGD with momentum on the loss summed over each batch.
/// Single-threaded and fully determined by the
/// configuration and the data.
pub fn train(
    cfg: &RunConfig,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let loss_cfg = cfg.loss_config();
    let mut det = init_detector(cfg)?;
    let calib: Vec<_> = train_set.iter().take(CALIBRATION_SAMPLES).map(|s| (&s.rgb, &s.tir)).collect();
    det.calibrate(&calib)?;
    let mut velocity = det.zeros_like();
    let mut grads = det.zeros_like();
    let mut order_rng = stream(cfg.seed, ORDER_STREAM);
    let mut aug_rng = stream(cfg.seed, AUGMENT_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(usize, f64, Detector)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        for i in (1..order.len()).rev() {
            order.swap(i, order_rng.gen_range(0..=i));
        }
        let mut epoch_loss = LossParts::default();
        for (step, batch) in order.chunks(cfg.batch).enumerate() {
            grads.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
            for &i in batch {
                let s = &train_set[i];
                let gts = prepare_gt(&s.rgb_gts, &s.tir_gts, cfg.gt_form);
                let (rgb, tir, gts) = if cfg.augment {
                    augment(&s.rgb, &s.tir, &gts, &mut aug_rng)
                } else {
                    (s.rgb.clone(), s.tir.clone(), gts)
                };
                let (raw, cache) = det.forward_train(&rgb, &tir)?;
                let (parts, graw) = total_loss(&raw, &gts, &loss_cfg).map_err(|e| Error::Divergence {
                    epoch,
                    step,
                    detail: e.to_string(),
                })?;
                epoch_loss.accumulate(&parts);
                det.backward(&cache, &graw, &mut grads)?;
            }
            let mut scale = 1.0;
            let norm = global_norm(&grads);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                scale *= cfg.grad_clip / norm;
            }
            sgd_step(&mut det, &grads, &mut velocity, scale, lr, cfg.momentum, cfg.weight_decay);
            check_weights(&det).map_err(|detail| Error::Divergence { epoch, step, detail })?;
        }
        let report = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&det, val_set, cfg.gt_form, cfg.eval_conf, cfg.iou)?)
        };
        let (m50, m5095) = report.as_ref().map_or((0.0, 0.0), |r| (r.map50, r.map50_95));
        let log = EpochLog {
            epoch,
            lr,
            loss: epoch_loss.scaled(1.0 / train_set.len() as f64),
            val_map50: m50,
            val_map50_95: m5095,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        history.push(log);
        if best.as_ref().map_or(true, |(_, b, _)| m50 > *b) {
            best = Some((epoch, m50, det.clone()));
        }
    }
    let (best_epoch, best_map50, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_map50,
        last: det,
        history,
    })
}

/// Weights an update can leave unusable: non-finite values, or a scan
/// state matrix that overflowed.
fn check_weights(det: &Detector) -> std::result::Result<(), String> {
    if let Some((name, _)) = det.named_tensors().into_iter().find(|(_, t)| !t.all_finite()) {
        return Err(format!("non-finite weights in `{name}`"));
    }
    det.cfm
        .iter()
        .flat_map(|w| &w.s6)
        .try_for_each(|p| p.validate())
        .map_err(|e| e.to_string())
}

/// `v = momentum * v + scale * g + wd * w`, `w -= lr * v`; decay applies to
/// tensors of rank >= 2 only.
fn sgd_step(det: &mut Detector, grads: &Detector, velocity: &mut Detector, scale: f64, lr: f64, momentum: f64, wd: f64) {
    let g = grads.named_tensors();
    let v = velocity.tensors_mut();
    let w = det.tensors_mut();
    for ((wt, vt), (_, gt)) in w.into_iter().zip(v).zip(g) {
        let decay = if wt.ndim() >= 2 { wd } else { 0.0 };
        let (wd_, vd, gd) = (wt.data_mut(), vt.data_mut(), gt.data());
        for j in 0..wd_.len() {
            vd[j] = momentum * vd[j] + scale * gd[j] + decay * wd_[j];
            wd_[j] -= lr * vd[j];
        }
    }
}
