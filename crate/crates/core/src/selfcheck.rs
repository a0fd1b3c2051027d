//! Built-in oracle suites, runnable from the command line.
//!
//! Each check compares an optimized path against an independent reference:
//! the sequential recurrence, central finite differences, hand-worked metric
//! cases and structural reductions of the fusion block.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cfm::{cfm_backward, cfm_forward, CfmConfig, CfmWeights};
use crate::detector::{AnchorSet, Detector, DetectorConfig, FusionMode};
use crate::error::Result;
use crate::metrics::{
    average_precision, ciou_loss, coco_thresholds, detach, mean_ap, prepare_gt, total_loss_detached, BBox, Detection,
    GroundTruth, GtForm, LossConfig,
};
use crate::params::Parameters;
use crate::s6::{s6_backward, s6_forward_scan, s6_forward_sequential, S6Params};
use crate::ss2d::{flatten, unflatten, ScanDirection};
use crate::tensor::Tensor;
use crate::Modality;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:<22} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Relative error with a floor on the scale, so that two tiny values agree.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-r..r))
}

/// Worst relative error between `analytic` and central differences of `f`
/// over every scalar of `params`.
pub fn parameter_fd_error<P: Parameters + Clone>(params: &P, analytic: &P, f: impl Fn(&P) -> f64) -> f64 {
    let grads: Vec<Tensor> = analytic.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (ti, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let orig = probe.tensors_mut()[ti].data()[i];
            probe.tensors_mut()[ti].data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.tensors_mut()[ti].data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.tensors_mut()[ti].data_mut()[i] = orig;
            worst = worst.max(rel_err((up - down) / (2.0 * FD_STEP), g.data()[i]));
        }
    }
    worst
}

fn weighted_sum(y: &Tensor, w: &Tensor) -> f64 {
    y.dot(w).expect("same shape")
}

fn scan_oracle(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (l, d, n) = (rng.gen_range(1..=128), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let p = S6Params::init(d, n, rng);
        let x = rand_tensor(rng, &[l, d], 1.0);
        let err = s6_forward_scan(&x, &p)?.max_abs_diff(&s6_forward_sequential(&x, &p)?)?;
        worst = worst.max(err);
    }
    Ok((worst < 1e-9, format!("max |scan - sequential| = {worst:.3e} over 20 instances")))
}

fn ss2d_round_trip() -> Result<(bool, String)> {
    let mut cases = 0;
    for h in 1..=16 {
        for w in 1..=16 {
            let fm = Tensor::from_fn(&[2, h, w], |i| i as f64);
            for dir in ScanDirection::ALL {
                if unflatten(&flatten(&fm, dir)?, dir, h, w)? != fm {
                    return Ok((false, format!("{dir:?} fails at {h}x{w}")));
                }
                cases += 1;
            }
        }
    }
    Ok((true, format!("{cases} exact round trips")))
}

fn s6_gradients(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let (l, d, n) = (3, 2, 2);
    let mut p = S6Params::init(d, n, rng);
    p.w_delta = rand_tensor(rng, &[d, d], 0.5);
    let x = rand_tensor(rng, &[l, d], 1.0);
    let gw = rand_tensor(rng, &[l, d], 1.0);
    let (gx, gp) = s6_backward(&x, &p, &gw)?;
    let fx = crate::tensor::finite_diff_grad(|x| weighted_sum(&s6_forward_scan(x, &p).unwrap(), &gw), &x, FD_STEP)?;
    let input_err = fx.data().iter().zip(gx.data()).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f64::max);
    let param_err = parameter_fd_error(&p, &gp, |q| weighted_sum(&s6_forward_scan(&x, q).unwrap(), &gw));
    let worst = input_err.max(param_err);
    Ok((worst < FD_TOLERANCE, format!("worst relative error {worst:.3e}")))
}

fn cfm_gradients(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut cfg = CfmConfig::new(2);
    cfg.state_size = 2;
    let mut w = CfmWeights::init(&cfg, rng)?;
    w.tensors_mut().into_iter().for_each(|t| {
        let noise = rand_tensor(rng, t.shape(), 0.1);
        t.add_assign(&noise).expect("same shape");
    });
    let (f1, f2) = (rand_tensor(rng, &[2, 2, 3], 1.0), rand_tensor(rng, &[2, 2, 3], 1.0));
    let (g1, g2) = (rand_tensor(rng, &[2, 2, 3], 1.0), rand_tensor(rng, &[2, 2, 3], 1.0));
    let objective = |w: &CfmWeights, f1: &Tensor, f2: &Tensor| {
        let (o1, o2) = cfm_forward(f1, f2, w).unwrap();
        weighted_sum(&o1, &g1) + weighted_sum(&o2, &g2)
    };
    let (gf1, gf2, gw) = cfm_backward(&f1, &f2, &w, &g1, &g2)?;
    let mut worst = parameter_fd_error(&w, &gw, |q| objective(q, &f1, &f2));
    let fd1 = crate::tensor::finite_diff_grad(|x| objective(&w, x, &f2), &f1, FD_STEP)?;
    let fd2 = crate::tensor::finite_diff_grad(|x| objective(&w, &f1, x), &f2, FD_STEP)?;
    for (fd, an) in [(&fd1, &gf1), (&fd2, &gf2)] {
        worst = fd.data().iter().zip(an.data()).map(|(a, b)| rel_err(*a, *b)).fold(worst, f64::max);
    }
    Ok((
        worst < FD_TOLERANCE,
        format!("worst relative error {worst:.3e} over {} parameters", w.num_params()),
    ))
}

fn loss_gradients(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cfg = LossConfig {
        anchors: AnchorSet::from_strides(&[8.0, 16.0]),
        label_smoothing: 0.1,
        ..LossConfig::default()
    };
    let raw: Vec<Tensor> = [4usize, 2].iter().map(|&s| rand_tensor(rng, &[3 * 7, s, s], 1.5)).collect();
    let gts = vec![
        GroundTruth::new(BBox::new(10.3, 14.1, 10.0, 6.0), 1, Modality::Tir),
        GroundTruth::new(BBox::new(22.0, 8.7, 20.0, 9.0), 0, Modality::Tir),
    ];
    let d = detach(&raw, &gts, &cfg)?;
    let (_, grads) = total_loss_detached(&raw, &gts, &cfg, &d)?;
    let mut worst = 0.0f64;
    for (lvl, g) in grads.iter().enumerate() {
        let fd = crate::tensor::finite_diff_grad(
            |x| {
                let mut r = raw.clone();
                r[lvl] = x.clone();
                total_loss_detached(&r, &gts, &cfg, &d).unwrap().0.total
            },
            &raw[lvl],
            FD_STEP,
        )?;
        worst = fd.data().iter().zip(g.data()).map(|(a, b)| rel_err(*a, *b)).fold(worst, f64::max);
    }
    Ok((worst < FD_TOLERANCE, format!("worst relative error {worst:.3e}")))
}

fn cfm_reductions(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cfg = CfmConfig::new(4);
    let (f1, f2) = (rand_tensor(rng, &[4, 3, 5], 1.0), rand_tensor(rng, &[4, 3, 5], 1.0));

    let mut zero = CfmWeights::init(&cfg, rng)?;
    zero.zero_non_residual();
    let (o1, o2) = cfm_forward(&f1, &f2, &zero)?;
    let identity = o1.max_abs_diff(&f1)?.max(o2.max_abs_diff(&f2)?);

    let full = CfmWeights::init(&cfg, rng)?;
    let bid = full.restrict_directions(&ScanDirection::ALL[..2]);
    let mut disabled = full.clone();
    disabled.s6[2..].iter_mut().for_each(|p| p.silence());
    let (a1, a2) = cfm_forward(&f1, &f2, &disabled)?;
    let (b1, b2) = cfm_forward(&f1, &f2, &bid)?;
    let bid_gap = a1.max_abs_diff(&b1)?.max(a2.max_abs_diff(&b2)?);

    let mut dc = DetectorConfig::new(3, FusionMode::Cfm);
    dc.widths = [4, 4, 8, 8, 8, 8];
    dc.state_size = 2;
    let mut det = Detector::init(dc, rng)?;
    det.cfm.iter_mut().for_each(|w| w.zero_non_residual());
    let add = det.with_fusion(FusionMode::Add)?;
    let (rgb, tir) = (
        Tensor::from_fn(&[3, 64, 64], |_| rng.gen_range(0.0..1.0)),
        Tensor::from_fn(&[3, 64, 64], |_| rng.gen_range(0.0..1.0)),
    );
    let mut det_gap = 0.0f64;
    for (x, y) in det.forward(&rgb, &tir)?.iter().zip(add.forward(&rgb, &tir)?) {
        det_gap = det_gap.max(x.max_abs_diff(&y)?);
    }
    let worst = identity.max(bid_gap).max(det_gap);
    Ok((
        worst <= 1e-10,
        format!("identity {identity:.1e}, bid {bid_gap:.1e}, detector add {det_gap:.1e}"),
    ))
}

fn metric_cases() -> Result<(bool, String)> {
    let g = |x: f64, k: usize| GroundTruth::new(BBox::new(x, 10.0, 8.0, 8.0), k, Modality::Tir);
    let det = |x: f64, k: usize, s: f64| Detection {
        bbox: BBox::new(x, 10.0, 8.0, 8.0),
        class_id: k,
        score: s,
    };
    let mut failures = Vec::new();
    if average_precision(&[det(10.0, 0, 0.9)], &[g(10.0, 0)], 0.5) != Some(1.0) {
        failures.push("single hit");
    }
    let half = average_precision(&[det(50.0, 0, 0.9), det(10.0, 0, 0.5)], &[g(10.0, 0)], 0.5);
    if half.is_none_or(|v| (v - 0.5).abs() > 1e-12) {
        failures.push("false positive ranked first");
    }
    let gts = vec![vec![g(10.0, 0), g(30.0, 1)], vec![g(20.0, 2)]];
    let perfect: Vec<Vec<Detection>> = gts
        .iter()
        .map(|v| v.iter().map(|t| det(t.bbox.cx, t.class_id, 1.0)).collect())
        .collect();
    let r = mean_ap(&perfect, &gts, 3, &coco_thresholds());
    if r.map50 != 1.0 || r.map50_95 != 1.0 {
        failures.push("perfect detections");
    }
    let b = BBox::new(3.0, 4.0, 5.0, 2.0);
    if ciou_loss(&b, &b)?.abs() > 1e-12 {
        failures.push("ciou of identical boxes");
    }
    Ok((failures.is_empty(), if failures.is_empty() { "hand cases agree".into() } else { failures.join(", ") }))
}

fn fusion_gt_cases() -> Result<(bool, String)> {
    let b = |cx: f64, s: f64, m: Modality| GroundTruth::new(BBox::new(cx, 20.0, s, s), 0, m);
    let mut failures = Vec::new();
    let paired = prepare_gt(&[b(20.0, 10.0, Modality::Rgb)], &[b(20.0, 12.0, Modality::Tir)], GtForm::Fusion);
    if paired.len() != 1 || paired[0].bbox.w != 12.0 {
        failures.push("paired keeps larger");
    }
    let disjoint = prepare_gt(&[b(5.0, 4.0, Modality::Rgb)], &[b(40.0, 4.0, Modality::Tir)], GtForm::Fusion);
    if disjoint.len() != 2 {
        failures.push("unpaired pass through");
    }
    let tie = prepare_gt(&[b(20.0, 10.0, Modality::Rgb)], &[b(20.0, 10.0, Modality::Tir)], GtForm::Fusion);
    if tie.len() != 1 || tie[0].modality != Modality::Tir {
        failures.push("tie keeps thermal");
    }
    Ok((failures.is_empty(), if failures.is_empty() { "hand cases agree".into() } else { failures.join(", ") }))
}

type Check = fn(&mut ChaCha8Rng) -> Result<(bool, String)>;

/// Runs every suite; an error inside a suite counts as a failure.
pub fn run_selfcheck(seed: u64) -> Vec<CheckOutcome> {
    let checks: [(&'static str, Check); 8] = [
        ("scan-vs-sequential", scan_oracle),
        ("ss2d-round-trip", |_| ss2d_round_trip()),
        ("s6-gradients", s6_gradients),
        ("cfm-gradients", cfm_gradients),
        ("loss-gradients", loss_gradients),
        ("cfm-reductions", cfm_reductions),
        ("metric-cases", |_| metric_cases()),
        ("fusion-gt-cases", |_| fusion_gt_cases()),
    ];
    checks
        .iter()
        .map(|(name, f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Instant::now();
            let (passed, detail) = f(&mut rng).unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckOutcome {
                name,
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
