use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use remotedet::config::RunConfig;
use remotedet::data::{detector_checkpoint, generate_range, SamplePair};
use remotedet::detector::FusionMode;
use remotedet::harness::*;
use remotedet::metrics::{prepare_gt, Detection, GtForm};
use remotedet::{Error, Modality};

fn cfg(fusion: FusionMode) -> RunConfig {
    RunConfig {
        fusion,
        widths: [4, 8, 16, 16, 32, 32],
        n_train: 8,
        n_val: 4,
        epochs: 1,
        batch: 2,
        augment: false,
        seed: 11,
        ..RunConfig::default()
    }
}

#[test]
fn one_epoch_lowers_training_loss() {
    for fusion in [FusionMode::Add, FusionMode::Cfm] {
        let c = cfg(fusion);
        let (tr, va) = dataset_split(&c).unwrap();
        let mut start = init_detector(&c).unwrap();
        let pairs: Vec<_> = tr.iter().take(CALIBRATION_SAMPLES).map(|s| (&s.rgb, &s.tir)).collect();
        start.calibrate(&pairs).unwrap();
        let before = dataset_loss(&start, &c, &tr).unwrap().total;
        let mut logs = Vec::new();
        let out = train(&c, &tr, &va, &mut |e| logs.push(e.clone())).unwrap();
        let after = dataset_loss(&out.last, &c, &tr).unwrap().total;
        assert!(after < before, "{fusion}: {before} -> {after}");
        assert_eq!(logs.len(), 1);
        assert_eq!(logs[0].lr, c.lr_init);
        assert!(logs[0].line().starts_with("epoch=0 lr=0.010000 loss="));
    }
}

#[test]
fn runs_are_deterministic() {
    let c = RunConfig { epochs: 2, augment: true, ..cfg(FusionMode::Cfm) };
    let (tr, va) = dataset_split(&c).unwrap();
    let a = train(&c, &tr, &va, &mut |_| {}).unwrap();
    let b = train(&c, &tr, &va, &mut |_| {}).unwrap();
    assert_eq!(detector_checkpoint(&a.last, &[]).to_bytes(), detector_checkpoint(&b.last, &[]).to_bytes());
    assert_eq!(detector_checkpoint(&a.best, &[]).to_bytes(), detector_checkpoint(&b.best, &[]).to_bytes());
    let strip = |h: &[EpochLog]| h.iter().map(|e| (e.loss, e.val_map50, e.val_map50_95)).collect::<Vec<_>>();
    assert_eq!(strip(&a.history), strip(&b.history));
    let other = train(&RunConfig { seed: 12, ..c.clone() }, &tr, &va, &mut |_| {}).unwrap();
    assert_ne!(other.last, a.last);
}

#[test]
fn best_checkpoint_tracks_validation() {
    let c = RunConfig { epochs: 3, ..cfg(FusionMode::Add) };
    let (tr, va) = dataset_split(&c).unwrap();
    let out = train(&c, &tr, &va, &mut |_| {}).unwrap();
    let top = out.history.iter().map(|e| e.val_map50).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_map50, top);
    assert_eq!(out.history[out.best_epoch].val_map50, top);
    let again = evaluate(&out.best, &va, c.gt_form, c.eval_conf, c.iou).unwrap();
    assert_eq!(again.map50, top);
}

#[test]
fn single_branch_training() {
    let c = RunConfig { branch: Modality::Rgb, ..cfg(FusionMode::None) };
    let (tr, va) = dataset_split(&c).unwrap();
    let out = train(&c, &tr, &va, &mut |_| {}).unwrap();
    assert!(out.last.tir.is_none() && out.last.rgb.is_some());
}

#[test]
fn divergence_is_reported() {
    for mode in [FusionMode::Add, FusionMode::Cfm] {
        let c = RunConfig { lr_init: 1e12, lr_final: 1e12, epochs: 3, batch: 1, grad_clip: 0.0, ..cfg(mode) };
        let (tr, _) = dataset_split(&c).unwrap();
        let e = train(&c, &tr, &[], &mut |_| {}).unwrap_err();
        assert!(matches!(e, Error::Divergence { .. }), "{mode}: {e}");
        assert_eq!(e.exit_code(), 4);
    }
}

#[test]
fn empty_training_set_rejected() {
    let c = cfg(FusionMode::Add);
    assert!(matches!(train(&c, &[], &[], &mut |_| {}), Err(Error::Config(_))));
}

fn oracle_detections(samples: &[SamplePair], form: GtForm) -> Vec<Vec<Detection>> {
    samples
        .iter()
        .map(|s| {
            prepare_gt(&s.rgb_gts, &s.tir_gts, form)
                .into_iter()
                .map(|g| Detection { bbox: g.bbox, class_id: g.class_id, score: 1.0 })
                .collect()
        })
        .collect()
}

#[test]
fn scoring_oracles() {
    let samples = generate_range(0..20, 5, &RunConfig::default().synth_spec(), 1).unwrap();
    for form in [GtForm::Rgb, GtForm::Tir, GtForm::Fusion] {
        let r = score(&oracle_detections(&samples, form), &samples, form);
        assert_eq!((r.map50, r.map50_95), (1.0, 1.0));
    }
    let none: Vec<Vec<Detection>> = vec![Vec::new(); samples.len()];
    assert_eq!(score(&none, &samples, GtForm::Fusion).map50, 0.0);
    // single-modality boxes scored against the fused ground truth miss objects
    let rgb_only = score(&oracle_detections(&samples, GtForm::Rgb), &samples, GtForm::Fusion);
    assert!(rgb_only.map50 < 1.0);
}

#[test]
fn evaluation_repeats_exactly() {
    let c = cfg(FusionMode::Cfm);
    let det = init_detector(&c).unwrap();
    let (_, va) = dataset_split(&c).unwrap();
    let a = evaluate(&det, &va, GtForm::Fusion, 0.001, 0.45).unwrap();
    let b = evaluate(&det, &va, GtForm::Fusion, 0.001, 0.45).unwrap();
    assert_eq!(a, b);
    let text = render_report(&a);
    assert!(text.contains("mAP50=") && text.contains("AP50.bus="));
}

#[test]
fn augmentation_flips_labels_with_pixels() {
    let s = &generate_range(0..1, 2, &RunConfig::default().synth_spec(), 1).unwrap()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut flipped = false;
    for _ in 0..16 {
        let (r, t, g) = augment(&s.rgb, &s.tir, &s.tir_gts, &mut rng);
        assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if t != s.tir {
            flipped = true;
            for (a, b) in g.iter().zip(&s.tir_gts) {
                assert!((a.bbox.cx - (64.0 - b.bbox.cx)).abs() < 1e-12 && a.bbox.w == b.bbox.w);
            }
            // thermal pixels are mirrored, never recolored
            assert_eq!(t.data()[0], s.tir.data()[63]);
        } else {
            assert_eq!(g, s.tir_gts);
        }
    }
    assert!(flipped);
}

#[test]
fn bench_reports_consistent_numbers() {
    let c = cfg(FusionMode::Cfm);
    let det = init_detector(&c).unwrap();
    let r = bench(&det, 64, 10, 0.25, 0.45).unwrap();
    assert!((r.fps - 1000.0 / r.mean_ms).abs() < 1e-9);
    assert!(r.p50_ms <= r.p95_ms);
    let staged = r.backbone_ms + r.fusion_ms + r.neck_head_ms + r.decode_ms;
    assert!((staged - r.mean_ms).abs() < 1e-6 * r.mean_ms.max(1.0));
    assert!(r.render().contains("fps="));
    assert!(matches!(bench(&det, 64, 5, 0.25, 0.45), Err(Error::Config(_))));
}
