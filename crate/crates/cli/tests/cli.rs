use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_remotedet"))
        .args(args)
        .env("REMOTEDET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const TINY: [&str; 8] = ["--set", "n_train=6", "--set", "n_val=3", "--set", "widths=4,8,16,16,32,32", "--set", "batch=3"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

fn config_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("config.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
        .unwrap_or_else(|| panic!("{key} missing"))
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run_dir = tmp.path().join("run");
    let d = data.to_str().unwrap();
    let r = run_dir.to_str().unwrap();

    let o = run(&with(&["generate", "--seed", "3", "--out", d], &TINY));
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(fs::read_dir(data.join("train/rgb")).unwrap().count(), 6);
    assert_eq!(fs::read_dir(data.join("val/tir_labels")).unwrap().count(), 3);
    assert_eq!(config_value(&data, "seed"), "3");

    let o = run(&with(&["train", "--data", d, "--epochs", "2", "--fusion", "cfm", "--out", r, "--lr", "0.02"], &TINY));
    assert!(o.status.success(), "{}", text(&o));
    for f in ["best.ckpt", "last.ckpt", "train_log.txt", "metrics.txt", "config.txt"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(run_dir.join("train_log.txt")).unwrap().lines().count(), 2);
    assert_eq!(config_value(&run_dir, "lr"), "0.02");
    assert_eq!(config_value(&run_dir, "fusion"), "cfm");
    let ckpt = run_dir.join("best.ckpt");
    let c = ckpt.to_str().unwrap();

    let eval_dir = tmp.path().join("eval");
    let o = run(&with(&["eval", "--checkpoint", c, "--data", d, "--out", eval_dir.to_str().unwrap()], &TINY));
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("mAP50="));
    assert!(fs::read_to_string(eval_dir.join("eval.txt")).unwrap().contains("AP50.car="));

    // the same weights scored again, and under a reduced fusion mode
    let again = run(&with(&["eval", "--checkpoint", c, "--data", d], &TINY));
    assert_eq!(String::from_utf8_lossy(&again.stdout), String::from_utf8_lossy(&o.stdout));
    let bid = run(&with(&["eval", "--checkpoint", c, "--data", d, "--fusion", "bid"], &TINY));
    assert!(bid.status.success(), "{}", text(&bid));

    let bench_dir = tmp.path().join("bench");
    let o = run(&with(&["bench", "--checkpoint", c, "--set", "bench_iters=10", "--out", bench_dir.to_str().unwrap()], &TINY));
    assert!(o.status.success(), "{}", text(&o));
    let b = fs::read_to_string(bench_dir.join("bench.txt")).unwrap();
    assert!(b.starts_with("fusion=cfm") && b.contains("fps=") && b.contains("fusion_ms="));

    let det_dir = tmp.path().join("detect");
    let rgb = data.join("val/rgb/000006.png");
    let tir = data.join("val/tir/000006.png");
    let o = run(&with(
        &["detect", "--checkpoint", c, "--rgb", rgb.to_str().unwrap(), "--tir", tir.to_str().unwrap(), "--out", det_dir.to_str().unwrap()],
        &TINY,
    ));
    assert!(o.status.success(), "{}", text(&o));
    for f in ["detections.txt", "rgb_detections.png", "tir_detections.png", "config.txt"] {
        assert!(det_dir.join(f).is_file(), "{f}");
    }
}

#[test]
fn config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "seed = 9\nn_train = 2\nn_val = 0\nexclusivity = 0.0\n").unwrap();
    let out = tmp.path().join("gen");
    let o = run(&["generate", "--config", cfg.to_str().unwrap(), "--set", "seed=4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(config_value(&out, "seed"), "4");
    assert_eq!(config_value(&out, "exclusivity"), "0");
    assert!(!out.join("val").exists());
    let o = run(&["generate", "--config", cfg.to_str().unwrap(), "--seed", "5", "--set", "seed=4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(config_value(&out, "seed"), "5");
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(run(&["generate", "--image-size", "48", "--out", out]).status.code(), Some(2));
    assert_eq!(run(&["generate", "--set", "colour=red", "--out", out]).status.code(), Some(2));
    assert_eq!(run(&["generate", "--set", "novalue", "--out", out]).status.code(), Some(2));
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "lr = 0.001\nlr_final = 0.01\n").unwrap();
    let o = run(&["generate", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("lr_final"));
    // clap's own usage errors share the code
    assert_eq!(run(&["train", "--fusion", "mamba"]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.ckpt");
    let o = run(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));

    let o = run(&with(&["generate", "--out", tmp.path().join("d").to_str().unwrap()], &TINY));
    assert!(o.status.success());
    let labels = tmp.path().join("d/train/rgb_labels/000000.txt");
    fs::write(&labels, "0 0 4 0 4 2 0 2 tank 0\n").unwrap();
    let o = run(&with(&["train", "--data", tmp.path().join("d").to_str().unwrap(), "--epochs", "1"], &TINY));
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(text(&o).contains("tank"));
}

#[test]
fn version_mismatch_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bogus = tmp.path().join("x.ckpt");
    let mut bytes = b"RDMCKPT\0".to_vec();
    bytes.extend_from_slice(&99u32.to_le_bytes());
    fs::write(&bogus, bytes).unwrap();
    let o = run(&["bench", "--checkpoint", bogus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn divergence_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&with(
        &["train", "--lr", "1e12", "--set", "lr_final=1e12", "--set", "grad_clip=0", "--epochs", "3", "--out", tmp.path().to_str().unwrap()],
        &["--set", "n_train=4", "--set", "n_val=0", "--set", "widths=4,8,16,16,32,32", "--set", "batch=1"],
    ));
    assert_eq!(o.status.code(), Some(4), "{}", text(&o));
}

#[test]
fn selfcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["selfcheck", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let report = fs::read_to_string(tmp.path().join("selfcheck.txt")).unwrap();
    assert!(report.lines().count() >= 8);
    assert!(report.lines().all(|l| l.starts_with("[PASS]")), "{report}");
}

#[test]
fn bench_without_checkpoint() {
    let o = run(&["bench", "--fusion", "add", "--set", "widths=4,8,16,16,32,32", "--set", "bench_iters=10", "--image-size", "32"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("fusion=add") && text(&o).contains("image_size=32"));
}
