use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use remotedet::config::RunConfig;
use remotedet::data::{
    load_dataset, load_detector, load_image, save_annotated, save_dataset, save_detector, CLASS_NAMES,
};
use remotedet::detector::{Detector, FusionMode};
use remotedet::harness::{bench, dataset_split, evaluate, init_detector, render_report, train};
use remotedet::metrics::GtForm;
use remotedet::selfcheck::run_selfcheck;
use remotedet::{Error, Modality, Result};

#[derive(Parser)]
#[command(name = "remotedet", version, about = "RGB-thermal fusion detector toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// rgb, tir or fusion
    #[arg(long = "gt-form", global = true)]
    gt_form: Option<GtForm>,
    /// none, add, bid or cfm
    #[arg(long, global = true)]
    fusion: Option<FusionMode>,
    /// Branch used by single-modality models: rgb or tir
    #[arg(long, global = true)]
    branch: Option<Modality>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Initial learning rate
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long = "image-size", global = true)]
    image_size: Option<usize>,
    /// Extra `key=value` overrides, applied after the file and before the flags above
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset (train/ and val/) to --out
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a detector; writes checkpoints, the epoch log and the best validation report
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset written by `generate`; synthesized in memory when absent
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on the validation set
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Single-image latency and per-stage timing
    Bench {
        #[command(flatten)]
        common: Common,
        /// Randomly initialized model from the configuration when absent
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Detect objects in one RGB/thermal pair and write annotated images
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        tir: PathBuf,
    },
    /// Run the built-in oracle suites
    Selfcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.gt_form {
        cfg.gt_form = v;
    }
    if let Some(v) = c.fusion {
        cfg.fusion = v;
    }
    if let Some(v) = c.branch {
        cfg.branch = v;
    }
    if let Some(v) = c.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = c.lr {
        cfg.lr_init = v;
    }
    if let Some(v) = c.image_size {
        cfg.image_size = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_split(dir: &Path, name: &str) -> Result<Vec<remotedet::data::SamplePair>> {
    let sub = dir.join(name);
    if sub.is_dir() {
        load_dataset(&sub)
    } else {
        load_dataset(dir)
    }
}

/// Checkpoint weights, converted when `--fusion` asks for another mode.
fn model(path: &Path, c: &Common) -> Result<Detector> {
    let (det, _) = load_detector(path)?;
    match c.fusion {
        Some(f) if f != det.config.fusion => det.with_fusion(f),
        _ => Ok(det),
    }
}

fn generate(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let out = out_dir(c, "data");
    let (tr, va) = dataset_split(&cfg)?;
    save_dataset(&out.join("train"), &tr)?;
    if !va.is_empty() {
        save_dataset(&out.join("val"), &va)?;
    }
    cfg.echo_to(&out)?;
    println!("wrote {} train and {} val pairs to {}", tr.len(), va.len(), out.display());
    Ok(())
}

fn run_train(c: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = resolve(c)?;
    let out = out_dir(c, "runs/train");
    cfg.echo_to(&out)?;
    let (tr, va) = match data {
        Some(d) => (load_split(d, "train")?, if d.join("val").is_dir() { load_dataset(&d.join("val"))? } else { Vec::new() }),
        None => dataset_split(&cfg)?,
    };
    let mut log = String::new();
    let outcome = train(&cfg, &tr, &va, &mut |e| {
        println!("{}", e.line());
        log.push_str(&e.line());
        log.push('\n');
    })?;
    write(&out.join("train_log.txt"), &log)?;
    let meta = |epoch: usize, m: f64| {
        vec![
            ("seed".to_string(), cfg.seed.to_string()),
            ("epoch".to_string(), epoch.to_string()),
            ("val_map50".to_string(), m.to_string()),
        ]
    };
    save_detector(&out.join("best.ckpt"), &outcome.best, &meta(outcome.best_epoch, outcome.best_map50))?;
    let last = outcome.history.last().expect("at least one epoch");
    save_detector(&out.join("last.ckpt"), &outcome.last, &meta(last.epoch, last.val_map50))?;
    if !va.is_empty() {
        let report = evaluate(&outcome.best, &va, cfg.gt_form, cfg.eval_conf, cfg.iou)?;
        let text = render_report(&report);
        write(&out.join("metrics.txt"), &text)?;
        println!("best epoch {}\n{text}", outcome.best_epoch);
    }
    Ok(())
}

fn run_eval(c: &Common, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let cfg = resolve(c)?;
    let det = model(checkpoint, c)?;
    let samples = match data {
        Some(d) => load_split(d, "val")?,
        None => dataset_split(&cfg)?.1,
    };
    if samples.is_empty() {
        return Err(Error::Config("no validation samples (n_val = 0)".into()));
    }
    let report = evaluate(&det, &samples, cfg.gt_form, cfg.eval_conf, cfg.iou)?;
    let text = render_report(&report);
    print!("{text}");
    if let Some(out) = &c.out {
        cfg.echo_to(out)?;
        write(&out.join("eval.txt"), &text)?;
    }
    Ok(())
}

fn run_bench(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = resolve(c)?;
    let det = match checkpoint {
        Some(p) => model(p, c)?,
        None => init_detector(&cfg)?,
    };
    let report = bench(&det, cfg.image_size, cfg.bench_iters, cfg.conf, cfg.iou)?;
    let text = format!("fusion={}\n{}", det.config.fusion, report.render());
    print!("{text}");
    if let Some(out) = &c.out {
        cfg.echo_to(out)?;
        write(&out.join("bench.txt"), &text)?;
    }
    Ok(())
}

fn run_detect(c: &Common, checkpoint: &Path, rgb: &Path, tir: &Path) -> Result<()> {
    let cfg = resolve(c)?;
    let det = model(checkpoint, c)?;
    let (rgb_img, tir_img) = (load_image(rgb)?, load_image(tir)?);
    let dets = det.detect(&rgb_img, &tir_img, cfg.conf, cfg.iou)?;
    let mut text = String::new();
    for d in &dets {
        text.push_str(&format!(
            "{} {:.6} {:.3} {:.3} {:.3} {:.3}\n",
            CLASS_NAMES[d.class_id], d.score, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
        ));
    }
    print!("{text}");
    let out = out_dir(c, "runs/detect");
    cfg.echo_to(&out)?;
    write(&out.join("detections.txt"), &text)?;
    save_annotated(&out.join("rgb_detections.png"), &rgb_img, &dets)?;
    save_annotated(&out.join("tir_detections.png"), &tir_img, &dets)?;
    Ok(())
}

fn selfcheck(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let results = run_selfcheck(cfg.seed);
    let mut text = String::new();
    for r in &results {
        println!("{}", r.line());
        text.push_str(&r.line());
        text.push('\n');
    }
    if let Some(out) = &c.out {
        cfg.echo_to(out)?;
        write(&out.join("selfcheck.txt"), &text)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Evaluation(format!("failed checks: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { common } => generate(common),
        Command::Train { common, data } => run_train(common, data.as_deref()),
        Command::Eval { common, checkpoint, data } => run_eval(common, checkpoint, data.as_deref()),
        Command::Bench { common, checkpoint } => run_bench(common, checkpoint.as_deref()),
        Command::Detect { common, checkpoint, rgb, tir } => run_detect(common, checkpoint, rgb, tir),
        Command::Selfcheck { common } => selfcheck(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
