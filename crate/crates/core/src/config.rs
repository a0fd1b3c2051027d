//! Flat `key = value` run configuration. Every key can also be set from the
//! command line; the effective configuration is written next to every output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::SynthSpec;
use crate::detector::{DetectorConfig, FusionMode, DEFAULT_CONF, DEFAULT_IOU, DEFAULT_WIDTHS};
use crate::error::{Error, Result};
use crate::metrics::{GtForm, LossConfig};
use crate::Modality;

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub gt_form: GtForm,
    pub fusion: FusionMode,
    /// Branch of single-modality models.
    pub branch: Modality,
    pub epochs: usize,
    pub batch: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub augment: bool,
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub exclusivity: f64,
    pub widths: [usize; 6],
    pub state_size: usize,
    /// Score threshold for `detect` and `bench`.
    pub conf: f64,
    pub iou: f64,
    /// Score threshold used when computing AP.
    pub eval_conf: f64,
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
    pub label_smoothing: f64,
    pub bench_iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            seed: 0,
            gt_form: GtForm::Fusion,
            fusion: FusionMode::Cfm,
            branch: Modality::Tir,
            epochs: 10,
            batch: 8,
            lr_init: 1e-2,
            lr_final: 2e-3,
            momentum: 0.937,
            weight_decay: 5e-4,
            grad_clip: 10.0,
            augment: true,
            image_size: 64,
            n_train: 512,
            n_val: 128,
            exclusivity: 0.5,
            widths: DEFAULT_WIDTHS,
            state_size: crate::s6::DEFAULT_STATE,
            conf: DEFAULT_CONF,
            iou: DEFAULT_IOU,
            eval_conf: 0.001,
            box_weight: loss.box_weight,
            obj_weight: loss.obj_weight,
            cls_weight: loss.cls_weight,
            label_smoothing: loss.label_smoothing,
            bench_iters: 20,
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("`{key}` = `{value}`: expected {what}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, what))
}

impl RunConfig {
    pub const KEYS: [&'static str; 27] = [
        "seed",
        "gt_form",
        "fusion",
        "branch",
        "epochs",
        "batch",
        "lr",
        "lr_final",
        "momentum",
        "weight_decay",
        "grad_clip",
        "augment",
        "image_size",
        "n_train",
        "n_val",
        "exclusivity",
        "widths",
        "state_size",
        "conf",
        "iou",
        "eval_conf",
        "box_weight",
        "obj_weight",
        "cls_weight",
        "label_smoothing",
        "bench_iters",
        "classes",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_num(key, v, "an unsigned integer")?,
            "gt_form" => self.gt_form = v.parse()?,
            "fusion" => self.fusion = v.parse()?,
            "branch" => self.branch = v.parse()?,
            "epochs" => self.epochs = parse_num(key, v, "an unsigned integer")?,
            "batch" => self.batch = parse_num(key, v, "an unsigned integer")?,
            "lr" => self.lr_init = parse_num(key, v, "a number")?,
            "lr_final" => self.lr_final = parse_num(key, v, "a number")?,
            "momentum" => self.momentum = parse_num(key, v, "a number")?,
            "weight_decay" => self.weight_decay = parse_num(key, v, "a number")?,
            "grad_clip" => self.grad_clip = parse_num(key, v, "a number")?,
            "augment" => self.augment = parse_num(key, v, "true or false")?,
            "image_size" => self.image_size = parse_num(key, v, "an unsigned integer")?,
            "n_train" => self.n_train = parse_num(key, v, "an unsigned integer")?,
            "n_val" => self.n_val = parse_num(key, v, "an unsigned integer")?,
            "exclusivity" => self.exclusivity = parse_num(key, v, "a number")?,
            "widths" => {
                let ws: Vec<usize> = v
                    .split(',')
                    .map(|w| w.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(key, v, "six comma-separated integers"))?;
                self.widths = ws.try_into().map_err(|_| bad(key, v, "six comma-separated integers"))?;
            }
            "state_size" => self.state_size = parse_num(key, v, "an unsigned integer")?,
            "conf" => self.conf = parse_num(key, v, "a number")?,
            "iou" => self.iou = parse_num(key, v, "a number")?,
            "eval_conf" => self.eval_conf = parse_num(key, v, "a number")?,
            "box_weight" => self.box_weight = parse_num(key, v, "a number")?,
            "obj_weight" => self.obj_weight = parse_num(key, v, "a number")?,
            "cls_weight" => self.cls_weight = parse_num(key, v, "a number")?,
            "label_smoothing" => self.label_smoothing = parse_num(key, v, "a number")?,
            "bench_iters" => self.bench_iters = parse_num(key, v, "an unsigned integer")?,
            "classes" => {
                let k: usize = parse_num(key, v, "an unsigned integer")?;
                if k != crate::data::CLASS_NAMES.len() {
                    return Err(bad(key, v, "3 (car, truck, bus)"));
                }
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected `key = value`", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{source}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let ws: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("gt_form", self.gt_form.to_string()),
            ("fusion", self.fusion.to_string()),
            ("branch", self.branch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr_init.to_string()),
            ("lr_final", self.lr_final.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("augment", self.augment.to_string()),
            ("image_size", self.image_size.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("exclusivity", self.exclusivity.to_string()),
            ("widths", ws.join(",")),
            ("state_size", self.state_size.to_string()),
            ("conf", self.conf.to_string()),
            ("iou", self.iou.to_string()),
            ("eval_conf", self.eval_conf.to_string()),
            ("box_weight", self.box_weight.to_string()),
            ("obj_weight", self.obj_weight.to_string()),
            ("cls_weight", self.cls_weight.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("bench_iters", self.bench_iters.to_string()),
            ("classes", crate::data::CLASS_NAMES.len().to_string()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            writeln!(s, "{k} = {v}").expect("write to string");
        }
        s
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(CONFIG_FILE);
        fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr_final > 0.0 && self.lr_init >= self.lr_final && self.lr_init.is_finite()) {
            return fail(format!(
                "learning rates must satisfy lr >= lr_final > 0 (got {} and {})",
                self.lr_init, self.lr_final
            ));
        }
        if self.epochs == 0 || self.batch == 0 {
            return fail("epochs and batch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return fail("weight decay and gradient clip must be non-negative".into());
        }
        for (name, t) in [("conf", self.conf), ("iou", self.iou), ("eval_conf", self.eval_conf)] {
            if !(t > 0.0 && t < 1.0) {
                return fail(format!("threshold `{name}` = {t} outside (0, 1)"));
            }
        }
        if self.n_train == 0 {
            return fail("n_train must be at least 1".into());
        }
        self.detector_config().validate()?;
        self.loss_config().validate()?;
        self.synth_spec().validate()
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            widths: self.widths,
            classes: crate::data::CLASS_NAMES.len(),
            fusion: self.fusion,
            branch: self.branch,
            state_size: self.state_size,
            image_size: self.image_size,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            box_weight: self.box_weight,
            obj_weight: self.obj_weight,
            cls_weight: self.cls_weight,
            label_smoothing: self.label_smoothing,
            ..LossConfig::default()
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            image_size: self.image_size,
            exclusivity: self.exclusivity,
            ..SynthSpec::default()
        }
    }

    /// Learning rate of `epoch` (0-based): linear from `lr_init` to `lr_final`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_init;
        }
        let f = epoch as f64 / (self.epochs - 1) as f64;
        self.lr_init + (self.lr_final - self.lr_init) * f
    }
}
