//! Siamese two-branch detector: one CNN backbone per modality, fusion at three
//! pyramid taps, a top-down neck and anchor-based heads.

mod backbone;
mod decode;
mod layers;
mod neck;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;

pub use backbone::{Backbone, BackboneCache, FeatureMap, INPUT_MULTIPLE};
pub use decode::{decode_predictions, nms, AnchorSet};
pub(crate) use decode::{decode_box, num_classes, CLS, OBJ, TH, TW, TX, TY};
use layers::probe_pre_activations;
pub use layers::{C3Cache, Conv, ConvCache, Sppf, SppfCache, C3, SPPF_POOL};
pub use neck::{Head, HeadCache, Neck, NeckCache};

use crate::cfm::{cfm_backward_cached, cfm_forward, cfm_forward_cached, CfmCache, CfmConfig, CfmWeights};
use crate::error::{Error, Result};
use crate::params::{impl_parameters, Parameters};
use crate::ss2d::ScanDirection;
use crate::tensor::Tensor;
use crate::Modality;

/// Backbone stages whose outputs feed the pyramid.
pub const FUSION_TAPS: [usize; 3] = [2, 3, 5];
pub const DEFAULT_WIDTHS: [usize; 6] = [16, 32, 64, 128, 256, 256];
pub const ANCHORS_PER_CELL: usize = 3;
pub const DEFAULT_CONF: f64 = 0.25;
pub const DEFAULT_IOU: f64 = 0.45;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Single branch, no fusion.
    None,
    /// Element-wise sum of the two branches.
    Add,
    /// Fusion block with the two row-major scans only.
    Bid,
    /// Fusion block with all four scans.
    Cfm,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [FusionMode::None, FusionMode::Add, FusionMode::Bid, FusionMode::Cfm];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Add => "add",
            FusionMode::Bid => "bid",
            FusionMode::Cfm => "cfm",
        }
    }

    pub fn uses_block(self) -> bool {
        matches!(self, FusionMode::Bid | FusionMode::Cfm)
    }

    fn directions(self) -> Vec<ScanDirection> {
        match self {
            FusionMode::Bid => ScanDirection::ALL[..2].to_vec(),
            FusionMode::Cfm => ScanDirection::ALL.to_vec(),
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "none" => FusionMode::None,
            "add" => FusionMode::Add,
            "bid" => FusionMode::Bid,
            "cfm" => FusionMode::Cfm,
            other => return Err(Error::Config(format!("unknown fusion mode '{other}' (none|add|bid|cfm)"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub widths: [usize; 6],
    pub classes: usize,
    pub fusion: FusionMode,
    /// Branch used when `fusion` is [`FusionMode::None`].
    pub branch: Modality,
    pub state_size: usize,
    /// Used only to set the objectness prior of the heads.
    pub image_size: usize,
}

impl DetectorConfig {
    pub fn new(classes: usize, fusion: FusionMode) -> Self {
        Self {
            widths: DEFAULT_WIDTHS,
            classes,
            fusion,
            branch: Modality::Tir,
            state_size: crate::s6::DEFAULT_STATE,
            image_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        if self.widths.iter().any(|&w| w < 2) {
            return Err(Error::Config(format!("channel widths {:?} must all be >= 2", self.widths)));
        }
        if self.state_size == 0 {
            return Err(Error::Config("state size must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % INPUT_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of {INPUT_MULTIPLE}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Widths of the three pyramid levels.
    pub fn pyramid_channels(&self) -> [usize; 3] {
        FUSION_TAPS.map(|s| self.widths[s])
    }

    pub fn anchors(&self) -> AnchorSet {
        AnchorSet::standard()
    }
}

/// Wall-clock split of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub backbone: Duration,
    pub fusion: Duration,
    pub neck_head: Duration,
    pub decode: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.backbone + self.fusion + self.neck_head + self.decode
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub rgb: Option<Backbone>,
    pub tir: Option<Backbone>,
    /// One block per fusion tap in Bid/Cfm modes, empty otherwise.
    pub cfm: Vec<CfmWeights>,
    pub neck: Neck,
    pub heads: Vec<Head>,
}

impl_parameters!(Detector { rgb, tir, cfm, neck, heads });

/// Intermediates of [`Detector::forward_train`].
#[derive(Clone, Debug)]
pub struct DetectorCache {
    rgb: Option<BackboneCache>,
    tir: Option<BackboneCache>,
    cfm: Vec<CfmCache>,
    neck: NeckCache,
    heads: Vec<HeadCache>,
}

impl Detector {
    pub fn init(config: DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let uses_rgb = config.fusion != FusionMode::None || config.branch == Modality::Rgb;
        let uses_tir = config.fusion != FusionMode::None || config.branch == Modality::Tir;
        let rgb = uses_rgb.then(|| Backbone::init(&config.widths, rng));
        let tir = uses_tir.then(|| Backbone::init(&config.widths, rng));
        let pyr = config.pyramid_channels();
        let mut cfm = Vec::new();
        if config.fusion.uses_block() {
            for &c in &pyr {
                let mut cfg = CfmConfig::new(c);
                cfg.state_size = config.state_size;
                cfg.directions = config.fusion.directions();
                cfm.push(CfmWeights::init(&cfg, rng)?);
            }
        }
        let neck = Neck::init(pyr, rng);
        let strides = config.anchors().strides;
        let heads = pyr
            .iter()
            .zip(&strides)
            .map(|(&c, s)| {
                let side = (config.image_size as f64 / s).max(1.0) as usize;
                Head::init(c, ANCHORS_PER_CELL, config.classes, side * side, rng)
            })
            .collect();
        Ok(Self { config, rgb, tir, cfm, neck, heads })
    }

    /// Data-dependent rescaling of every activated convolution so its
    /// pre-activation has zero mean and unit variance over `pairs`, layer by
    /// layer in evaluation order. Without normalization layers the plain
    /// random init shrinks or blows up the signal within a few stages.
    pub fn calibrate(&mut self, pairs: &[(&Tensor, &Tensor)]) -> Result<()> {
        if pairs.is_empty() {
            return Ok(());
        }
        let mut fixed: Vec<usize> = Vec::new();
        loop {
            let (res, stats) = probe_pre_activations(|| -> Result<()> {
                for (rgb, tir) in pairs {
                    self.forward(rgb, tir)?;
                }
                Ok(())
            });
            res?;
            let Some(st) = stats.iter().find(|s| !fixed.contains(&s.weight_addr)) else {
                return Ok(());
            };
            fixed.push(st.weight_addr);
            let n = st.count.max(1) as f64;
            let mean = st.sum / n;
            let std = (st.sum_sq / n - mean * mean).max(0.0).sqrt();
            if std < 1e-8 {
                continue;
            }
            let mut tensors = self.tensors_mut();
            let i = tensors
                .iter()
                .position(|t| t.data().as_ptr() as usize == st.weight_addr)
                .ok_or_else(|| Error::Validation("calibrated layer not found".into()))?;
            tensors[i].data_mut().iter_mut().for_each(|w| *w /= std);
            tensors[i + 1].data_mut().iter_mut().for_each(|b| *b = (*b - mean) / std);
        }
    }

    pub fn anchors(&self) -> AnchorSet {
        self.config.anchors()
    }

    /// Same weights reinterpreted under another fusion mode.
    ///
    /// Switching from a block mode to `Add` drops the blocks; `Cfm` to `Bid`
    /// keeps the two row-major scans. Modes that would need weights the model
    /// does not have are rejected.
    pub fn with_fusion(&self, fusion: FusionMode) -> Result<Self> {
        let mut out = self.clone();
        out.config.fusion = fusion;
        match (self.config.fusion, fusion) {
            (a, b) if a == b => {}
            (FusionMode::Cfm | FusionMode::Bid, FusionMode::Add) => out.cfm.clear(),
            (FusionMode::Cfm, FusionMode::Bid) => {
                let keep = fusion.directions();
                out.cfm = self.cfm.iter().map(|w| w.restrict_directions(&keep)).collect();
            }
            (FusionMode::Add | FusionMode::Bid | FusionMode::Cfm, FusionMode::None) => match self.config.branch {
                Modality::Rgb => out.tir = None,
                Modality::Tir => out.rgb = None,
            },
            (from, to) => {
                return Err(Error::Config(format!("cannot convert a {from} model to {to} fusion")));
            }
        }
        Ok(out)
    }

    fn branch(&self, modality: Modality) -> Result<&Backbone> {
        match modality {
            Modality::Rgb => self.rgb.as_ref(),
            Modality::Tir => self.tir.as_ref(),
        }
        .ok_or_else(|| Error::Config(format!("model has no {modality} branch")))
    }

    /// All six stage outputs of one branch.
    pub fn backbone_forward(&self, img: &Tensor, modality: Modality) -> Result<Vec<FeatureMap>> {
        let feats = self.branch(modality)?.apply(img)?;
        Ok(feats
            .into_iter()
            .enumerate()
            .map(|(stage, tensor)| FeatureMap { stage, modality, tensor })
            .collect())
    }

    /// Pyramid levels from the two branches' stage outputs. In `None` mode
    /// only the configured branch is read and the other slice may be empty.
    pub fn fuse_pyramid(&self, rgb: &[Tensor], tir: &[Tensor]) -> Result<Vec<Tensor>> {
        let fusion = self.config.fusion;
        let mut out = Vec::with_capacity(3);
        for (lvl, &s) in FUSION_TAPS.iter().enumerate() {
            let p = match fusion {
                FusionMode::None => match self.config.branch {
                    Modality::Rgb => stage(rgb, s)?.clone(),
                    Modality::Tir => stage(tir, s)?.clone(),
                },
                FusionMode::Add => add_checked(stage(rgb, s)?, stage(tir, s)?)?,
                FusionMode::Bid | FusionMode::Cfm => {
                    let (o1, o2) = cfm_forward(stage(rgb, s)?, stage(tir, s)?, &self.cfm[lvl])?;
                    o1.add(&o2)?
                }
            };
            out.push(p);
        }
        Ok(out)
    }

    pub fn neck_head_forward(&self, pyramid: &[Tensor]) -> Result<Vec<Tensor>> {
        if pyramid.len() != 3 {
            return Err(Error::dim("neck", format!("expected 3 pyramid levels, got {}", pyramid.len())));
        }
        let merged = self.neck.apply(pyramid)?;
        merged.iter().zip(&self.heads).map(|(m, h)| h.apply(m)).collect()
    }

    fn stages(&self, rgb: &Tensor, tir: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        check_pair(rgb, tir)?;
        let r = match &self.rgb {
            Some(b) if self.reads(Modality::Rgb) => b.apply(rgb)?,
            _ => Vec::new(),
        };
        let t = match &self.tir {
            Some(b) if self.reads(Modality::Tir) => b.apply(tir)?,
            _ => Vec::new(),
        };
        Ok((r, t))
    }

    fn reads(&self, m: Modality) -> bool {
        self.config.fusion != FusionMode::None || self.config.branch == m
    }

    /// Raw per-level predictions `[A*(5+K), H_l, W_l]`.
    pub fn forward(&self, rgb: &Tensor, tir: &Tensor) -> Result<Vec<Tensor>> {
        let (r, t) = self.stages(rgb, tir)?;
        let pyramid = self.fuse_pyramid(&r, &t)?;
        self.neck_head_forward(&pyramid)
    }

    pub fn detect(&self, rgb: &Tensor, tir: &Tensor, conf: f64, iou: f64) -> Result<Vec<crate::metrics::Detection>> {
        Ok(decode_predictions(&self.forward(rgb, tir)?, &self.anchors(), conf, iou))
    }

    /// [`Detector::detect`] with a per-stage wall-clock breakdown.
    pub fn detect_timed(
        &self,
        rgb: &Tensor,
        tir: &Tensor,
        conf: f64,
        iou: f64,
    ) -> Result<(Vec<crate::metrics::Detection>, StageTimes)> {
        let t0 = Instant::now();
        let (r, t) = self.stages(rgb, tir)?;
        let t1 = Instant::now();
        let pyramid = self.fuse_pyramid(&r, &t)?;
        let t2 = Instant::now();
        let raw = self.neck_head_forward(&pyramid)?;
        let t3 = Instant::now();
        let dets = decode_predictions(&raw, &self.anchors(), conf, iou);
        let t4 = Instant::now();
        Ok((
            dets,
            StageTimes {
                backbone: t1 - t0,
                fusion: t2 - t1,
                neck_head: t3 - t2,
                decode: t4 - t3,
            },
        ))
    }

    /// Forward pass that keeps everything [`Detector::backward`] needs.
    pub fn forward_train(&self, rgb: &Tensor, tir: &Tensor) -> Result<(Vec<Tensor>, DetectorCache)> {
        check_pair(rgb, tir)?;
        let (mut r, mut rc, mut t, mut tc) = (Vec::new(), None, Vec::new(), None);
        if self.reads(Modality::Rgb) {
            let (f, c) = self.branch(Modality::Rgb)?.forward(rgb)?;
            r = f;
            rc = Some(c);
        }
        if self.reads(Modality::Tir) {
            let (f, c) = self.branch(Modality::Tir)?.forward(tir)?;
            t = f;
            tc = Some(c);
        }
        let mut pyramid = Vec::with_capacity(3);
        let mut cfm = Vec::new();
        for (lvl, &s) in FUSION_TAPS.iter().enumerate() {
            let p = match self.config.fusion {
                FusionMode::None => match self.config.branch {
                    Modality::Rgb => r[s].clone(),
                    Modality::Tir => t[s].clone(),
                },
                FusionMode::Add => add_checked(&r[s], &t[s])?,
                FusionMode::Bid | FusionMode::Cfm => {
                    let (o1, o2, c) = cfm_forward_cached(&r[s], &t[s], &self.cfm[lvl])?;
                    cfm.push(c);
                    o1.add(&o2)?
                }
            };
            pyramid.push(p);
        }
        let (merged, neck) = self.neck.forward(&pyramid)?;
        let mut raw = Vec::with_capacity(3);
        let mut heads = Vec::with_capacity(3);
        for (m, h) in merged.iter().zip(&self.heads) {
            let (y, c) = h.forward(m)?;
            raw.push(y);
            heads.push(c);
        }
        Ok((raw, DetectorCache { rgb: rc, tir: tc, cfm, neck, heads }))
    }

    /// Accumulates parameter gradients into `grads` (same layout as `self`).
    pub fn backward(&self, cache: &DetectorCache, grad_raw: &[Tensor], grads: &mut Detector) -> Result<()> {
        let mut g_merged = Vec::with_capacity(3);
        for (i, g) in grad_raw.iter().enumerate() {
            g_merged.push(self.heads[i].backward(&cache.heads[i], g, &mut grads.heads[i])?);
        }
        let g_pyr = self.neck.backward(&cache.neck, g_merged, &mut grads.neck)?;
        let mut g_rgb: [Option<Tensor>; 6] = Default::default();
        let mut g_tir: [Option<Tensor>; 6] = Default::default();
        for (lvl, (&s, gp)) in FUSION_TAPS.iter().zip(g_pyr).enumerate() {
            match self.config.fusion {
                FusionMode::None => match self.config.branch {
                    Modality::Rgb => g_rgb[s] = Some(gp),
                    Modality::Tir => g_tir[s] = Some(gp),
                },
                FusionMode::Add => {
                    g_rgb[s] = Some(gp.clone());
                    g_tir[s] = Some(gp);
                }
                FusionMode::Bid | FusionMode::Cfm => {
                    let (g1, g2) = cfm_backward_cached(&self.cfm[lvl], &cache.cfm[lvl], &gp, &gp, &mut grads.cfm[lvl])?;
                    g_rgb[s] = Some(g1);
                    g_tir[s] = Some(g2);
                }
            }
        }
        if let (Some(b), Some(c)) = (&self.rgb, &cache.rgb) {
            b.backward(c, &g_rgb, grads.rgb.as_mut().expect("gradient layout matches model"))?;
        }
        if let (Some(b), Some(c)) = (&self.tir, &cache.tir) {
            b.backward(c, &g_tir, grads.tir.as_mut().expect("gradient layout matches model"))?;
        }
        Ok(())
    }
}

fn stage(feats: &[Tensor], s: usize) -> Result<&Tensor> {
    feats
        .get(s)
        .ok_or_else(|| Error::dim("fuse_pyramid", format!("missing backbone stage {s} ({} given)", feats.len())))
}

fn add_checked(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "fuse_pyramid",
            format!("branch maps {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    a.add(b)
}

fn check_pair(rgb: &Tensor, tir: &Tensor) -> Result<()> {
    if rgb.shape() != tir.shape() {
        return Err(Error::dim(
            "detector",
            format!("image pair shapes {:?} and {:?} differ", rgb.shape(), tir.shape()),
        ));
    }
    Ok(())
}
