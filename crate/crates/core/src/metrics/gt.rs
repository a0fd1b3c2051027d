use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use super::GroundTruth;
use crate::error::{Error, Result};
use crate::Modality;

/// Same-class RGB/TIR boxes overlapping at least this much describe one object.
pub const FUSION_PAIR_IOU: f64 = 0.5;

/// Which annotations supervise and score a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GtForm {
    Rgb,
    Tir,
    /// Union of both lists, keeping the larger box of each cross-modal pair.
    Fusion,
}

impl GtForm {
    pub fn name(self) -> &'static str {
        match self {
            GtForm::Rgb => "rgb",
            GtForm::Tir => "tir",
            GtForm::Fusion => "fusion",
        }
    }
}

impl fmt::Display for GtForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GtForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "rgb" => GtForm::Rgb,
            "tir" => GtForm::Tir,
            "fusion" => GtForm::Fusion,
            other => return Err(Error::Config(format!("unknown gt form '{other}' (rgb|tir|fusion)"))),
        })
    }
}

/// Ground truth for one image under `form`.
///
/// Fusion pairs boxes greedily by descending IoU (ties: lower TIR index, then
/// lower RGB index). Each pair yields its larger box, the TIR one on equal
/// area. Output follows the TIR list, each entry replaced by its pair winner,
/// followed by the unpaired RGB boxes in input order.
pub fn prepare_gt(rgb: &[GroundTruth], tir: &[GroundTruth], form: GtForm) -> Vec<GroundTruth> {
    match form {
        GtForm::Rgb => rgb.to_vec(),
        GtForm::Tir => tir.to_vec(),
        GtForm::Fusion => fuse(rgb, tir),
    }
}

fn fuse(rgb: &[GroundTruth], tir: &[GroundTruth]) -> Vec<GroundTruth> {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, t) in tir.iter().enumerate() {
        for (ri, r) in rgb.iter().enumerate() {
            if t.class_id != r.class_id {
                continue;
            }
            let iou = t.bbox.iou(&r.bbox);
            if iou >= FUSION_PAIR_IOU {
                cands.push((iou, ti, ri));
            }
        }
    }
    cands.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut tir_pair = vec![None; tir.len()];
    let mut rgb_used = vec![false; rgb.len()];
    for (_, ti, ri) in cands {
        if tir_pair[ti].is_none() && !rgb_used[ri] {
            tir_pair[ti] = Some(ri);
            rgb_used[ri] = true;
        }
    }
    let mut out = Vec::with_capacity(tir.len() + rgb.len());
    for (ti, t) in tir.iter().enumerate() {
        match tir_pair[ti] {
            Some(ri) if rgb[ri].bbox.area() > t.bbox.area() => out.push(rgb[ri].clone()),
            _ => out.push(t.clone()),
        }
    }
    out.extend(rgb.iter().zip(&rgb_used).filter(|(_, &u)| !u).map(|(r, _)| r.clone()));
    out
}

/// Ground truth of `modality` only, from a mixed list.
pub fn of_modality(gts: &[GroundTruth], modality: Modality) -> Vec<GroundTruth> {
    gts.iter().filter(|g| g.modality == modality).cloned().collect()
}
