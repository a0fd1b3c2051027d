//! Paired-modality samples: synthesis, on-disk layout, annotations, images
//! and checkpoints.

mod annotations;
mod checkpoint;
mod image;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

pub use annotations::{format_annotations, parse_annotations, read_annotations, write_annotations};
pub use checkpoint::{
    detector_checkpoint, detector_from_checkpoint, load_detector, read_checkpoint, save_detector, write_checkpoint,
    Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use image::{draw_box, load_image, save_annotated, save_image};
pub use synth::{generate_dataset, generate_range, generate_sample, SynthSpec, CLASS_NAMES};

use crate::error::{Error, Result};
use crate::metrics::GroundTruth;
use crate::tensor::Tensor;
use crate::Modality;

/// Environment variable capping the worker threads of data generation and
/// evaluation.
pub const THREADS_ENV: &str = "REMOTEDET_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`
    pub rgb: Tensor,
    pub tir: Tensor,
    pub rgb_gts: Vec<GroundTruth>,
    pub tir_gts: Vec<GroundTruth>,
}

impl SamplePair {
    pub fn image(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Tir => &self.tir,
        }
    }

    pub fn gts(&self, m: Modality) -> &[GroundTruth] {
        match m {
            Modality::Rgb => &self.rgb_gts,
            Modality::Tir => &self.tir_gts,
        }
    }
}

/// Worker count from [`THREADS_ENV`], else the available parallelism.
pub fn worker_threads() -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(hw, |cap| cap.min(hw.max(1)).max(1))
}

/// Ordered parallel map over contiguous chunks.
pub fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<U>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

const SUBDIRS: [(&str, &str); 4] = [("rgb", "png"), ("tir", "png"), ("rgb_labels", "txt"), ("tir_labels", "txt")];

fn sample_paths(dir: &Path, id: &str) -> [PathBuf; 4] {
    SUBDIRS.map(|(sub, ext)| dir.join(sub).join(format!("{id}.{ext}")))
}

/// Writes `rgb/`, `tir/`, `rgb_labels/`, `tir_labels/` under `dir`.
pub fn save_dataset(dir: &Path, samples: &[SamplePair]) -> Result<()> {
    for (sub, _) in SUBDIRS {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in samples {
        let [rgb, tir, rl, tl] = sample_paths(dir, &s.id);
        save_image(&rgb, &s.rgb)?;
        save_image(&tir, &s.tir)?;
        write_annotations(&rl, &s.rgb_gts, &CLASS_NAMES)?;
        write_annotations(&tl, &s.tir_gts, &CLASS_NAMES)?;
    }
    Ok(())
}

/// Reads a directory written by [`save_dataset`], in id order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SamplePair>> {
    let rgb_dir = dir.join("rgb");
    let mut ids: Vec<String> = fs::read_dir(&rgb_dir)
        .map_err(|e| Error::io(&rgb_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension()? != "png" {
                return None;
            }
            Some(p.file_stem()?.to_string_lossy().into_owned())
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Image {
            path: rgb_dir,
            msg: "no images found".into(),
        });
    }
    ids.iter()
        .map(|id| {
            let [rgb, tir, rl, tl] = sample_paths(dir, id);
            Ok(SamplePair {
                id: id.clone(),
                rgb: load_image(&rgb)?,
                tir: load_image(&tir)?,
                rgb_gts: read_annotations(&rl, &CLASS_NAMES, Modality::Rgb)?,
                tir_gts: read_annotations(&tl, &CLASS_NAMES, Modality::Tir)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<usize> = (0..37).collect();
        assert_eq!(par_map(&v, 4, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(par_map(&Vec::<usize>::new(), 3, |x| *x).is_empty());
    }
}
