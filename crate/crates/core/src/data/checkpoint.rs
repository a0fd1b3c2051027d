//! Single-file little-endian weight store.
//!
//! ```text
//! magic "RDMCKPT\0" | u32 version | u32 len, metadata (key=value lines)
//! u32 count | count x { u32 len, name | u8 dtype | u32 ndim | u64 dims.. | f64 data.. }
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{Detector, DetectorConfig, FusionMode};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Tensor;
use crate::Modality;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RDMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta: String = self.metadata.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_bytes(&mut out, meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Version("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let meta = r.string()?;
        let metadata = meta
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Version(format!("malformed metadata line `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Version(format!("tensor `{name}` has unsupported dtype {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| truncated())?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data).map_err(|e| Error::Version(e.to_string()))?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Version("trailing bytes after tensor table".into()));
        }
        Ok(Self { metadata, tensors })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn truncated() -> Error {
    Error::Version("checkpoint is truncated".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Version("non-UTF-8 string".into()))
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn config_metadata(c: &DetectorConfig) -> Vec<(String, String)> {
    let widths: Vec<String> = c.widths.iter().map(|w| w.to_string()).collect();
    vec![
        ("widths".into(), widths.join(",")),
        ("classes".into(), c.classes.to_string()),
        ("fusion".into(), c.fusion.to_string()),
        ("branch".into(), c.branch.to_string()),
        ("state_size".into(), c.state_size.to_string()),
        ("image_size".into(), c.image_size.to_string()),
    ]
}

fn config_from(ckpt: &Checkpoint) -> Result<DetectorConfig> {
    let get = |k: &str| {
        ckpt.meta(k)
            .ok_or_else(|| Error::Version(format!("checkpoint metadata lacks `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Version(format!("checkpoint metadata `{k}` is not an integer")))
    };
    let ws: Vec<usize> = get("widths")?
        .split(',')
        .map(|w| w.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Version("checkpoint widths are malformed".into()))?;
    let widths: [usize; 6] = ws
        .try_into()
        .map_err(|_| Error::Version("checkpoint must list six widths".into()))?;
    let to_version = |e: Error| Error::Version(e.to_string());
    Ok(DetectorConfig {
        widths,
        classes: num("classes")?,
        fusion: get("fusion")?.parse::<FusionMode>().map_err(to_version)?,
        branch: get("branch")?.parse::<Modality>().map_err(to_version)?,
        state_size: num("state_size")?,
        image_size: num("image_size")?,
    })
}

/// Saves weights plus the architecture needed to rebuild them; `extra` is
/// appended to the metadata.
pub fn save_detector(path: &Path, det: &Detector, extra: &[(String, String)]) -> Result<()> {
    write_checkpoint(path, &detector_checkpoint(det, extra))
}

pub fn detector_checkpoint(det: &Detector, extra: &[(String, String)]) -> Checkpoint {
    let mut metadata = config_metadata(&det.config);
    metadata.extend(extra.iter().cloned());
    Checkpoint {
        metadata,
        tensors: det
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    }
}

/// Rebuilds a detector; any name or shape disagreement is a version error.
pub fn detector_from_checkpoint(ckpt: &Checkpoint) -> Result<Detector> {
    let cfg = config_from(ckpt)?;
    let mut det = Detector::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| Error::Version(e.to_string()))?;
    let names: Vec<(String, Vec<usize>)> = det
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if names.len() != ckpt.tensors.len() {
        return Err(Error::Version(format!(
            "checkpoint has {} tensors, model expects {}",
            ckpt.tensors.len(),
            names.len()
        )));
    }
    for (((name, shape), slot), (cname, ct)) in names.iter().zip(det.tensors_mut()).zip(&ckpt.tensors) {
        if name != cname || shape.as_slice() != ct.shape() {
            return Err(Error::Version(format!(
                "tensor `{cname}` {:?} does not fit model slot `{name}` {shape:?}",
                ct.shape()
            )));
        }
        *slot = ct.clone();
    }
    Ok(det)
}

pub fn load_detector(path: &Path) -> Result<(Detector, Checkpoint)> {
    let ckpt = read_checkpoint(path)?;
    let det = detector_from_checkpoint(&ckpt)?;
    Ok((det, ckpt))
}
