//! Multimodal (RGB + thermal) object detection with a four-direction
//! selective-scan fusion block, written from scratch on a small `f64`
//! tensor engine.

pub mod cfm;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod params;
pub mod s6;
pub mod selfcheck;
pub mod ss2d;
pub mod tensor;

pub use error::{Error, Result};

use std::fmt;
use std::str::FromStr;

/// Imaging modality of a branch, image or annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Tir,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Tir => "tir",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "tir" | "ir" => Ok(Modality::Tir),
            other => Err(Error::Config(format!("unknown modality '{other}' (rgb|tir)"))),
        }
    }
}
