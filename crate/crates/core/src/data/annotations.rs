//! One object per line: `x1 y1 x2 y2 x3 y3 x4 y4 class difficulty`.
//! Corners may describe a rotated box; the axis-aligned envelope is used.
//! Blank lines and lines starting with `#` are skipped.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::GroundTruth;
use crate::Modality;

pub fn parse_annotations(text: &str, source: &str, classes: &[&str], modality: Modality) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(parse_err(format!("expected 10 fields, found {}", fields.len())));
        }
        let mut poly = [0.0; 8];
        for (slot, tok) in poly.iter_mut().zip(&fields[..8]) {
            *slot = tok
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(format!("bad coordinate `{tok}`")))?;
        }
        let class_id = classes
            .iter()
            .position(|c| *c == fields[8])
            .ok_or_else(|| Error::Vocabulary(fields[8].to_string()))?;
        let difficult = match fields[9] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(format!("difficulty must be 0 or 1, found `{other}`"))),
        };
        let mut gt = GroundTruth::from_polygon(poly, class_id, modality);
        gt.difficult = difficult;
        out.push(gt);
    }
    Ok(out)
}

pub fn format_annotations(gts: &[GroundTruth], classes: &[&str]) -> Result<String> {
    let mut s = String::new();
    for g in gts {
        let name = classes
            .get(g.class_id)
            .ok_or_else(|| Error::Vocabulary(format!("class id {}", g.class_id)))?;
        let corners = g.polygon.unwrap_or_else(|| g.bbox.corners());
        for v in corners {
            write!(s, "{v} ").expect("write to string");
        }
        writeln!(s, "{name} {}", g.difficult as u8).expect("write to string");
    }
    Ok(s)
}

pub fn read_annotations(path: &Path, classes: &[&str], modality: Modality) -> Result<Vec<GroundTruth>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, &path.display().to_string(), classes, modality)
}

pub fn write_annotations(path: &Path, gts: &[GroundTruth], classes: &[&str]) -> Result<()> {
    fs::write(path, format_annotations(gts, classes)?).map_err(|e| Error::io(path, e))
}
