//! Procedural RGB/thermal image pairs of coloured, heated rectangles.
//!
//! Each class has its own size range, RGB hue and thermal intensity. Some
//! objects are visible in one modality only, some RGB frames are dark, and the
//! thermal frames carry round warm distractors, so neither modality alone
//! sees every object or separates every class cleanly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SamplePair;
use crate::error::{Error, Result};
use crate::metrics::{BBox, GroundTruth};
use crate::tensor::Tensor;
use crate::Modality;

pub const CLASS_NAMES: [&str; 3] = ["car", "truck", "bus"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that an object is drawn in one modality only.
    pub exclusivity: f64,
    /// Largest per-edge offset between the drawn box and each modality's label.
    pub jitter: i64,
    /// Probability that an RGB frame is captured in low light.
    pub low_light: f64,
    pub max_distractors: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 1,
            max_objects: 6,
            exclusivity: 0.5,
            jitter: 1,
            low_light: 0.25,
            max_distractors: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!("image size {} is below 32", self.image_size)));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range {}..={} is empty or starts at 0",
                self.min_objects, self.max_objects
            )));
        }
        for (name, p) in [("exclusivity", self.exclusivity), ("low light", self.low_light)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        if self.jitter < 0 {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.image_size as f64 / 64.0
    }
}

struct ClassLook {
    /// long side, short side ranges at 64 px
    long: (f64, f64),
    short: (f64, f64),
    rgb: [f64; 3],
    heat: f64,
}

const LOOKS: [ClassLook; 3] = [
    ClassLook {
        long: (8.0, 12.0),
        short: (5.0, 8.0),
        rgb: [0.85, 0.22, 0.18],
        heat: 0.95,
    },
    ClassLook {
        long: (12.0, 18.0),
        short: (7.0, 10.0),
        rgb: [0.25, 0.75, 0.25],
        heat: 0.65,
    },
    ClassLook {
        long: (18.0, 26.0),
        short: (8.0, 12.0),
        rgb: [0.2, 0.35, 0.9],
        heat: 0.45,
    },
];

/// Integer pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug)]
struct Rect {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

impl Rect {
    fn overlaps(&self, o: &Rect, margin: i64) -> bool {
        self.x0 - margin < o.x1 && o.x0 - margin < self.x1 && self.y0 - margin < o.y1 && o.y0 - margin < self.y1
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Canvas {
    size: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; 3 * size * size],
        }
    }

    fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let hw = self.size * self.size;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * hw + y * self.size + x] = v;
        }
    }

    fn into_tensor(self) -> Tensor {
        let s = self.size;
        Tensor::new(&[3, s, s], self.data.into_iter().map(quantize).collect()).expect("canvas shape")
    }
}

struct Object {
    rect: Rect,
    class_id: usize,
    in_rgb: bool,
    in_tir: bool,
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn place_objects(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<Object> {
    let n = rng.gen_range(spec.min_objects..=spec.max_objects);
    let s = spec.scale();
    let size = spec.image_size as i64;
    let mut out: Vec<Object> = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = rng.gen_range(0..LOOKS.len());
        let look = &LOOKS[class_id];
        let long = (rng.gen_range(look.long.0..=look.long.1) * s).round() as i64;
        let short = (rng.gen_range(look.short.0..=look.short.1) * s).round() as i64;
        let (w, h) = if rng.gen_bool(0.5) { (long, short) } else { (short, long) };
        let exclusive = rng.gen_bool(spec.exclusivity);
        let rgb_only = rng.gen_bool(0.5);
        let (in_rgb, in_tir) = match (exclusive, rgb_only) {
            (false, _) => (true, true),
            (true, true) => (true, false),
            (true, false) => (false, true),
        };
        for _ in 0..50 {
            let x0 = rng.gen_range(2..=size - w - 2);
            let y0 = rng.gen_range(2..=size - h - 2);
            let rect = Rect {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            };
            if out.iter().all(|o| !o.rect.overlaps(&rect, 2)) {
                out.push(Object {
                    rect,
                    class_id,
                    in_rgb,
                    in_tir,
                });
                break;
            }
        }
    }
    out
}

fn label(rng: &mut ChaCha8Rng, o: &Object, modality: Modality, spec: &SynthSpec) -> GroundTruth {
    let j = spec.jitter;
    let size = spec.image_size as i64;
    let mut edge = |v: i64| v + if j > 0 { rng.gen_range(-j..=j) } else { 0 };
    let x0 = edge(o.rect.x0).clamp(0, size);
    let y0 = edge(o.rect.y0).clamp(0, size);
    let x1 = edge(o.rect.x1).clamp(x0 + 1, size);
    let y1 = edge(o.rect.y1).clamp(y0 + 1, size);
    GroundTruth::new(
        BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64),
        o.class_id,
        modality,
    )
}

fn noise(rng: &mut ChaCha8Rng, amp: f64) -> f64 {
    rng.gen_range(-amp..=amp)
}

fn render_rgb(rng: &mut ChaCha8Rng, objects: &[Object], spec: &SynthSpec) -> Tensor {
    let size = spec.image_size;
    let bright = if rng.gen_bool(spec.low_light) {
        rng.gen_range(0.12..0.3)
    } else {
        rng.gen_range(0.8..1.0)
    };
    let base = [rng.gen_range(0.3..0.55), rng.gen_range(0.3..0.55), rng.gen_range(0.25..0.45)];
    let grad = [noise(rng, 0.1), noise(rng, 0.1)];
    let mut canvas = Canvas::new(size);
    for y in 0..size {
        for x in 0..size {
            let g = grad[0] * (x as f64 / size as f64 - 0.5) + grad[1] * (y as f64 / size as f64 - 0.5);
            let px = base.map(|b| (b + g + noise(rng, 0.04)) * bright);
            canvas.set(x, y, px);
        }
    }
    for o in objects.iter().filter(|o| o.in_rgb) {
        let look = &LOOKS[o.class_id];
        let tint = [noise(rng, 0.08), noise(rng, 0.08), noise(rng, 0.08)];
        for y in o.rect.y0..o.rect.y1 {
            for x in o.rect.x0..o.rect.x1 {
                let px = [0, 1, 2].map(|c| (look.rgb[c] + tint[c] + noise(rng, 0.04)) * bright);
                canvas.set(x as usize, y as usize, px);
            }
        }
    }
    canvas.into_tensor()
}

fn render_tir(rng: &mut ChaCha8Rng, objects: &[Object], spec: &SynthSpec) -> Tensor {
    let size = spec.image_size;
    let s = spec.scale();
    let ambient = rng.gen_range(0.1..0.25);
    let mut heat = vec![0.0; size * size];
    for v in heat.iter_mut() {
        *v = ambient + noise(rng, 0.04);
    }
    let blobs = rng.gen_range(0..=spec.max_distractors);
    for _ in 0..blobs {
        let r = rng.gen_range(3.0..7.0) * s;
        let cx = rng.gen_range(r..size as f64 - r);
        let cy = rng.gen_range(r..size as f64 - r);
        let level = rng.gen_range(0.5..0.9);
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                if d2 <= r * r {
                    heat[y * size + x] = level + noise(rng, 0.04);
                }
            }
        }
    }
    for o in objects.iter().filter(|o| o.in_tir) {
        let level = LOOKS[o.class_id].heat + noise(rng, 0.05);
        for y in o.rect.y0..o.rect.y1 {
            for x in o.rect.x0..o.rect.x1 {
                heat[y as usize * size + x as usize] = level + noise(rng, 0.04);
            }
        }
    }
    let mut canvas = Canvas::new(size);
    for y in 0..size {
        for x in 0..size {
            let v = heat[y * size + x];
            canvas.set(x, y, [v, v, v]);
        }
    }
    canvas.into_tensor()
}

/// Sample `index` of the stream identified by `seed`; independent of every
/// other index.
pub fn generate_sample(seed: u64, index: usize, spec: &SynthSpec) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, index));
    let objects = place_objects(&mut rng, spec);
    let mut rgb_gts = Vec::new();
    let mut tir_gts = Vec::new();
    for o in &objects {
        if o.in_rgb {
            rgb_gts.push(label(&mut rng, o, Modality::Rgb, spec));
        }
        if o.in_tir {
            tir_gts.push(label(&mut rng, o, Modality::Tir, spec));
        }
    }
    let rgb = render_rgb(&mut rng, &objects, spec);
    let tir = render_tir(&mut rng, &objects, spec);
    SamplePair {
        id: format!("{index:06}"),
        rgb,
        tir,
        rgb_gts,
        tir_gts,
    }
}

/// `n` samples, generated on up to `threads` workers; output order and
/// content do not depend on the worker count.
pub fn generate_dataset(n: usize, seed: u64, spec: &SynthSpec) -> Result<Vec<SamplePair>> {
    generate_range(0..n, seed, spec, super::worker_threads())
}

pub fn generate_range(
    range: std::ops::Range<usize>,
    seed: u64,
    spec: &SynthSpec,
    threads: usize,
) -> Result<Vec<SamplePair>> {
    spec.validate()?;
    if range.is_empty() {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let idx: Vec<usize> = range.collect();
    Ok(super::par_map(&idx, threads, |&i| generate_sample(seed, i, spec)))
}
