use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{BBox, Detection};
use crate::tensor::Tensor;

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Any 8/16-bit PNG as `[3, H, W]` in `[0, 1]`; gray is replicated, alpha dropped.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let samples = info.color_type.samples();
    let hw = w * h;
    let mut data = vec![0.0; 3 * hw];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * samples..(x + 1) * samples];
            for c in 0..3 {
                let v = if samples >= 3 { px[c] } else { px[0] };
                data[c * hw + y * w + x] = v as f64 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded.
pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    if img.ndim() != 3 || img.dim(0) != 3 {
        return Err(Error::dim("save_image", format!("expected [3,H,W], got {:?}", img.shape())));
    }
    let (h, w) = (img.dim(1), img.dim(2));
    let hw = h * w;
    let mut bytes = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            bytes.push((img.data()[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// One-pixel outline of `b`, clipped to the image.
pub fn draw_box(img: &mut Tensor, b: &BBox, color: [f64; 3]) {
    let (h, w) = (img.dim(1) as i64, img.dim(2) as i64);
    let hw = (h * w) as usize;
    let x0 = b.x1().round() as i64;
    let y0 = b.y1().round() as i64;
    let x1 = b.x2().round() as i64 - 1;
    let y1 = b.y2().round() as i64 - 1;
    let data = img.data_mut();
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            for (c, v) in color.iter().enumerate() {
                data[c * hw + (y * w + x) as usize] = *v;
            }
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 1.0, 0.5],
    [1.0, 1.0, 1.0],
];

/// Saves `img` with each detection outlined in its class colour.
pub fn save_annotated(path: &Path, img: &Tensor, dets: &[Detection]) -> Result<()> {
    let mut canvas = img.clone();
    for d in dets {
        draw_box(&mut canvas, &d.bbox, PALETTE[d.class_id % PALETTE.len()]);
    }
    save_image(path, &canvas)
}
