use crate::Modality;

/// Axis-aligned box in pixels, center/size form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// Axis-aligned envelope of a polygon given as `[x1, y1, x2, y2, ...]`.
    pub fn envelope(points: &[f64]) -> Self {
        let xs = points.iter().step_by(2);
        let ys = points.iter().skip(1).step_by(2);
        let (x1, x2) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let (y1, y2) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Self::from_corners(x1, y1, x2, y2)
    }

    pub fn x1(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn y1(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn x2(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y2(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x1().max(other.x1())).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y1().max(other.y1())).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }

    /// Mirror across the vertical axis of an image `width` pixels wide.
    pub fn flipped_horizontally(&self, width: f64) -> Self {
        Self::new(width - self.cx, self.cy, self.w, self.h)
    }

    pub fn corners(&self) -> [f64; 8] {
        let (x1, y1, x2, y2) = (self.x1(), self.y1(), self.x2(), self.y2());
        [x1, y1, x2, y1, x2, y2, x1, y2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
    pub modality: Modality,
    /// Oriented source corners, when the annotation came from a polygon.
    pub polygon: Option<[f64; 8]>,
    pub difficult: bool,
}

impl GroundTruth {
    pub fn new(bbox: BBox, class_id: usize, modality: Modality) -> Self {
        Self {
            bbox,
            class_id,
            modality,
            polygon: None,
            difficult: false,
        }
    }

    pub fn from_polygon(polygon: [f64; 8], class_id: usize, modality: Modality) -> Self {
        Self {
            bbox: BBox::envelope(&polygon),
            class_id,
            modality,
            polygon: Some(polygon),
            difficult: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polygon_envelope() {
        let b = BBox::envelope(&[0., 0., 4., 0., 4., 2., 0., 2.]);
        assert_eq!(b, BBox::new(2.0, 1.0, 4.0, 2.0));
        let rotated = BBox::envelope(&[2., 0., 4., 2., 2., 4., 0., 2.]);
        assert_eq!(rotated, BBox::new(2.0, 2.0, 4.0, 4.0));
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(5.0, 5.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(50.0, 50.0, 2.0, 2.0)), 0.0);
        let b = BBox::new(5.0, 5.0, 12.0, 12.0);
        assert!((a.iou(&b) - 100.0 / 144.0).abs() < 1e-15);
    }
}
