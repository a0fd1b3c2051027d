//! Detection training loss: CIoU box regression plus label-smoothed BCE for
//! objectness and classes, with analytic gradients w.r.t. the raw head maps.

use std::f64::consts::PI;

use super::{BBox, GroundTruth};
use crate::detector::{decode_box, num_classes, AnchorSet, CLS, OBJ, TH, TW, TX, TY};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, Tensor};

/// CIoU loss terms for one predicted/target pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ciou {
    pub loss: f64,
    pub iou: f64,
    /// Aspect-ratio consistency term.
    pub v: f64,
    /// Trade-off weight of `v`, treated as a constant by gradients.
    pub alpha: f64,
}

fn check_target(target: &BBox) -> Result<()> {
    if !(target.w > 0.0 && target.h > 0.0) {
        return Err(Error::Validation(format!(
            "degenerate target box {:.4}x{:.4}",
            target.w, target.h
        )));
    }
    Ok(())
}

pub fn ciou_terms(pred: &BBox, target: &BBox) -> Result<Ciou> {
    check_target(target)?;
    let iou = pred.iou(target);
    let v = aspect_term(pred, target);
    let alpha = alpha(iou, v);
    let loss = 1.0 - iou + center_term(pred, target) + alpha * v;
    Ok(Ciou { loss, iou, v, alpha })
}

/// `1 - IoU + rho^2 / c^2 + alpha * v`, in `[0, 3)`.
pub fn ciou_loss(pred: &BBox, target: &BBox) -> Result<f64> {
    Ok(ciou_terms(pred, target)?.loss)
}

fn alpha(iou: f64, v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v / ((1.0 - iou) + v)
    }
}

fn aspect_term(pred: &BBox, target: &BBox) -> f64 {
    let d = target.w.atan2(target.h) - pred.w.max(0.0).atan2(pred.h.max(0.0));
    4.0 / (PI * PI) * d * d
}

fn enclosing(pred: &BBox, target: &BBox) -> (f64, f64) {
    (
        pred.x2().max(target.x2()) - pred.x1().min(target.x1()),
        pred.y2().max(target.y2()) - pred.y1().min(target.y1()),
    )
}

fn center_term(pred: &BBox, target: &BBox) -> f64 {
    let (cw, ch) = enclosing(pred, target);
    let c2 = cw * cw + ch * ch;
    let rho2 = (pred.cx - target.cx).powi(2) + (pred.cy - target.cy).powi(2);
    rho2 / c2
}

/// CIoU loss at a fixed `alpha` and its gradient w.r.t. `(cx, cy, w, h)` of `pred`.
pub fn ciou_with_alpha(pred: &BBox, target: &BBox, alpha: f64) -> Result<(f64, [f64; 4])> {
    check_target(target)?;
    let (px1, py1, px2, py2) = (pred.x1(), pred.y1(), pred.x2(), pred.y2());
    let (tx1, ty1, tx2, ty2) = (target.x1(), target.y1(), target.x2(), target.y2());

    // gradients are accumulated on the corners, then mapped to center/size
    let mut g = [0.0f64; 4]; // d/d(px1, py1, px2, py2)

    // IoU
    let iw_raw = px2.min(tx2) - px1.max(tx1);
    let ih_raw = py2.min(ty2) - py1.max(ty1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let (pw, ph) = (px2 - px1, py2 - py1);
    let area_p = pw.max(0.0) * ph.max(0.0);
    let union = area_p + target.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if union > 0.0 {
        // dIoU = dI * (1/U + I/U^2) - I/U^2 * dAp
        let k_i = 1.0 / union + inter / (union * union);
        let k_a = inter / (union * union);
        let mut d_inter = [0.0f64; 4];
        if iw_raw > 0.0 && ih_raw > 0.0 {
            if px1 > tx1 {
                d_inter[0] = -ih;
            }
            if px2 < tx2 {
                d_inter[2] = ih;
            }
            if py1 > ty1 {
                d_inter[1] = -iw;
            }
            if py2 < ty2 {
                d_inter[3] = iw;
            }
        }
        let d_area = if pw > 0.0 && ph > 0.0 { [-ph, -pw, ph, pw] } else { [0.0; 4] };
        for j in 0..4 {
            g[j] -= k_i * d_inter[j] - k_a * d_area[j];
        }
    }

    // center distance over enclosing diagonal
    let (cw, ch) = enclosing(pred, target);
    let c2 = cw * cw + ch * ch;
    let (dx, dy) = (pred.cx - target.cx, pred.cy - target.cy);
    let rho2 = dx * dx + dy * dy;
    let center = rho2 / c2;
    // rho2 depends on cx = (x1+x2)/2
    g[0] += dx / c2;
    g[2] += dx / c2;
    g[1] += dy / c2;
    g[3] += dy / c2;
    let k_c = -rho2 / (c2 * c2);
    let d_cw = [if px1 < tx1 { -1.0 } else { 0.0 }, if px2 > tx2 { 1.0 } else { 0.0 }];
    let d_ch = [if py1 < ty1 { -1.0 } else { 0.0 }, if py2 > ty2 { 1.0 } else { 0.0 }];
    g[0] += k_c * 2.0 * cw * d_cw[0];
    g[2] += k_c * 2.0 * cw * d_cw[1];
    g[1] += k_c * 2.0 * ch * d_ch[0];
    g[3] += k_c * 2.0 * ch * d_ch[1];

    // center/size gradient, before the aspect term which is native in (w, h)
    let mut out = [g[0] + g[2], g[1] + g[3], 0.5 * (g[2] - g[0]), 0.5 * (g[3] - g[1])];

    let (w, h) = (pred.w.max(0.0), pred.h.max(0.0));
    let diff = target.w.atan2(target.h) - w.atan2(h);
    let v = 4.0 / (PI * PI) * diff * diff;
    let r2 = w * w + h * h;
    if alpha != 0.0 && r2 > 0.0 {
        let dv_dtheta = -8.0 / (PI * PI) * diff;
        out[2] += alpha * dv_dtheta * h / r2;
        out[3] += alpha * dv_dtheta * (-w / r2);
    }
    Ok((1.0 - iou + center + alpha * v, out))
}

/// Binary cross-entropy with logits against a label-smoothed target
/// `t * (1 - eps) + eps / 2`, in the overflow-free form.
pub fn smooth_bce(logit: f64, target: f64, eps: f64) -> f64 {
    let t = smooth_target(target, eps);
    logit.max(0.0) - logit * t + (-logit.abs()).exp().ln_1p()
}

fn smooth_target(target: f64, eps: f64) -> f64 {
    target * (1.0 - eps) + 0.5 * eps
}

/// Derivative of [`smooth_bce`] w.r.t. the logit.
pub fn smooth_bce_grad(logit: f64, target: f64, eps: f64) -> f64 {
    sigmoid_scalar(logit) - smooth_target(target, eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub anchors: AnchorSet,
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
    pub label_smoothing: f64,
    /// Largest allowed side ratio between a ground truth box and an anchor.
    pub anchor_ratio: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            anchors: AnchorSet::standard(),
            box_weight: 0.05,
            obj_weight: 1.0,
            cls_weight: 0.5,
            label_smoothing: 0.0,
            anchor_ratio: 4.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0, 0.5)",
                self.label_smoothing
            )));
        }
        if [self.box_weight, self.obj_weight, self.cls_weight].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.anchor_ratio > 1.0) {
            return Err(Error::Config("anchor ratio must exceed 1".into()));
        }
        Ok(())
    }
}

/// Loss components of one image. `total` is the weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub bbox: f64,
    pub obj: f64,
    pub cls: f64,
}

impl LossParts {
    pub fn accumulate(&mut self, other: &LossParts) {
        self.total += other.total;
        self.bbox += other.bbox;
        self.obj += other.obj;
        self.cls += other.cls;
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            total: self.total * s,
            bbox: self.bbox * s,
            obj: self.obj * s,
            cls: self.cls * s,
        }
    }
}

/// One anchor slot made responsible for one ground truth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub level: usize,
    pub anchor: usize,
    pub row: usize,
    pub col: usize,
    pub gt: usize,
}

/// Anchor assignment. A box is matched at every level and anchor whose side
/// ratios stay within `anchor_ratio`, in the cell holding its center and in up
/// to two neighbouring cells: the horizontal and vertical neighbours closest to
/// the center. Depends only on box geometry and grid shapes.
pub fn assign_targets(grids: &[(usize, usize)], gts: &[GroundTruth], cfg: &LossConfig) -> Vec<Match> {
    let mut out = Vec::new();
    for (level, &(h, w)) in grids.iter().enumerate() {
        let stride = cfg.anchors.strides[level];
        for (anchor, &(aw, ah)) in cfg.anchors.sizes[level].iter().enumerate() {
            for (gi, gt) in gts.iter().enumerate() {
                let rw = gt.bbox.w / aw;
                let rh = gt.bbox.h / ah;
                let worst = rw.max(1.0 / rw).max(rh.max(1.0 / rh));
                if !(worst < cfg.anchor_ratio) {
                    continue;
                }
                let gx = gt.bbox.cx / stride;
                let gy = gt.bbox.cy / stride;
                let col = (gx.floor().max(0.0) as usize).min(w - 1);
                let row = (gy.floor().max(0.0) as usize).min(h - 1);
                out.push(Match { level, anchor, row, col, gt: gi });
                let (fx, fy) = (gx - gx.floor(), gy - gy.floor());
                if fx < 0.5 && col > 0 && gx > 1.0 {
                    out.push(Match { level, anchor, row, col: col - 1, gt: gi });
                } else if fx > 0.5 && col + 1 < w && (w as f64 - gx) > 1.0 {
                    out.push(Match { level, anchor, row, col: col + 1, gt: gi });
                }
                if fy < 0.5 && row > 0 && gy > 1.0 {
                    out.push(Match { level, anchor, row: row - 1, col, gt: gi });
                } else if fy > 0.5 && row + 1 < h && (h as f64 - gy) > 1.0 {
                    out.push(Match { level, anchor, row: row + 1, col, gt: gi });
                }
            }
        }
    }
    out
}

/// Quantities the loss treats as constants: the CIoU trade-off weight of
/// every match and the soft objectness target of every anchor slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Detached {
    pub alphas: Vec<f64>,
    /// Per level, `[A * H * W]` in anchor-major order.
    pub obj_targets: Vec<Vec<f64>>,
}

struct Layout {
    grids: Vec<(usize, usize)>,
    classes: usize,
    per_cell: usize,
}

fn layout(raw: &[Tensor], cfg: &LossConfig) -> Result<Layout> {
    if raw.len() != cfg.anchors.strides.len() {
        return Err(Error::dim(
            "total_loss",
            format!("{} prediction levels for {} anchor levels", raw.len(), cfg.anchors.strides.len()),
        ));
    }
    let per_cell = cfg.anchors.per_cell();
    let mut classes = None;
    let mut grids = Vec::with_capacity(raw.len());
    for t in raw {
        t.expect_ndim(3, "total_loss")?;
        let c = t.dim(0);
        if c % per_cell != 0 || c / per_cell <= 5 {
            return Err(Error::dim(
                "total_loss",
                format!("{c} channels do not fit {per_cell} anchors x (5 + classes)"),
            ));
        }
        let k = num_classes(t, per_cell);
        if classes.is_some_and(|p| p != k) {
            return Err(Error::dim("total_loss", "levels disagree on class count"));
        }
        classes = Some(k);
        grids.push((t.dim(1), t.dim(2)));
    }
    Ok(Layout {
        grids,
        classes: classes.unwrap_or(0),
        per_cell,
    })
}

struct Slot {
    hw: usize,
    cell: usize,
    base: usize,
}

fn slot(l: &Layout, m: &Match) -> Slot {
    let (h, w) = l.grids[m.level];
    Slot {
        hw: h * w,
        cell: m.row * w + m.col,
        base: m.anchor * (5 + l.classes),
    }
}

fn match_box(raw: &[Tensor], l: &Layout, m: &Match, cfg: &LossConfig) -> ([f64; 4], BBox) {
    let s = slot(l, m);
    let d = raw[m.level].data();
    let t = [
        d[(s.base + TX) * s.hw + s.cell],
        d[(s.base + TY) * s.hw + s.cell],
        d[(s.base + TW) * s.hw + s.cell],
        d[(s.base + TH) * s.hw + s.cell],
    ];
    let bbox = decode_box(t, m.col, m.row, cfg.anchors.strides[m.level], cfg.anchors.sizes[m.level][m.anchor]);
    (t, bbox)
}

fn check_gts(gts: &[GroundTruth], classes: usize) -> Result<()> {
    for g in gts {
        if g.class_id >= classes {
            return Err(Error::Validation(format!(
                "class id {} out of range for {classes} classes",
                g.class_id
            )));
        }
        check_target(&g.bbox)?;
    }
    Ok(())
}

/// The constants [`total_loss_detached`] freezes, evaluated at `raw`.
pub fn detach(raw: &[Tensor], gts: &[GroundTruth], cfg: &LossConfig) -> Result<Detached> {
    let l = layout(raw, cfg)?;
    check_gts(gts, l.classes)?;
    let matches = assign_targets(&l.grids, gts, cfg);
    let mut alphas = Vec::with_capacity(matches.len());
    let mut obj_targets: Vec<Vec<f64>> = l.grids.iter().map(|(h, w)| vec![0.0; l.per_cell * h * w]).collect();
    for m in &matches {
        let (_, pred) = match_box(raw, &l, m, cfg);
        let c = ciou_terms(&pred, &gts[m.gt].bbox)?;
        alphas.push(c.alpha);
        let s = slot(&l, m);
        let idx = m.anchor * s.hw + s.cell;
        let target = (1.0 - c.loss).clamp(0.0, 1.0);
        let cur = &mut obj_targets[m.level][idx];
        *cur = cur.max(target);
    }
    Ok(Detached { alphas, obj_targets })
}

/// Loss of one image and its gradient w.r.t. each raw prediction map.
pub fn total_loss(raw: &[Tensor], gts: &[GroundTruth], cfg: &LossConfig) -> Result<(LossParts, Vec<Tensor>)> {
    let d = detach(raw, gts, cfg)?;
    total_loss_detached(raw, gts, cfg, &d)
}

/// Loss with the detached constants supplied by the caller. With `d =
/// detach(raw, ..)` it equals [`total_loss`]; holding `d` fixed while `raw`
/// moves gives the surrogate whose exact gradient is returned.
pub fn total_loss_detached(
    raw: &[Tensor],
    gts: &[GroundTruth],
    cfg: &LossConfig,
    d: &Detached,
) -> Result<(LossParts, Vec<Tensor>)> {
    cfg.validate()?;
    let l = layout(raw, cfg)?;
    check_gts(gts, l.classes)?;
    let matches = assign_targets(&l.grids, gts, cfg);
    if d.alphas.len() != matches.len() {
        return Err(Error::Validation("detached constants do not match the assignment".into()));
    }
    let eps = cfg.label_smoothing;
    let k_n = l.classes;
    let mut grads: Vec<Tensor> = raw.iter().map(|t| Tensor::zeros(t.shape())).collect();

    let mut box_sum = 0.0;
    let mut cls_sum = 0.0;
    let n_match = matches.len();
    let box_scale = if n_match > 0 { 1.0 / n_match as f64 } else { 0.0 };
    let cls_scale = if n_match > 0 { 1.0 / (n_match * k_n) as f64 } else { 0.0 };
    for (m, &alpha) in matches.iter().zip(&d.alphas) {
        let s = slot(&l, m);
        let (t, pred) = match_box(raw, &l, m, cfg);
        let gt = &gts[m.gt];
        let (lb, gb) = ciou_with_alpha(&pred, &gt.bbox, alpha)?;
        box_sum += lb;
        let stride = cfg.anchors.strides[m.level];
        let (aw, ah) = cfg.anchors.sizes[m.level][m.anchor];
        let sig: Vec<f64> = t.iter().map(|&v| sigmoid_scalar(v)).collect();
        let dsig: Vec<f64> = sig.iter().map(|s| s * (1.0 - s)).collect();
        let chain = [
            2.0 * stride * dsig[0],
            2.0 * stride * dsig[1],
            8.0 * sig[2] * dsig[2] * aw,
            8.0 * sig[3] * dsig[3] * ah,
        ];
        let g = grads[m.level].data_mut();
        let scale = cfg.box_weight * box_scale;
        for (j, ch) in [TX, TY, TW, TH].into_iter().enumerate() {
            g[(s.base + ch) * s.hw + s.cell] += scale * gb[j] * chain[j];
        }
        let data = raw[m.level].data();
        for k in 0..k_n {
            let idx = (s.base + CLS + k) * s.hw + s.cell;
            let target = if k == gt.class_id { 1.0 } else { 0.0 };
            cls_sum += smooth_bce(data[idx], target, eps);
            g[idx] += cfg.cls_weight * cls_scale * smooth_bce_grad(data[idx], target, eps);
        }
    }

    let total_slots: usize = l.grids.iter().map(|(h, w)| l.per_cell * h * w).sum();
    let obj_scale = 1.0 / total_slots as f64;
    let mut obj_sum = 0.0;
    for (lvl, t) in raw.iter().enumerate() {
        let (h, w) = l.grids[lvl];
        let hw = h * w;
        let targets = &d.obj_targets[lvl];
        if targets.len() != l.per_cell * hw {
            return Err(Error::Validation("detached objectness targets have the wrong size".into()));
        }
        for a in 0..l.per_cell {
            let base = a * (5 + k_n);
            for cell in 0..hw {
                let idx = (base + OBJ) * hw + cell;
                let x = t.data()[idx];
                let target = targets[a * hw + cell];
                obj_sum += smooth_bce(x, target, eps);
                grads[lvl].data_mut()[idx] += cfg.obj_weight * obj_scale * smooth_bce_grad(x, target, eps);
            }
        }
    }

    let bbox = box_sum * box_scale;
    let cls = cls_sum * cls_scale;
    let obj = obj_sum * obj_scale;
    let parts = LossParts {
        total: cfg.box_weight * bbox + cfg.obj_weight * obj + cfg.cls_weight * cls,
        bbox,
        obj,
        cls,
    };
    if !parts.total.is_finite() {
        return Err(Error::Evaluation(format!("non-finite loss {parts:?}")));
    }
    Ok((parts, grads))
}
