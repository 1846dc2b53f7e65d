//! Axis-aligned patch boxes in pixel coordinates, with IoU and greedy NMS.

use serde::{Deserialize, Serialize};

/// Box with corners `(lx, ly)` top-left and `(rx, ry)` bottom-right.
/// Area follows the continuous convention `(rx - lx) * (ry - ly)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchBox {
    pub lx: f64,
    pub ly: f64,
    pub rx: f64,
    pub ry: f64,
}

impl PatchBox {
    pub fn new(lx: f64, ly: f64, rx: f64, ry: f64) -> Self {
        PatchBox { lx, ly, rx, ry }
    }

    pub fn is_valid(&self) -> bool {
        self.lx < self.rx && self.ly < self.ry && self.lx.is_finite() && self.ly.is_finite() && self.rx.is_finite() && self.ry.is_finite()
    }

    pub fn area(&self) -> f64 {
        (self.rx - self.lx) * (self.ry - self.ly)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.lx + self.rx) / 2.0, (self.ly + self.ry) / 2.0)
    }

    /// Clamps to `[0, w] x [0, h]`. May produce a degenerate box if the
    /// original lies fully outside; callers reject those via `is_valid`.
    pub fn clamp_to(&self, w: f64, h: f64) -> PatchBox {
        PatchBox {
            lx: self.lx.clamp(0.0, w),
            ly: self.ly.clamp(0.0, h),
            rx: self.rx.clamp(0.0, w),
            ry: self.ry.clamp(0.0, h),
        }
    }
}

/// Intersection over union, in `[0, 1]`. Degenerate unions give 0.
pub fn iou(a: &PatchBox, b: &PatchBox) -> f64 {
    let iw = (a.rx.min(b.rx) - a.lx.max(b.lx)).max(0.0);
    let ih = (a.ry.min(b.ry) - a.ly.max(b.ly)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression. Boxes are visited in descending score
/// order (ties by lower index); a box is kept unless it overlaps an already
/// kept box with IoU strictly above `iou_threshold`. Returns kept indices in
/// visit order.
pub fn nms(boxes: &[PatchBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou(&boxes[i], &boxes[k]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
