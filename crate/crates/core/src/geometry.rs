//! Box geometry: IoU, CIoU and class-aware non-maximum suppression.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> Result<Self> {
        let b = Self { cx, cy, w, h, class_id };
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::NonFinite(format!("box {b:?}")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid(format!("box extents must be positive, got {w}×{h}")));
        }
        Ok(b)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, class_id)
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Same geometry, ignoring class.
    pub fn same_geometry(&self, other: &BBox) -> bool {
        self.cx == other.cx && self.cy == other.cy && self.w == other.w && self.h == other.h
    }
}

/// A scored box on a named image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(image_id: impl Into<String>, bbox: BBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("score must lie in [0, 1], got {score}")));
        }
        Ok(Self {
            image_id: image_id.into(),
            bbox,
            score,
        })
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

fn corner_area(b: &BBox) -> f64 {
    let (x1, y1, x2, y2) = b.corners();
    (x2 - x1) * (y2 - y1)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = corner_area(a) + corner_area(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Squared center distance over squared diagonal of the enclosing box.
fn center_penalty(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let c2 = cw * cw + ch * ch;
    let rho2 = (a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2);
    rho2 / c2
}

/// `IoU − ρ²/c²`.
pub fn diou(a: &BBox, b: &BBox) -> f64 {
    iou(a, b) - center_penalty(a, b)
}

/// `1 − IoU + ρ²/c² + αv`.
pub fn ciou_loss(a: &BBox, b: &BBox) -> f64 {
    let overlap = iou(a, b);
    let v = 4.0 / (PI * PI) * ((a.w / a.h).atan() - (b.w / b.h).atan()).powi(2);
    let denom = (1.0 - overlap) + v;
    let alpha = if denom > 0.0 { v / denom } else { 0.0 };
    1.0 - overlap + center_penalty(a, b) + alpha * v
}

/// Overlap measure compared against the NMS threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suppression {
    #[default]
    Iou,
    Diou,
}

impl Suppression {
    pub fn overlap(self, a: &BBox, b: &BBox) -> f64 {
        match self {
            Suppression::Iou => iou(a, b),
            Suppression::Diou => diou(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub criterion: Suppression,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.45,
            score_threshold: 0.25,
            criterion: Suppression::Iou,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("IoU threshold", self.iou_threshold),
            ("score threshold", self.score_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Descending score, ties by lower index.
pub(crate) fn score_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Indices of kept detections, highest score first.
///
/// Detections on different images or of different classes never suppress
/// each other.
pub fn nms_indices(detections: &[Detection], config: &NmsConfig) -> Result<Vec<usize>> {
    config.validate()?;
    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].score >= config.score_threshold)
        .collect();
    order.sort_by(|&a, &b| score_order((a, detections[a].score), (b, detections[b].score)));

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &detections[i];
        let suppressed = kept.iter().any(|&k| {
            let other = &detections[k];
            other.image_id == d.image_id
                && other.bbox.class_id == d.bbox.class_id
                && config.criterion.overlap(&other.bbox, &d.bbox) > config.iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

pub fn nms(detections: &[Detection], config: &NmsConfig) -> Result<Vec<Detection>> {
    Ok(nms_indices(detections, config)?
        .into_iter()
        .map(|i| detections[i].clone())
        .collect())
}
