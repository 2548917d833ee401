//! Axis-aligned box arithmetic: IoU, greedy non-maximum suppression, and the
//! two box normalizations (to the image and to the scene's enveloping box).
//!
//! Boxes use corner format `(x1, y1, x2, y2)` in pixel units.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box coordinates must be finite, got ({0}, {1}, {2}, {3})")]
    NonFinite(f64, f64, f64, f64),
    #[error("box corners out of order: ({0}, {1}, {2}, {3})")]
    Inverted(f64, f64, f64, f64),
    #[error("image dimensions must be positive, got {0}x{1}")]
    ImageSize(f64, f64),
    #[error("enveloping box of an empty set is undefined")]
    EmptySet,
    #[error("IoU threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("score at index {0} is not finite")]
    Score(usize),
    #[error("{0} group labels given for {1} boxes")]
    GroupCount(usize, usize),
}

/// Axis-aligned pixel rectangle. Construction enforces `x1 <= x2`, `y1 <= y2`
/// and finite coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite(x1, y1, x2, y2));
        }
        if x1 > x2 || y1 > y2 {
            return Err(GeometryError::Inverted(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clamp every coordinate into `[0, image_w] x [0, image_h]`.
    pub fn clamp_to_image(&self, image_w: f64, image_h: f64) -> Result<Self, GeometryError> {
        check_image(image_w, image_h)?;
        Ok(Self {
            x1: self.x1.clamp(0.0, image_w),
            y1: self.y1.clamp(0.0, image_h),
            x2: self.x2.clamp(0.0, image_w),
            y2: self.y2.clamp(0.0, image_h),
        })
    }

    fn intersection_area(&self, other: &Self) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// A box expressed as ratios of some reference frame, each component in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub u1: f64,
    pub v1: f64,
    pub u2: f64,
    pub v2: f64,
}

impl NormalizedBox {
    pub fn to_array(&self) -> [f64; 4] {
        [self.u1, self.v1, self.u2, self.v2]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            u1: s[0],
            v1: s[1],
            u2: s[2],
            v2: s[3],
        }
    }
}

fn check_image(image_w: f64, image_h: f64) -> Result<(), GeometryError> {
    if image_w > 0.0 && image_h > 0.0 && image_w.is_finite() && image_h.is_finite() {
        Ok(())
    } else {
        Err(GeometryError::ImageSize(image_w, image_h))
    }
}

fn check_threshold(t: f64) -> Result<(), GeometryError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(GeometryError::Threshold(t))
    }
}

/// Intersection over union. Two boxes whose union has zero area have IoU 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Indices sorted by score descending, ties resolved by ascending index.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| match scores[j].partial_cmp(&scores[i]) {
        Some(Ordering::Equal) | None => i.cmp(&j),
        Some(o) => o,
    });
    order
}

/// Greedy class-agnostic NMS. Returns kept indices in descending score order.
///
/// A candidate is discarded when its IoU with any already kept box is strictly
/// greater than `iou_threshold`. Equal scores are visited in input order.
pub fn nms(dets: &[(BoundingBox, f64)], iou_threshold: f64) -> Result<Vec<usize>, GeometryError> {
    check_threshold(iou_threshold)?;
    let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(GeometryError::Score(i));
    }

    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(&scores) {
        let suppressed = kept.iter().any(|&k| iou(&dets[k].0, &dets[i].0) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// NMS run independently within each group (e.g. per predicted class), with
/// the surviving indices merged back into descending score order.
pub fn nms_grouped(
    dets: &[(BoundingBox, f64)],
    groups: &[usize],
    iou_threshold: f64,
) -> Result<Vec<usize>, GeometryError> {
    if groups.len() != dets.len() {
        return Err(GeometryError::GroupCount(groups.len(), dets.len()));
    }
    check_threshold(iou_threshold)?;
    let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(GeometryError::Score(i));
    }

    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(&scores) {
        let suppressed = kept
            .iter()
            .any(|&k| groups[k] == groups[i] && iou(&dets[k].0, &dets[i].0) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Divide by the image size after clamping the box into the image.
pub fn normalize_global(b: &BoundingBox, image_w: f64, image_h: f64) -> Result<NormalizedBox, GeometryError> {
    let c = b.clamp_to_image(image_w, image_h)?;
    Ok(NormalizedBox {
        u1: c.x1 / image_w,
        v1: c.y1 / image_h,
        u2: c.x2 / image_w,
        v2: c.y2 / image_h,
    })
}

/// Smallest box containing every box in `boxes`.
pub fn enveloping_box(boxes: &[BoundingBox]) -> Result<BoundingBox, GeometryError> {
    let (first, rest) = boxes.split_first().ok_or(GeometryError::EmptySet)?;
    Ok(rest.iter().fold(*first, |acc, b| BoundingBox {
        x1: acc.x1.min(b.x1),
        y1: acc.y1.min(b.y1),
        x2: acc.x2.max(b.x2),
        y2: acc.y2.max(b.y2),
    }))
}

fn relative_axis(lo: f64, hi: f64, env_lo: f64, env_hi: f64) -> (f64, f64) {
    let extent = env_hi - env_lo;
    if extent <= 0.0 {
        // zero-extent envelope: min edge 0, max edge 1
        (0.0, 1.0)
    } else {
        (
            ((lo - env_lo) / extent).clamp(0.0, 1.0),
            ((hi - env_lo) / extent).clamp(0.0, 1.0),
        )
    }
}

/// Express `b` relative to `envelope`, which is expected to contain it.
pub fn normalize_relative(b: &BoundingBox, envelope: &BoundingBox) -> NormalizedBox {
    let (u1, u2) = relative_axis(b.x1, b.x2, envelope.x1, envelope.x2);
    let (v1, v2) = relative_axis(b.y1, b.y2, envelope.y1, envelope.y2);
    NormalizedBox { u1, v1, u2, v2 }
}
