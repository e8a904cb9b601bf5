//! Axis-aligned boxes, aspect ratios and overlap.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// An axis-aligned box in image units, stored as top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from corner coordinates `(x1, y1, x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn to_corners(&self) -> [f64; 4] {
        [self.x, self.y, self.x + self.w, self.y + self.h]
    }

    pub fn validate(&self) -> Result<()> {
        ensure(
            self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite(),
            || format!("box has non-finite coordinates: {self:?}"),
        )?;
        ensure(self.w > 0.0 && self.h > 0.0, || {
            format!("degenerate box (w={}, h={})", self.w, self.h)
        })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Swaps width and height, keeping the corner.
    pub fn transpose(&self) -> Self {
        BoundingBox {
            x: self.x,
            y: self.y,
            w: self.h,
            h: self.w,
        }
    }
}

/// A candidate region with its localization confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    pub bbox: BoundingBox,
    pub score_l: f64,
}

impl RegionProposal {
    pub fn new(bbox: BoundingBox, score_l: f64) -> Result<Self> {
        bbox.validate()?;
        ensure((0.0..=1.0).contains(&score_l), || {
            format!("localization score {score_l} outside [0, 1]")
        })?;
        Ok(RegionProposal { bbox, score_l })
    }
}

/// Height over width.
pub fn aspect_ratio(b: &BoundingBox) -> Result<f64> {
    b.validate()?;
    Ok(b.h / b.w)
}

/// Intersection over union. Boxes touching only along an edge have IoU 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BoundingBox, b: &BoundingBox) -> f64 {
    // (x + w) - x is not always w in floating point
    if a == b {
        return 1.0;
    }
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}
