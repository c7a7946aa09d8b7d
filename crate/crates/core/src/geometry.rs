//! Axis-aligned boxes and the overlap measures used throughout the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image pixel coordinates, `x1 < x2` and `y1 < y2`.
///
/// Serialized as the four-element array `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    /// Builds a box, rejecting non-finite or inverted coordinates.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::malformed(format!(
                "invalid box [{}, {}, {}, {}]",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    /// Box from centre, width and height.
    pub fn from_cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoundingBox {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    /// Box from the `(cx, cy, aspect, height)` measurement space of the Kalman filter.
    pub fn from_xyah(cx: f64, cy: f64, aspect: f64, h: f64) -> Self {
        Self::from_cxcywh(cx, cy, aspect * h, h)
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

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_cxcywh(&self) -> [f64; 4] {
        let (cx, cy) = self.center();
        [cx, cy, self.width(), self.height()]
    }

    pub fn to_xyah(&self) -> [f64; 4] {
        let (cx, cy) = self.center();
        [cx, cy, self.width() / self.height(), self.height()]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BoundingBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Linear interpolation of the corners, `t = 0` gives `self`.
    pub fn lerp(&self, other: &BoundingBox, t: f64) -> Self {
        let mix = |a: f64, b: f64| a + (b - a) * t;
        BoundingBox {
            x1: mix(self.x1, other.x1),
            y1: mix(self.y1, other.y1),
            x2: mix(self.x2, other.x2),
            y2: mix(self.y2, other.y2),
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Intersection over union of two boxes. Symmetric, in `[0, 1]`, zero when disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Cosine similarity of two vectors of equal length; zero if either is null.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}
