//! Axis-aligned boxes in image-normalized coordinates.
//!
//! Pixel-space boxes use edge coordinates, where the image spans `[0, W]`
//! and pixel `i` occupies `[i, i + 1)`. A pixel-center position `u` is the
//! edge coordinate `u + 0.5`.

use serde::{Deserialize, Serialize};

/// Top-left corner `(x, y)` and size `(w, h)`, all divided by the image
/// width or height. Serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BoundingBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn from_pixels(x: f64, y: f64, w: f64, h: f64, width: usize, height: usize) -> Self {
        let (sw, sh) = (width as f64, height as f64);
        Self::new(x / sw, y / sh, w / sw, h / sh)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// `(x, y, w, h)` in pixels of a `width x height` image.
    pub fn to_pixels(&self, width: usize, height: usize) -> (f64, f64, f64, f64) {
        let (sw, sh) = (width as f64, height as f64);
        (self.x * sw, self.y * sh, self.w * sw, self.h * sh)
    }

    /// Intersection with `[0, 1]^2`.
    pub fn clipped(&self) -> Self {
        let x0 = self.x.clamp(0.0, 1.0);
        let y0 = self.y.clamp(0.0, 1.0);
        let x1 = (self.x + self.w).clamp(0.0, 1.0);
        let y1 = (self.y + self.h).clamp(0.0, 1.0);
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }
}

/// Intersection over union; 0 when the union has no area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
