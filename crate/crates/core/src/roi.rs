//! Axis-aligned region of interest in image pixel coordinates.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
    pub objectness: f32,
}

impl Roi {
    pub fn new(x0: f32, y0: f32, x1: f32, y1: f32) -> Roi {
        Roi {
            x0,
            y0,
            x1,
            y1,
            objectness: 0.0,
        }
    }

    pub fn with_objectness(mut self, objectness: f32) -> Roi {
        self.objectness = objectness;
        self
    }

    pub fn width(&self) -> f32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 > self.x0 && self.y1 > self.y0
    }

    /// Clamp the box to `[0, w] x [0, h]`.
    pub fn clip(&self, w: usize, h: usize) -> Roi {
        Roi {
            x0: self.x0.clamp(0.0, w as f32),
            y0: self.y0.clamp(0.0, h as f32),
            x1: self.x1.clamp(0.0, w as f32),
            y1: self.y1.clamp(0.0, h as f32),
            objectness: self.objectness,
        }
    }

    /// True when the clipped box spans at least one feature pixel per axis
    /// at the given stride.
    pub fn spans_feature_pixel(&self, stride: usize) -> bool {
        self.width() >= stride as f32 && self.height() >= stride as f32
    }

    /// Box intersection-over-union.
    pub fn iou(&self, other: &Roi) -> f32 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_is_one() {
        let a = Roi::new(2.0, 3.0, 10.0, 12.0);
        assert_eq!(a.iou(&a), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = Roi::new(0.0, 0.0, 4.0, 4.0);
        let b = Roi::new(10.0, 10.0, 14.0, 14.0);
        assert_eq!(a.iou(&b), 0.0);
    }

    #[test]
    fn iou_half_overlap() {
        let a = Roi::new(0.0, 0.0, 4.0, 4.0);
        let b = Roi::new(2.0, 0.0, 6.0, 4.0);
        // intersection 8, union 24
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn clip_clamps_to_bounds() {
        let r = Roi::new(-5.0, -2.0, 70.0, 40.0).clip(64, 32);
        assert_eq!((r.x0, r.y0, r.x1, r.y1), (0.0, 0.0, 64.0, 32.0));
    }
}
