//! Axis-aligned box arithmetic and class-wise non-maximum suppression.
//!
//! Boxes are closed rectangles with real-valued pixel coordinates. Integer
//! annotations are lifted into `f64` without loss, so every IoU computed on
//! integer-pixel inputs is exact up to the final division.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box coordinates must be finite, got ({0}, {1}, {2}, {3})")]
    NonFinite(f64, f64, f64, f64),
    #[error("inverted box: x_min {x_min} > x_max {x_max} or y_min {y_min} > y_max {y_max}")]
    Inverted {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("score {0} is outside [0, 1]")]
    Score(f64),
}

/// Index of a class in the active [`ClassRegistry`](crate::dataset::ClassRegistry).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClassId(pub usize);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]` in pixels.
///
/// Zero-width or zero-height boxes are legal and reported by
/// [`BBox::is_degenerate`]. They have IoU 0 with everything, including
/// themselves, so they never survive [`nms`] and never match in evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite(x_min, y_min, x_max, y_max));
        }
        if x_min > x_max || y_min > y_max {
            return Err(GeometryError::Inverted {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds the box spanning two corners given in any order.
    pub fn from_corners(a: (f64, f64), b: (f64, f64)) -> Result<Self, GeometryError> {
        Self::new(a.0.min(b.0), a.1.min(b.1), a.0.max(b.0), a.1.max(b.1))
    }

    /// The frame `[0, width] × [0, height]`.
    pub fn frame(width: u32, height: u32) -> Self {
        Self {
            x_min: 0.0,
            y_min: 0.0,
            x_max: f64::from(width),
            y_max: f64::from(height),
        }
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Area shared by the two boxes (0 when they are disjoint or only touch).
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union; 0 when the union has no area.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).min(1.0)
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Intersection rectangle with `region`, or `None` if it has zero area.
    pub fn clip(&self, region: &BBox) -> Option<BBox> {
        let clipped = BBox {
            x_min: self.x_min.max(region.x_min),
            y_min: self.y_min.max(region.y_min),
            x_max: self.x_max.min(region.x_max),
            y_max: self.y_max.min(region.y_max),
        };
        (clipped.x_min < clipped.x_max && clipped.y_min < clipped.y_max).then_some(clipped)
    }

    /// Clamps every coordinate into `region`, keeping degenerate results.
    pub fn clamp_to(&self, region: &BBox) -> BBox {
        let cx = |v: f64| v.clamp(region.x_min, region.x_max);
        let cy = |v: f64| v.clamp(region.y_min, region.y_max);
        BBox {
            x_min: cx(self.x_min),
            y_min: cy(self.y_min),
            x_max: cx(self.x_max),
            y_max: cy(self.y_max),
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    /// Lexicographic order on `(x_min, y_min, x_max, y_max)`.
    pub fn lex_cmp(&self, other: &BBox) -> Ordering {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

/// A classified, scored box as produced by a detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub class_id: ClassId,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, class_id: ClassId, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::Score(score));
        }
        Ok(Self {
            bbox,
            class_id,
            score,
        })
    }
}

/// Anything that carries a [`ScoredBox`], so wrappers with extra metadata can
/// go through [`nms`] unchanged.
pub trait Scored {
    fn scored(&self) -> &ScoredBox;
}

impl Scored for ScoredBox {
    fn scored(&self) -> &ScoredBox {
        self
    }
}

/// Total order used to rank detections: score descending, then lexicographic
/// box order, then class id.
pub fn rank_cmp(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
        .then_with(|| a.class_id.cmp(&b.class_id))
}

/// Greedy class-wise non-maximum suppression.
///
/// Items are ranked with [`rank_cmp`] (stable, so exact duplicates keep input
/// order). An item is kept iff its IoU with every already kept item of the
/// same class is below `iou_threshold`. Degenerate boxes are never kept. The
/// result is in rank order.
pub fn nms<T: Scored + Clone>(items: &[T], iou_threshold: f64) -> Vec<T> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&i, &j| rank_cmp(items[i].scored(), items[j].scored()));

    let mut kept: Vec<T> = Vec::new();
    for i in order {
        let cand = items[i].scored();
        if cand.bbox.is_degenerate() {
            continue;
        }
        let suppressed = kept.iter().any(|k| {
            let k = k.scored();
            k.class_id == cand.class_id && k.bbox.iou(&cand.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(items[i].clone());
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn sb(bbox: BBox, class: usize, score: f64) -> ScoredBox {
        ScoredBox::new(bbox, ClassId(class), score).unwrap()
    }

    /// Counts covered cells on a fine lattice of sample points.
    fn raster_areas(a: &BBox, c: &BBox, step: f64) -> (f64, f64) {
        let (mut inter, mut union) = (0u64, 0u64);
        let inside = |r: &BBox, x: f64, y: f64| {
            x > r.x_min() && x < r.x_max() && y > r.y_min() && y < r.y_max()
        };
        let mut y = step / 2.0;
        while y < 40.0 {
            let mut x = step / 2.0;
            while x < 40.0 {
                let (ia, ic) = (inside(a, x, y), inside(c, x, y));
                inter += (ia && ic) as u64;
                union += (ia || ic) as u64;
                x += step;
            }
            y += step;
        }
        (inter as f64 * step * step, union as f64 * step * step)
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&b(20.0, 20.0, 30.0, 30.0)), 0.0);

        let c = b(5.0, 0.0, 15.0, 10.0);
        let (inter, union) = raster_areas(&a, &c, 0.125);
        assert_eq!((inter, union), (50.0, 150.0));
        assert!((a.iou(&c) - inter / union).abs() < 1e-15);
    }

    #[test]
    fn degenerate_iou_is_zero() {
        let d = b(3.0, 3.0, 3.0, 9.0);
        assert!(d.is_degenerate());
        assert_eq!(d.iou(&d), 0.0);
        assert_eq!(d.iou(&b(0.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn rejects_inverted_and_nan() {
        assert!(matches!(
            BBox::new(5.0, 0.0, 1.0, 1.0),
            Err(GeometryError::Inverted { .. })
        ));
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(ScoredBox::new(b(0.0, 0.0, 1.0, 1.0), ClassId(0), 1.5).is_err());
    }

    #[test]
    fn translate_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.translate(0.0, 0.0), a);
        let m = b(10.0, 20.0, 60.0, 80.0).translate(1368.0, 769.0);
        assert_eq!(m, b(1378.0, 789.0, 1428.0, 849.0));
        assert_eq!(m.translate(-1368.0, -769.0), b(10.0, 20.0, 60.0, 80.0));
    }

    #[test]
    fn clip_examples() {
        let region = b(0.0, 0.0, 100.0, 100.0);
        let inner = b(10.0, 10.0, 20.0, 30.0);
        assert_eq!(inner.clip(&region), Some(inner));
        assert_eq!(b(0.0, 0.0, 10.0, 10.0).clip(&b(20.0, 0.0, 30.0, 10.0)), None);
        let clipped = b(0.0, 0.0, 10.0, 10.0).clip(&b(5.0, 5.0, 20.0, 20.0));
        assert_eq!(clipped, Some(b(5.0, 5.0, 10.0, 10.0)));
        // rasterized area of the overlap agrees with the clipped area
        let (inter, _) = raster_areas(&b(0.0, 0.0, 10.0, 10.0), &b(5.0, 5.0, 20.0, 20.0), 0.25);
        assert_eq!(inter, clipped.unwrap().area());
        // touching edges have zero-area intersection
        assert_eq!(b(0.0, 0.0, 10.0, 10.0).clip(&b(10.0, 0.0, 20.0, 10.0)), None);
    }

    #[test]
    fn nms_examples() {
        // IoU 0.8: 100x100 box vs same box shifted by 100/9 px
        let a = b(0.0, 0.0, 100.0, 100.0);
        let shifted = b(100.0 / 9.0, 0.0, 100.0 + 100.0 / 9.0, 100.0);
        assert!((a.iou(&shifted) - 0.8).abs() < 1e-12);
        let out = nms(&[sb(shifted, 0, 0.8), sb(a, 0, 0.9)], 0.5);
        assert_eq!(out, vec![sb(a, 0, 0.9)]);

        let disjoint: Vec<_> = (0..5)
            .map(|i| sb(b(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0), 0, 0.5))
            .collect();
        for t in [0.0001, 0.5, 1.0] {
            assert_eq!(nms(&disjoint, t).len(), 5);
        }

        let out = nms(&[sb(a, 0, 0.9), sb(a, 1, 0.9)], 0.5);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn nms_ties_break_on_box_order() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let c = b(1.0, 0.0, 11.0, 10.0);
        let out = nms(&[sb(c, 0, 0.7), sb(a, 0, 0.7)], 0.5);
        assert_eq!(out, vec![sb(a, 0, 0.7)]);
    }

    #[test]
    fn nms_drops_degenerate() {
        let d = b(5.0, 5.0, 5.0, 5.0);
        assert!(nms(&[sb(d, 0, 1.0)], 0.5).is_empty());
    }

    #[test]
    fn serde_rejects_inverted() {
        assert!(serde_json::from_str::<BBox>("[0,0,1,1]").is_ok());
        assert!(serde_json::from_str::<BBox>("[2,0,1,1]").is_err());
    }
}
