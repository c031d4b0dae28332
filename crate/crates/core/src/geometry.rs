//! Rectangle algebra shared by the rest of the crate: normalized boxes,
//! intersection-over-union and class-aware non-maximum suppression.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default IoU threshold for [`nms`].
pub const DEFAULT_NMS_IOU: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box center ({cx}, {cy}) outside [0, 1]")]
    CenterOutOfRange { cx: f64, cy: f64 },
    #[error("box extent ({w}, {h}) must be in (0, 1]")]
    ExtentOutOfRange { w: f64, h: f64 },
    #[error("confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("unknown class name {0:?}")]
    UnknownClassName(String),
}

/// The two object classes a detector reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassId {
    Fire = 0,
    Smoke = 1,
}

impl ClassId {
    pub const ALL: [ClassId; 2] = [ClassId::Fire, ClassId::Smoke];
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(id: usize) -> Result<Self, GeometryError> {
        match id {
            0 => Ok(ClassId::Fire),
            1 => Ok(ClassId::Smoke),
            other => Err(GeometryError::UnknownClass(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Fire => "fire",
            ClassId::Smoke => "smoke",
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ClassId {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fire" => Ok(ClassId::Fire),
            "smoke" => Ok(ClassId::Smoke),
            other => Err(GeometryError::UnknownClassName(other.to_string())),
        }
    }
}

/// A center-format box normalized to the image size.
///
/// `cx`, `cy` lie in `[0, 1]` and `w`, `h` in `(0, 1]`. The box may extend
/// past the image border; [`BBox::corners`] clamps it back for area
/// computations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(GeometryError::CenterOutOfRange { cx, cy });
        }
        if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(GeometryError::ExtentOutOfRange { w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Builds a box from its top-left and bottom-right corners.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// `(x0, y0, x1, y1)` clamped to the unit square.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = self.w / 2.0;
        let hh = self.h / 2.0;
        (
            (self.cx - hw).clamp(0.0, 1.0),
            (self.cy - hh).clamp(0.0, 1.0),
            (self.cx + hw).clamp(0.0, 1.0),
            (self.cy + hh).clamp(0.0, 1.0),
        )
    }

    /// Area of the clamped box.
    pub fn area(&self) -> f64 {
        let (x0, y0, x1, y1) = self.corners();
        (x1 - x0) * (y1 - y0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = ax1.min(bx1) - ax0.max(bx0);
        let ih = ay1.min(by1) - ay0.max(by0);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
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
        [b.cx, b.cy, b.w, b.h]
    }
}

/// Intersection over union of two boxes. Symmetric, in `[0, 1]`, and zero
/// for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A predicted box with its class and confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: ClassId,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class: ClassId, confidence: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(GeometryError::Confidence(confidence));
        }
        Ok(Self {
            bbox,
            class,
            confidence,
        })
    }
}

/// Indices of `dets` sorted by descending confidence. Ties keep input
/// order, and equal input order cannot occur, so the order is total.
pub(crate) fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .confidence
            .total_cmp(&dets[i].confidence)
            .then(i.cmp(&j))
    });
    order
}

/// Class-aware greedy non-maximum suppression.
///
/// Within each class, detections are visited by descending confidence and a
/// detection is dropped when its IoU with an already kept detection of the
/// same class reaches `iou_threshold`. The result is ordered by descending
/// confidence.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let order = confidence_order(dets);
    let mut kept: Vec<usize> = Vec::with_capacity(dets.len());
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class == dets[i].class && iou(&dets[k].bbox, &dets[i].bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(b: BBox, class: ClassId, conf: f64) -> Detection {
        Detection::new(b, class, conf).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(0.1, 0.1, 0.1, 0.1).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_half_overlap_on_ten_grid() {
        // Expected value comes from counting covered cells on the 10x10
        // grid: 4 shared cells out of 12 covered.
        let a = BBox::from_corners(0.0, 0.0, 0.2, 0.2).unwrap();
        let b = BBox::from_corners(0.1, 0.0, 0.3, 0.2).unwrap();
        let mut inter = 0;
        let mut union = 0;
        for gx in 0..10 {
            for gy in 0..10 {
                let in_a = gx < 2 && gy < 2;
                let in_b = (1..3).contains(&gx) && gy < 2;
                inter += (in_a && in_b) as u32;
                union += (in_a || in_b) as u32;
            }
        }
        let expected = inter as f64 / union as f64;
        assert!((expected - 1.0 / 3.0).abs() < 1e-15);
        assert!((iou(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BBox::new(1.1, 0.5, 0.1, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, 0.1, 1.5).is_err());
        assert!(BBox::new(f64::NAN, 0.5, 0.1, 0.1).is_err());
    }

    #[test]
    fn corners_clamp_to_image() {
        let b = BBox::new(0.0, 1.0, 0.4, 0.4).unwrap();
        assert_eq!(b.corners(), (0.0, 0.8, 0.2, 1.0));
        assert!((b.area() - 0.04).abs() < 1e-15);
    }

    #[test]
    fn nms_empty_and_duplicates() {
        assert!(nms(&[], 0.45).is_empty());
        let b = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let out = nms(
            &[det(b, ClassId::Fire, 0.8), det(b, ClassId::Fire, 0.9)],
            0.45,
        );
        assert_eq!(out, vec![det(b, ClassId::Fire, 0.9)]);
    }

    #[test]
    fn nms_classes_do_not_interact() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let out = nms(
            &[det(b, ClassId::Smoke, 0.7), det(b, ClassId::Fire, 0.9)],
            0.45,
        );
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].class, ClassId::Fire);
    }

    #[test]
    fn nms_equal_confidence_keeps_first_in_input_order() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let b = BBox::new(0.51, 0.5, 0.2, 0.2).unwrap();
        let out = nms(
            &[det(b, ClassId::Fire, 0.5), det(a, ClassId::Fire, 0.5)],
            0.45,
        );
        assert_eq!(out, vec![det(b, ClassId::Fire, 0.5)]);
    }

    #[test]
    fn class_names_round_trip() {
        for c in ClassId::ALL {
            assert_eq!(c.name().parse::<ClassId>().unwrap(), c);
            assert_eq!(ClassId::from_index(c.index()).unwrap(), c);
        }
        assert!(ClassId::from_index(2).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.01..=1.0f64, 0.01..=1.0f64)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (arb_box(), prop::bool::ANY, 0.0..=1.0f64).prop_map(|(b, smoke, c)| {
                let class = if smoke { ClassId::Smoke } else { ClassId::Fire };
                det(b, class, c)
            }),
            0..12,
        )
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn nms_idempotent_subset(dets in arb_dets(), t in 0.05..0.95f64) {
            let once = nms(&dets, t);
            prop_assert!(once.len() <= dets.len());
            prop_assert_eq!(nms(&once, t), once.clone());
            for d in &once {
                prop_assert!(dets.contains(d));
            }
            for w in once.windows(2) {
                prop_assert!(w[0].confidence >= w[1].confidence);
            }
            for (i, a) in once.iter().enumerate() {
                for b in &once[i + 1..] {
                    if a.class == b.class {
                        prop_assert!(iou(&a.bbox, &b.bbox) < t);
                    }
                }
            }
        }
    }
}
