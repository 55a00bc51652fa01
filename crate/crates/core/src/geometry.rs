//! Box representations, overlap measures, and the pairwise relative
//! position encoding fed to the suppression layer's bias network.
//!
//! Boxes live in center-size form `(cx, cy, w, h)`; corner form is
//! computed on demand. Coordinates are conventionally normalized to the
//! unit square, but only positivity of the extents is enforced so tests
//! can work at any scale.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate box: w={w}, h={h} (extents must be positive)")]
    DegenerateBox { w: f64, h: f64 },
}

/// Minimum extent for boxes produced by the network, keeping the
/// logarithms of the relative position encoding finite.
pub const MIN_EXTENT: f64 = 1e-6;

/// Axis-aligned bounding box in center-size form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<BBox, GeometryError> {
        if !(w > 0.0 && h > 0.0) {
            return Err(GeometryError::DegenerateBox { w, h });
        }
        Ok(BBox { cx, cy, w, h })
    }

    /// Construct from raw network outputs, clamping extents to
    /// [`MIN_EXTENT`] so downstream logs stay finite.
    pub fn clamped(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox {
            cx,
            cy,
            w: w.max(MIN_EXTENT),
            h: h.max(MIN_EXTENT),
        }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<BBox, GeometryError> {
        BBox::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// Corner form `(x1, y1, x2, y2)`.
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
}

/// A box carrying its object class, used for ground-truth annotations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Intersection-over-union in `[0, 1]`; zero for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in `(-1, 1]`: IoU minus the fraction of the smallest
/// enclosing box not covered by the union.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let ew = ax2.max(bx2) - ax1.min(bx1);
    let eh = ay2.max(by2) - ay1.min(by1);
    let enclosing = ew * eh;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if enclosing <= 0.0 {
        iou
    } else {
        iou - (enclosing - union) / enclosing
    }
}

/// Four-component relative position encoding between two boxes:
/// `[log(|dx|/w_i + 1), log(|dy|/h_i + 1), log(w_i/w_j), log(h_i/h_j)]`
/// with `dx = cx_j - cx_i`, `dy = cy_j - cy_i`.
///
/// All-zero when a box is paired with itself; deliberately asymmetric in
/// scale (the first two components are normalized by box `i`).
pub fn rel_pos_encoding(a: &BBox, b: &BBox) -> [f64; 4] {
    let dx = b.cx - a.cx;
    let dy = b.cy - a.cy;
    [
        (dx.abs() / a.w + 1.0).ln(),
        (dy.abs() / a.h + 1.0).ln(),
        (a.w / b.w).ln(),
        (a.h / b.h).ln(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_box() -> BBox {
        BBox::new(0.5, 0.5, 1.0, 1.0).unwrap()
    }

    #[test]
    fn corner_conversion_hand_cases() {
        assert_eq!(unit_box().corners(), (0.0, 0.0, 1.0, 1.0));
        let b = BBox::new(0.5, 0.5, 0.2, 0.4).unwrap();
        let (x1, y1, x2, y2) = b.corners();
        assert!((x1 - 0.4).abs() < 1e-15);
        assert!((y1 - 0.3).abs() < 1e-15);
        assert!((x2 - 0.6).abs() < 1e-15);
        assert!((y2 - 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_area_rejected() {
        assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, 0.1, -0.2).is_err());
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let exact = BBox::new(0.25, 0.25, 0.5, 0.5).unwrap();
        assert_eq!(iou(&exact, &exact), 1.0);
        let a = BBox::new(0.3, 0.3, 0.2, 0.2).unwrap();
        assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        let b = BBox::new(0.8, 0.8, 0.1, 0.1).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_one_seventh_case() {
        // corner boxes (0,0,2,2) and (1,1,3,3): inter 1, union 7
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0).unwrap();
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn giou_hand_case_and_far_limit() {
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0).unwrap();
        // enclosing box (0,0,3,3) has area 9, union 7
        assert!((giou(&a, &b) - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-15);
        assert_eq!(giou(&a, &a), 1.0);

        let far = BBox::new(100.0, 100.0, 0.5, 0.5).unwrap();
        let near = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        assert!(giou(&near, &far) < -0.9);
    }

    #[test]
    fn rel_pos_zero_for_self_and_hand_case() {
        let b = BBox::new(0.4, 0.6, 0.2, 0.3).unwrap();
        assert_eq!(rel_pos_encoding(&b, &b), [0.0, 0.0, 0.0, 0.0]);

        let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let c = BBox::new(2.0, 0.0, 1.0, 1.0).unwrap();
        let e = rel_pos_encoding(&a, &c);
        let ln2 = std::f64::consts::LN_2;
        assert!((e[0] - ln2).abs() < 1e-15);
        assert_eq!(e[1], 0.0);
        assert!((e[2] - ln2).abs() < 1e-15);
        assert!((e[3] - ln2).abs() < 1e-15);
    }

    #[test]
    fn rel_pos_swap_negates_scale_components() {
        let a = BBox::new(0.2, 0.3, 0.4, 0.1).unwrap();
        let b = BBox::new(0.7, 0.5, 0.2, 0.3).unwrap();
        let eab = rel_pos_encoding(&a, &b);
        let eba = rel_pos_encoding(&b, &a);
        assert!((eab[2] + eba[2]).abs() < 1e-15);
        assert!((eab[3] + eba[3]).abs() < 1e-15);
        // asymmetric in scale when the extents differ
        assert!(eab != eba);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.01..0.9f64, 0.01..0.9f64)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!((0.0..=1.0).contains(&ab));
            let gab = giou(&a, &b);
            let gba = giou(&b, &a);
            prop_assert_eq!(gab.to_bits(), gba.to_bits());
            prop_assert!(gab <= ab + 1e-15);
        }

        #[test]
        fn corner_roundtrip_is_identity(b in arb_box()) {
            let (x1, y1, x2, y2) = b.corners();
            let r = BBox::from_corners(x1, y1, x2, y2).unwrap();
            prop_assert!((r.cx - b.cx).abs() < 1e-12);
            prop_assert!((r.cy - b.cy).abs() < 1e-12);
            prop_assert!((r.w - b.w).abs() < 1e-12);
            prop_assert!((r.h - b.h).abs() < 1e-12);
        }

        #[test]
        fn rel_pos_self_is_zero(b in arb_box()) {
            prop_assert_eq!(rel_pos_encoding(&b, &b), [0.0, 0.0, 0.0, 0.0]);
        }
    }
}
