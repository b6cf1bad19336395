//! Boxes and overlap measures.
//!
//! All boxes are normalized center-format `(cx, cy, w, h)` relative to image
//! size. Overlaps are evaluated in `f64`.

use crate::error::{Error, Result};

/// Normalized center-format box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner-format box `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Validated constructor: `0 <= cx, cy <= 1` and `0 < w, h <= 1`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let ok_center = (0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy);
        let ok_size = w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0;
        if !(ok_center && ok_size) {
            return Err(Error::InvalidBox(format!("cx={cx} cy={cy} w={w} h={h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Unvalidated box, e.g. raw network output or a shifted copy.
    pub const fn raw(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::raw(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_corners(self) -> CornerBox {
        CornerBox {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    pub fn from_corners(c: CornerBox) -> Self {
        Self::raw((c.x1 + c.x2) / 2.0, (c.y1 + c.y2) / 2.0, c.x2 - c.x1, c.y2 - c.y1)
    }

    pub fn area(self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Clip the corners to the unit square. Used on predictions at inference only.
    pub fn clamped(self) -> Self {
        let c = self.to_corners();
        if c.x1 >= 0.0 && c.y1 >= 0.0 && c.x2 <= 1.0 && c.y2 <= 1.0 {
            return self;
        }
        Self::from_corners(CornerBox {
            x1: c.x1.clamp(0.0, 1.0),
            y1: c.y1.clamp(0.0, 1.0),
            x2: c.x2.clamp(0.0, 1.0),
            y2: c.y2.clamp(0.0, 1.0),
        })
    }

    /// Smallest box containing both.
    pub fn hull(self, other: BBox) -> BBox {
        let (a, b) = (self.to_corners(), other.to_corners());
        Self::from_corners(CornerBox {
            x1: a.x1.min(b.x1),
            y1: a.y1.min(b.y1),
            x2: a.x2.max(b.x2),
            y2: a.y2.max(b.y2),
        })
    }

    /// True when `other` lies inside `self` (with a small tolerance).
    pub fn contains(self, other: BBox) -> bool {
        let (a, b) = (self.to_corners(), other.to_corners());
        let eps = 1e-9;
        b.x1 >= a.x1 - eps && b.y1 >= a.y1 - eps && b.x2 <= a.x2 + eps && b.y2 <= a.y2 + eps
    }

    pub fn translated(self, dx: f64, dy: f64) -> Self {
        Self::raw(self.cx + dx, self.cy + dy, self.w, self.h)
    }
}

impl CornerBox {
    pub fn area(self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

struct Overlap {
    inter: f64,
    union: f64,
    enclosing: f64,
}

fn overlap(a: BBox, b: BBox) -> Overlap {
    let (a, b) = (a.to_corners(), b.to_corners());
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosing = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    Overlap { inter, union, enclosing }
}

/// Intersection over union; 0 for degenerate inputs.
pub fn iou(a: BBox, b: BBox) -> f64 {
    let o = overlap(a, b);
    if o.union <= 0.0 {
        0.0
    } else {
        o.inter / o.union
    }
}

/// Generalized IoU: `iou - (C - U) / C` with `C` the enclosing box area.
pub fn giou(a: BBox, b: BBox) -> f64 {
    let o = overlap(a, b);
    if o.union <= 0.0 || o.enclosing <= 0.0 {
        return 0.0;
    }
    o.inter / o.union - (o.enclosing - o.union) / o.enclosing
}

/// GIoU and its gradient with respect to `a`'s `(cx, cy, w, h)`.
///
/// At ties between coordinates of `a` and `b` the subgradient that credits `a` is used.
pub fn giou_with_grad(a: BBox, b: BBox) -> (f64, [f64; 4]) {
    let (ac, bc) = (a.to_corners(), b.to_corners());
    let o = overlap(a, b);
    if o.union <= 0.0 || o.enclosing <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let (inter, union, encl) = (o.inter, o.union, o.enclosing);

    let iw_raw = ac.x2.min(bc.x2) - ac.x1.max(bc.x1);
    let ih_raw = ac.y2.min(bc.y2) - ac.y1.max(bc.y1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let has_inter = iw_raw > 0.0 && ih_raw > 0.0;
    let (aw, ah) = (ac.x2 - ac.x1, ac.y2 - ac.y1);
    let cw = ac.x2.max(bc.x2) - ac.x1.min(bc.x1);
    let ch = ac.y2.max(bc.y2) - ac.y1.min(bc.y1);

    // d/d(x1, y1, x2, y2) of a.
    let ind = |c: bool| if c { 1.0 } else { 0.0 };
    let d_inter = if has_inter {
        [
            -ih * ind(ac.x1 >= bc.x1),
            -iw * ind(ac.y1 >= bc.y1),
            ih * ind(ac.x2 <= bc.x2),
            iw * ind(ac.y2 <= bc.y2),
        ]
    } else {
        [0.0; 4]
    };
    let d_area = [-ah, -aw, ah, aw];
    let d_encl = [-ch * ind(ac.x1 <= bc.x1), -cw * ind(ac.y1 <= bc.y1), ch * ind(ac.x2 >= bc.x2), cw * ind(ac.y2 >= bc.y2)];

    let mut d_corner = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        d_corner[i] = d_inter[i] / union - inter * d_union / (union * union) + d_union / encl - union * d_encl[i] / (encl * encl);
    }
    let value = inter / union - 1.0 + union / encl;
    let grad = [
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        (d_corner[2] - d_corner[0]) / 2.0,
        (d_corner[3] - d_corner[1]) / 2.0,
    ];
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::from_corners(CornerBox { x1, y1, x2, y2 })
    }

    #[test]
    fn to_corners_examples() {
        let c = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap().to_corners();
        assert_eq!(c, CornerBox { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 });
        let c = BBox::new(0.25, 0.25, 0.5, 0.5).unwrap().to_corners();
        assert_eq!(c, CornerBox { x1: 0.0, y1: 0.0, x2: 0.5, y2: 0.5 });
    }

    #[test]
    fn rejects_degenerate_and_out_of_range() {
        assert!(BBox::new(0.5, 0.5, 0.0, 0.3).is_err());
        assert!(BBox::new(0.5, 0.5, 0.2, 0.0).is_err());
        assert!(BBox::new(1.2, 0.5, 0.2, 0.2).is_err());
        assert!(BBox::new(0.5, 0.5, 1.2, 0.2).is_err());
        assert!(BBox::new(0.5, 0.5, 0.2, 0.2).is_ok());
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.3, 0.4, 0.2, 0.3).unwrap();
        assert_eq!(iou(a, a), 1.0);
        let b = BBox::new(0.8, 0.8, 0.1, 0.1).unwrap();
        assert_eq!(iou(a, b), 0.0);
        // areas 1 and 1, intersection 0.5, union 1.5
        let a = corners(0.0, 0.0, 1.0, 1.0);
        let b = corners(0.5, 0.0, 1.5, 1.0);
        assert!((iou(a, b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn giou_examples() {
        let a = BBox::new(0.3, 0.4, 0.2, 0.3).unwrap();
        assert!((giou(a, a) - 1.0).abs() < 1e-12);
        // touching squares: C = U = 2, IoU 0
        let a = corners(0.0, 0.0, 1.0, 1.0);
        let b = corners(1.0, 0.0, 2.0, 1.0);
        assert!(giou(a, b).abs() < 1e-12);
        // far apart: direct formula
        let a = corners(0.0, 0.0, 0.01, 0.01);
        let b = corners(0.99, 0.99, 1.0, 1.0);
        let u = 2.0 * 0.0001;
        let c = 1.0;
        let expected = 0.0 - (c - u) / c;
        assert!((giou(a, b) - expected).abs() < 1e-12);
        assert!(giou(a, b) < -0.99);
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let cases = [
            (BBox::raw(0.4, 0.5, 0.3, 0.2), BBox::raw(0.45, 0.52, 0.25, 0.3)),
            (BBox::raw(0.2, 0.2, 0.1, 0.1), BBox::raw(0.7, 0.6, 0.2, 0.3)),
            (BBox::raw(0.5, 0.5, 0.4, 0.4), BBox::raw(0.52, 0.49, 0.1, 0.12)),
        ];
        let h = 1e-7;
        for (a, b) in cases {
            let (_, grad) = giou_with_grad(a, b);
            for i in 0..4 {
                let mut p = a.to_array();
                let mut m = a.to_array();
                p[i] += h;
                m[i] -= h;
                let fd = (giou(BBox::from_array(p), b) - giou(BBox::from_array(m), b)) / (2.0 * h);
                assert!((fd - grad[i]).abs() < 1e-6, "coord {i}: {fd} vs {}", grad[i]);
            }
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.6, 0.01f64..0.6).prop_map(|(cx, cy, w, h)| BBox::raw(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn corner_round_trip(b in arb_box()) {
            let r = BBox::from_corners(b.to_corners());
            prop_assert!((r.cx - b.cx).abs() < 1e-12 && (r.cy - b.cy).abs() < 1e-12);
            prop_assert!((r.w - b.w).abs() < 1e-12 && (r.h - b.h).abs() < 1e-12);
        }

        #[test]
        fn symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            prop_assert!((iou(a, b) - iou(b, a)).abs() < 1e-12);
            prop_assert!((giou(a, b) - giou(b, a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&iou(a, b)));
            prop_assert!(giou(a, b) <= iou(a, b) + 1e-12);
            prop_assert!(giou(a, b) >= -1.0 - 1e-12);
        }

        #[test]
        fn giou_equals_iou_iff_enclosing_is_union(a in arb_box(), b in arb_box()) {
            let o = overlap(a, b);
            let gap = (o.enclosing - o.union).abs();
            if gap < 1e-12 {
                prop_assert!((giou(a, b) - iou(a, b)).abs() < 1e-9);
            } else {
                prop_assert!(giou(a, b) < iou(a, b));
            }
        }

        #[test]
        fn translation_invariant(a in arb_box(), b in arb_box(), dx in -0.5f64..0.5, dy in -0.5f64..0.5) {
            let (ta, tb) = (a.translated(dx, dy), b.translated(dx, dy));
            prop_assert!((iou(a, b) - iou(ta, tb)).abs() < 1e-9);
            prop_assert!((giou(a, b) - giou(ta, tb)).abs() < 1e-9);
        }
    }
}
