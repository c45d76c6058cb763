//! Axis-aligned boxes in normalized `(cx, cy, w, h)` form, IoU and GIoU.

use serde::{Deserialize, Serialize};

/// Smallest area used as a denominator, so degenerate boxes stay finite.
pub const AREA_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCxcywh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Corners `(x1, y1, x2, y2)`.
    pub fn corners(self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn contains_point(self, x: f64, y: f64) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x >= x1 && x <= x2 && y >= y1 && y <= y2
    }

    pub fn l1(self, other: Self) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

pub fn iou(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    let inter = intersection(a, b);
    inter / (a.area() + b.area() - inter).max(AREA_FLOOR)
}

fn intersection(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

/// Generalized IoU: IoU minus the share of the enclosing hull not covered by
/// the union. Lies in `[-1, 1]`.
pub fn giou(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    giou_with_grad(a, b).0
}

/// GIoU of `pred` against `target` and its gradient with respect to the
/// `(cx, cy, w, h)` of `pred`.
///
/// At ties between corners (a min/max kink) the derivative of the `pred`
/// branch is taken.
pub fn giou_with_grad(pred: BoxCxcywh, target: BoxCxcywh) -> (f64, [f64; 4]) {
    let [x1, y1, x2, y2] = pred.corners();
    let [tx1, ty1, tx2, ty2] = target.corners();

    let iw_raw = x2.min(tx2) - x1.max(tx1);
    let ih_raw = y2.min(ty2) - y1.max(ty1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;

    let area_p = pred.w * pred.h;
    let area_t = target.w * target.h;
    let union_raw = area_p + area_t - inter;
    let union = union_raw.max(AREA_FLOOR);

    let cw = x2.max(tx2) - x1.min(tx1);
    let ch = y2.max(ty2) - y1.min(ty1);
    let hull_raw = cw * ch;
    let hull = hull_raw.max(AREA_FLOOR);

    let value = inter / union - (hull - union) / hull;

    // Partial derivatives with respect to intersection, pred area and hull.
    let union_live = union_raw > AREA_FLOOR;
    let hull_live = hull_raw > AREA_FLOOR;
    let (d_inter, d_area) = if union_live {
        (
            1.0 / union + inter / (union * union) - 1.0 / hull,
            -inter / (union * union) + 1.0 / hull,
        )
    } else {
        (1.0 / union, 0.0)
    };
    let d_hull = if hull_live { -union / (hull * hull) } else { 0.0 };

    // Corner gradients: index 0..4 = x1, y1, x2, y2.
    let mut dc = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        let d_iw = d_inter * ih;
        let d_ih = d_inter * iw;
        if x2 <= tx2 {
            dc[2] += d_iw;
        }
        if x1 >= tx1 {
            dc[0] -= d_iw;
        }
        if y2 <= ty2 {
            dc[3] += d_ih;
        }
        if y1 >= ty1 {
            dc[1] -= d_ih;
        }
    }
    let d_cw = d_hull * ch;
    let d_ch = d_hull * cw;
    if x2 >= tx2 {
        dc[2] += d_cw;
    }
    if x1 <= tx1 {
        dc[0] -= d_cw;
    }
    if y2 >= ty2 {
        dc[3] += d_ch;
    }
    if y1 <= ty1 {
        dc[1] -= d_ch;
    }

    let grad = [
        dc[0] + dc[2],
        dc[1] + dc[3],
        0.5 * (dc[2] - dc[0]) + d_area * pred.h,
        0.5 * (dc[3] - dc[1]) + d_area * pred.w,
    ];
    (value, grad)
}
