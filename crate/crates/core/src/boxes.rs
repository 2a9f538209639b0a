//! Normalized `(cx, cy, w, h)` boxes, IoU and generalized IoU with its
//! gradient with respect to the predicted box.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    pub fn l1(self, other: BBox) -> f64 {
        self.to_array().iter().zip(other.to_array()).map(|(a, b)| (a - b).abs()).sum()
    }
}

fn overlap(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    (a2.min(b2) - a1.max(b1)).max(0.0)
}

pub fn iou(a: BBox, b: BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let inter = overlap(ax1, ax2, bx1, bx2) * overlap(ay1, ay2, by1, by2);
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − (C − U)/C` with `C` the smallest enclosing box.
/// Lies in (−1, 1], equals 1 exactly for identical boxes.
pub fn giou(a: BBox, b: BBox) -> f64 {
    giou_with_grad(a, b).0
}

/// GIoU together with its gradient w.r.t. the first box's `(cx, cy, w, h)`.
///
/// At the min/max kinks the one-sided derivative taken when the predicted
/// edge is the active one is used.
pub fn giou_with_grad(pred: BBox, target: BBox) -> (f64, [f64; 4]) {
    let [px1, py1, px2, py2] = pred.corners();
    let [tx1, ty1, tx2, ty2] = target.corners();
    // Areas from corners so that identical boxes give exactly 1.
    let (pw, ph) = (px2 - px1, py2 - py1);
    let pred_area = pw * ph;
    let target_area = (tx2 - tx1) * (ty2 - ty1);

    let iw = overlap(px1, px2, tx1, tx2);
    let ih = overlap(py1, py2, ty1, ty2);
    let inter = iw * ih;
    let union = pred_area + target_area - inter;
    let cw = px2.max(tx2) - px1.min(tx1);
    let ch = py2.max(ty2) - py1.min(ty1);
    let enclose = cw * ch;
    let value = (inter / union - (enclose - union) / enclose).min(1.0);

    let g_inter = 1.0 / union + inter / (union * union) - 1.0 / enclose;
    let g_area = -inter / (union * union) + 1.0 / enclose;
    let g_enclose = -union / (enclose * enclose);

    // d(overlap)/d(corner), d(hull)/d(corner) along one axis.
    let axis = |p1: f64, p2: f64, t1: f64, t2: f64, width: f64| {
        let (mut d_ov1, mut d_ov2) = (0.0, 0.0);
        if width > 0.0 {
            if p2 <= t2 {
                d_ov2 = 1.0;
            }
            if p1 >= t1 {
                d_ov1 = -1.0;
            }
        }
        let d_enc2 = if p2 >= t2 { 1.0 } else { 0.0 };
        let d_enc1 = if p1 <= t1 { -1.0 } else { 0.0 };
        (d_ov1, d_ov2, d_enc1, d_enc2)
    };
    let (ix1, ix2, ex1, ex2) = axis(px1, px2, tx1, tx2, iw);
    let (iy1, iy2, ey1, ey2) = axis(py1, py2, ty1, ty2, ih);

    let gx1 = g_inter * ih * ix1 + g_enclose * ch * ex1 - g_area * ph;
    let gx2 = g_inter * ih * ix2 + g_enclose * ch * ex2 + g_area * ph;
    let gy1 = g_inter * iw * iy1 + g_enclose * cw * ey1 - g_area * pw;
    let gy2 = g_inter * iw * iy2 + g_enclose * cw * ey2 + g_area * pw;

    let grad = [gx1 + gx2, gy1 + gy2, (gx2 - gx1) / 2.0, (gy2 - gy1) / 2.0];
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_grad, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn giou_identity_is_one() {
        let b = BBox::new(0.3, 0.6, 0.2, 0.1);
        assert_eq!(giou(b, b), 1.0);
        assert_eq!(iou(b, b), 1.0);
    }

    #[test]
    fn disjoint_boxes_have_negative_giou() {
        let a = BBox::new(0.1, 0.1, 0.1, 0.1);
        let b = BBox::new(0.9, 0.9, 0.1, 0.1);
        let g = giou(a, b);
        assert!(g < 0.0 && g > -1.0);
        assert!(1.0 - g > 1.0);
        assert_eq!(iou(a, b), 0.0);
    }

    #[test]
    fn giou_hand_computed() {
        // [0,0,2,2] vs [1,1,3,3]: I=1, U=7, C=9 → 1/7 − 2/9.
        let a = BBox::new(1.0, 1.0, 2.0, 2.0);
        let b = BBox::new(2.0, 2.0, 2.0, 2.0);
        assert!((giou(a, b) - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-15);
        assert!((iou(a, b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mut rb = || {
                BBox::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.05..0.4),
                    rng.random_range(0.05..0.4),
                )
            };
            let (p, t) = (rb(), rb());
            let (_, g) = giou_with_grad(p, t);
            let fd =
                finite_diff_grad(|x| giou(BBox::from_array([x[0], x[1], x[2], x[3]]), t), &p.to_array(), 1e-5)
                    .unwrap();
            assert!(max_relative_error(&g, &fd) < 1e-4, "{g:?} vs {fd:?}");
        }
    }
}
