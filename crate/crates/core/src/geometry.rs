//! Box representations, (generalized) IoU, and bilinear sampling.
//!
//! Grid convention used everywhere in the crate: cell `i` of an axis with `n`
//! cells has its center at normalized coordinate `(i + 0.5) / n`.

use serde::{Deserialize, Serialize};

/// Normalized box in center form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Box in corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    CenterToCorner,
    CornerToCenter,
}

impl Box {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_corners(self) -> Corners {
        Corners {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl Corners {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_center(self) -> Box {
        Box {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// Converts a raw 4-vector between center and corner form.
pub fn box_convert(v: [f64; 4], direction: Direction) -> [f64; 4] {
    match direction {
        Direction::CenterToCorner => {
            let c = Box::from_array(v).to_corners();
            [c.x1, c.y1, c.x2, c.y2]
        }
        Direction::CornerToCenter => Corners::new(v[0], v[1], v[2], v[3]).to_center().to_array(),
    }
}

/// Plain IoU; zero when the union is empty.
pub fn iou(a: &Corners, b: &Corners) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn intersection(a: &Corners, b: &Corners) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

/// Generalized IoU: `IoU - |C \ (A ∪ B)| / |C|` with `C` the smallest enclosing box.
///
/// Zero-area inputs never fail: the IoU term is 0 when the union is empty and the
/// enclosure term is dropped when the enclosure itself has zero area.
pub fn generalized_iou(a: &Corners, b: &Corners) -> f64 {
    giou_with_grad(a, b).0
}

/// GIoU together with its gradient w.r.t. the corners of `a` (x1, y1, x2, y2).
pub fn giou_with_grad(a: &Corners, b: &Corners) -> (f64, [f64; 4]) {
    let (aw, ah) = (a.x2 - a.x1, a.y2 - a.y1);
    let area_a = aw * ah;
    let area_b = b.area();
    let d_area_a = [-ah, -aw, ah, aw];

    let ix1 = a.x1.max(b.x1);
    let ix2 = a.x2.min(b.x2);
    let iy1 = a.y1.max(b.y1);
    let iy2 = a.y2.min(b.y2);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let (inter, d_inter) = if iw > 0.0 && ih > 0.0 {
        let dx1 = if a.x1 >= b.x1 { -ih } else { 0.0 };
        let dx2 = if a.x2 <= b.x2 { ih } else { 0.0 };
        let dy1 = if a.y1 >= b.y1 { -iw } else { 0.0 };
        let dy2 = if a.y2 <= b.y2 { iw } else { 0.0 };
        (iw * ih, [dx1, dy1, dx2, dy2])
    } else {
        (0.0, [0.0; 4])
    };

    let union = area_a + area_b - inter;
    let d_union: [f64; 4] = std::array::from_fn(|i| d_area_a[i] - d_inter[i]);

    let mut grad = [0.0; 4];
    let iou = if union > 0.0 {
        for i in 0..4 {
            grad[i] += (d_inter[i] * union - inter * d_union[i]) / (union * union);
        }
        inter / union
    } else {
        0.0
    };

    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclosure = cw * ch;
    let giou = if enclosure > 0.0 {
        let d_c = [
            if a.x1 <= b.x1 { -ch } else { 0.0 },
            if a.y1 <= b.y1 { -cw } else { 0.0 },
            if a.x2 >= b.x2 { ch } else { 0.0 },
            if a.y2 >= b.y2 { cw } else { 0.0 },
        ];
        // giou = iou - (C - U) / C = iou - 1 + U / C
        for i in 0..4 {
            grad[i] += (d_union[i] * enclosure - union * d_c[i]) / (enclosure * enclosure);
        }
        iou - (enclosure - union) / enclosure
    } else {
        iou
    };
    (giou, grad)
}

/// Sum of absolute differences of the four center-form coordinates.
pub fn box_l1(a: &Box, b: &Box) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// A `C × H × W` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Normalized coordinate of the center of cell `i` out of `n`.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

/// The four bilinear taps for a normalized point on a `height × width` grid:
/// `(row, col, weight)`, with out-of-range taps omitted (zero padding).
pub fn bilinear_taps(x: f64, y: f64, height: usize, width: usize) -> Vec<(usize, usize, f64)> {
    let px = x * width as f64 - 0.5;
    let py = y * height as f64 - 0.5;
    if !px.is_finite() || !py.is_finite() {
        return Vec::new();
    }
    let x0 = px.floor();
    let y0 = py.floor();
    let lx = px - x0;
    let ly = py - y0;
    let mut taps = Vec::with_capacity(4);
    for (dy, wy) in [(0.0, 1.0 - ly), (1.0, ly)] {
        for (dx, wx) in [(0.0, 1.0 - lx), (1.0, lx)] {
            let (cx, cy) = (x0 + dx, y0 + dy);
            if cx >= 0.0 && cy >= 0.0 && cx < width as f64 && cy < height as f64 && wx * wy != 0.0 {
                taps.push((cy as usize, cx as usize, wx * wy));
            }
        }
    }
    taps
}

/// Bilinear interpolation at a normalized `(x, y)`; neighbors outside the map read as zero.
pub fn bilinear_sample(map: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
    let mut out = vec![0.0; map.channels];
    for (r, c, w) in bilinear_taps(x, y, map.height, map.width) {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += w * map.at(ch, r, c);
        }
    }
    out
}

/// Source taps `(i0, i1, frac)` for resizing an axis of `n_in` cells to `n_out`
/// with half-pixel alignment (edge-clamped).
pub fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn convert_examples() {
        assert_eq!(
            box_convert([0.5, 0.5, 1.0, 1.0], Direction::CenterToCorner),
            [0.0, 0.0, 1.0, 1.0]
        );
        assert_eq!(
            box_convert([0.0, 0.0, 1.0, 1.0], Direction::CornerToCenter),
            [0.5, 0.5, 1.0, 1.0]
        );
        assert_eq!(
            box_convert([0.25, 0.25, 0.5, 0.5], Direction::CenterToCorner),
            [0.0, 0.0, 0.5, 0.5]
        );
    }

    #[test]
    fn giou_examples() {
        let a = Corners::new(0.2, 0.1, 0.7, 0.9);
        assert!((generalized_iou(&a, &a) - 1.0).abs() < 1e-15);
        let far = generalized_iou(&Corners::new(0., 0., 1., 1.), &Corners::new(2., 2., 3., 3.));
        assert!((far + 7.0 / 9.0).abs() < 1e-15);
        let nested = generalized_iou(&Corners::new(0., 0., 2., 2.), &Corners::new(0., 0., 1., 1.));
        assert!((nested - 0.25).abs() < 1e-15);
    }

    #[test]
    fn giou_degenerate_boxes_do_not_fail() {
        let point = Corners::new(0.5, 0.5, 0.5, 0.5);
        assert_eq!(generalized_iou(&point, &point), 0.0);
        // zero-area box inside a unit box: IoU 0, enclosure is the unit box, union 1
        let g = generalized_iou(&point, &Corners::new(0., 0., 1., 1.));
        assert_eq!(g, 0.0);
        let g = generalized_iou(&Corners::new(0., 0., 0., 1.), &Corners::new(1., 0., 1., 1.));
        assert!((g + 1.0).abs() < 1e-15);
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let a = Corners::new(0.1, 0.2, 0.6, 0.7);
        for b in [
            Corners::new(0.3, 0.1, 0.8, 0.5),
            Corners::new(0.7, 0.8, 0.9, 0.95),
            Corners::new(0.0, 0.0, 1.0, 1.0),
        ] {
            let (_, g) = giou_with_grad(&a, &b);
            let h = 1e-6;
            for i in 0..4 {
                let mut p = [a.x1, a.y1, a.x2, a.y2];
                let mut m = p;
                p[i] += h;
                m[i] -= h;
                let fd = (generalized_iou(&Corners::new(p[0], p[1], p[2], p[3]), &b)
                    - generalized_iou(&Corners::new(m[0], m[1], m[2], m[3]), &b))
                    / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-7, "coord {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn l1_examples() {
        let a = Box::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(box_l1(&a, &a), 0.0);
        assert!((box_l1(&a, &Box::new(0.6, 0.5, 0.2, 0.2)) - 0.1).abs() < 1e-15);
        assert_eq!(box_l1(&Box::new(0., 0., 0., 0.), &Box::new(1., 1., 1., 1.)), 4.0);
    }

    #[test]
    fn bilinear_examples() {
        let map = FeatureMap::new(1, 2, 2, vec![0., 1., 2., 3.]);
        // center of cell (row 1, col 0)
        assert_eq!(bilinear_sample(&map, 0.25, 0.75), vec![2.0]);
        // midpoint of the four cells
        assert_eq!(bilinear_sample(&map, 0.5, 0.5), vec![1.5]);
        assert_eq!(bilinear_sample(&map, 5.0, -3.0), vec![0.0]);
    }

    #[test]
    fn resize_taps_identity() {
        for (i, &(i0, i1, f)) in resize_taps(5, 5).iter().enumerate() {
            assert_eq!(i0, i);
            assert!(f == 0.0 || i1 == i0 + 1 && f.abs() < 1e-12);
        }
    }

    fn arb_corners() -> impl Strategy<Value = Corners> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..0.5f64, 0.0..0.5f64).prop_map(|(x, y, w, h)| Corners::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn giou_symmetric_and_bounded(a in arb_corners(), b in arb_corners()) {
            let ab = generalized_iou(&a, &b);
            let ba = generalized_iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
            prop_assert!(ab <= iou(&a, &b) + 1e-12);
        }

        #[test]
        fn self_giou_is_one(a in arb_corners()) {
            prop_assume!(a.area() > 1e-9);
            prop_assert!((generalized_iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn convert_round_trip(cx in -1.0..2.0f64, cy in -1.0..2.0f64, w in 0.0..1.0f64, h in 0.0..1.0f64) {
            let v = [cx, cy, w, h];
            let back = box_convert(box_convert(v, Direction::CenterToCorner), Direction::CornerToCenter);
            for i in 0..4 {
                prop_assert!((back[i] - v[i]).abs() < 1e-7);
            }
        }

        #[test]
        fn bilinear_of_constant_map_is_constant(x in 0.0..1.0f64, y in 0.0..1.0f64, c in -5.0..5.0f64) {
            // inside the outermost cell centers every tap is in range
            let (h, w) = (4, 6);
            let map = FeatureMap::new(2, h, w, vec![c; 2 * h * w]);
            let xs = pixel_center(0, w) + x * (1.0 - 2.0 * pixel_center(0, w));
            let ys = pixel_center(0, h) + y * (1.0 - 2.0 * pixel_center(0, h));
            for v in bilinear_sample(&map, xs, ys) {
                prop_assert!((v - c).abs() < 1e-12);
            }
        }

        #[test]
        fn bilinear_is_linear_in_values(
            a in proptest::collection::vec(-1.0..1.0f64, 12),
            b in proptest::collection::vec(-1.0..1.0f64, 12),
            x in -0.2..1.2f64, y in -0.2..1.2f64, s in -2.0..2.0f64,
        ) {
            let ma = FeatureMap::new(1, 3, 4, a.clone());
            let mb = FeatureMap::new(1, 3, 4, b.clone());
            let mix = FeatureMap::new(1, 3, 4, a.iter().zip(&b).map(|(p, q)| s * p + q).collect());
            let lhs = bilinear_sample(&mix, x, y)[0];
            let rhs = s * bilinear_sample(&ma, x, y)[0] + bilinear_sample(&mb, x, y)[0];
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
