//! Cubic Bezier text regions, the sampling grid used to align features onto
//! a fixed rectangle, polygonization and raster IoU.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

pub type Point = (f64, f64);
pub type Polygon = Vec<Point>;

pub const DEFAULT_RASTER_SCALE: usize = 8;
pub const DEFAULT_CURVE_SAMPLES: usize = 8;

/// Text area bounded by two cubic curves. `top` runs left to right along the
/// reading direction; `bottom` runs left to right directly beneath it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BezierRegion {
    pub top: [Point; 4],
    pub bottom: [Point; 4],
}

impl BezierRegion {
    /// From 16 scalars: top b0..b3 then bottom b0..b3, x before y.
    pub fn from_control_points(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::Input(format!("expected 16 control values, got {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("non-finite control point".into()));
        }
        let p = |i: usize| (v[2 * i], v[2 * i + 1]);
        Ok(BezierRegion {
            top: [p(0), p(1), p(2), p(3)],
            bottom: [p(4), p(5), p(6), p(7)],
        })
    }

    pub fn to_control_points(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for (i, &(x, y)) in self.top.iter().chain(&self.bottom).enumerate() {
            out[2 * i] = x;
            out[2 * i + 1] = y;
        }
        out
    }

    /// Region whose curves are the straight top and bottom edges of an
    /// axis-aligned rectangle, with control points at thirds.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        let line = |y: f64| {
            let dx = (x1 - x0) / 3.0;
            [(x0, y), (x0 + dx, y), (x0 + 2.0 * dx, y), (x1, y)]
        };
        BezierRegion {
            top: line(y0),
            bottom: line(y1),
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mv = |c: [Point; 4]| c.map(|(x, y)| (x + dx, y + dy));
        BezierRegion {
            top: mv(self.top),
            bottom: mv(self.bottom),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let sc = |c: [Point; 4]| c.map(|(x, y)| (x * s, y * s));
        BezierRegion {
            top: sc(self.top),
            bottom: sc(self.bottom),
        }
    }

    pub fn polygon(&self) -> Polygon {
        region_to_polygon(self, DEFAULT_CURVE_SAMPLES).expect("default sample count is valid")
    }
}

/// Point at parameter `t` on a cubic curve, in Bernstein form.
pub fn bezier_point(curve: &[Point; 4], t: f64) -> Result<Point> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("curve parameter {t} outside [0,1]")));
    }
    Ok(bernstein(curve, t))
}

fn bernstein(c: &[Point; 4], t: f64) -> Point {
    let u = 1.0 - t;
    let w = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
    let x = w[0] * c[0].0 + w[1] * c[1].0 + w[2] * c[2].0 + w[3] * c[3].0;
    let y = w[0] * c[0].1 + w[1] * c[1].1 + w[2] * c[2].1 + w[3] * c[3].1;
    (x, y)
}

/// `out_h x out_w` sample locations, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    pub out_h: usize,
    pub out_w: usize,
    pub points: Vec<Point>,
}

impl SampleGrid {
    pub fn at(&self, row: usize, col: usize) -> Point {
        self.points[row * self.out_w + col]
    }
}

/// Column `j` samples both curves at `t = j/(out_w-1)`; row `i` sits at
/// fraction `(i+0.5)/out_h` of the way from the top point to the bottom one.
pub fn region_grid(region: &BezierRegion, out_h: usize, out_w: usize) -> Result<SampleGrid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Input(format!("grid size {out_h}x{out_w}")));
    }
    let cols: Vec<(Point, Point)> = (0..out_w)
        .map(|j| {
            let t = if out_w == 1 { 0.0 } else { j as f64 / (out_w - 1) as f64 };
            (bernstein(&region.top, t), bernstein(&region.bottom, t))
        })
        .collect();
    let mut points = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let s = (i as f64 + 0.5) / out_h as f64;
        for &(top, bot) in &cols {
            points.push(((1.0 - s) * top.0 + s * bot.0, (1.0 - s) * top.1 + s * bot.1));
        }
    }
    Ok(SampleGrid { out_h, out_w, points })
}

/// Samples `feature_map` (`[c,h,w]`) over the region onto a `[c,out_h,out_w]`
/// rectangle. Image coordinates are multiplied by `spatial_scale` to reach
/// feature-map coordinates. Differentiable with respect to the map.
pub fn bezier_align(
    tape: &mut Tape,
    feature_map: Var,
    region: &BezierRegion,
    out_h: usize,
    out_w: usize,
    spatial_scale: f64,
) -> Result<Var> {
    if !(spatial_scale > 0.0) {
        return Err(Error::Input(format!("spatial_scale {spatial_scale} must be positive")));
    }
    let c = match tape.shape(feature_map) {
        [c, _, _] => *c,
        s => return Err(Error::Dimension(format!("bezier_align expects [c,h,w], got {s:?}"))),
    };
    let grid = region_grid(region, out_h, out_w)?;
    let flat: Vec<f64> = grid
        .points
        .iter()
        .flat_map(|&(x, y)| [x * spatial_scale, y * spatial_scale])
        .collect();
    let g = tape.constant(vec![out_h * out_w, 2], flat)?;
    let sampled = tape.bilinear_sample(feature_map, g)?;
    tape.reshape(sampled, vec![c, out_h, out_w])
}

/// Top curve left to right, then bottom curve right to left.
pub fn region_to_polygon(region: &BezierRegion, samples_per_curve: usize) -> Result<Polygon> {
    if samples_per_curve < 2 {
        return Err(Error::Input(format!(
            "samples_per_curve must be >= 2, got {samples_per_curve}"
        )));
    }
    let ts: Vec<f64> = (0..samples_per_curve)
        .map(|i| i as f64 / (samples_per_curve - 1) as f64)
        .collect();
    let mut poly: Polygon = ts.iter().map(|&t| bernstein(&region.top, t)).collect();
    poly.extend(ts.iter().rev().map(|&t| bernstein(&region.bottom, t)));
    Ok(poly)
}

/// Shoelace area (absolute value).
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        s += a.0 * b.1 - b.0 * a.1;
    }
    0.5 * s.abs()
}

/// Even-odd point containment.
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a.1 <= p.1) != (b.1 <= p.1) {
            let x = a.0 + (p.1 - a.1) * (b.0 - a.0) / (b.1 - a.1);
            if p.0 < x {
                inside = !inside;
            }
        }
    }
    inside
}

pub fn bounding_box(poly: &[Point]) -> (f64, f64, f64, f64) {
    poly.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
    )
}

/// Sample lattice covering a pixel-aligned window at `scale` samples per
/// pixel; sample `(i, j)` sits at `(x0 + (j+0.5)/scale, y0 + (i+0.5)/scale)`.
#[derive(Clone, Copy, Debug)]
pub struct RasterGrid {
    pub x0: f64,
    pub y0: f64,
    pub cols: usize,
    pub rows: usize,
    pub scale: usize,
}

impl RasterGrid {
    pub fn covering(x0: f64, y0: f64, x1: f64, y1: f64, scale: usize) -> Self {
        let (fx0, fy0) = (x0.floor(), y0.floor());
        let (cx1, cy1) = (x1.ceil(), y1.ceil());
        RasterGrid {
            x0: fx0,
            y0: fy0,
            cols: ((cx1 - fx0).max(0.0) as usize) * scale,
            rows: ((cy1 - fy0).max(0.0) as usize) * scale,
            scale,
        }
    }

    pub fn sample(&self, row: usize, col: usize) -> Point {
        let s = self.scale as f64;
        (self.x0 + (col as f64 + 0.5) / s, self.y0 + (row as f64 + 0.5) / s)
    }

    /// Even-odd fill of `poly`, by scanline crossings.
    pub fn fill(&self, poly: &[Point]) -> Vec<bool> {
        let mut mask = vec![false; self.rows * self.cols];
        let n = poly.len();
        if n < 3 {
            return mask;
        }
        let s = self.scale as f64;
        let mut xs = Vec::new();
        for r in 0..self.rows {
            let y = self.y0 + (r as f64 + 0.5) / s;
            xs.clear();
            for i in 0..n {
                let (a, b) = (poly[i], poly[(i + 1) % n]);
                if (a.1 <= y) != (b.1 <= y) {
                    xs.push(a.0 + (y - a.1) * (b.0 - a.0) / (b.1 - a.1));
                }
            }
            xs.sort_by(f64::total_cmp);
            let row = &mut mask[r * self.cols..(r + 1) * self.cols];
            // inside iff an odd number of crossings lie at or left of the
            // sample, the same parity rule as `point_in_polygon`
            let mut k = 0;
            for (c, cell) in row.iter_mut().enumerate() {
                let px = self.x0 + (c as f64 + 0.5) / s;
                while k < xs.len() && xs[k] <= px {
                    k += 1;
                }
                *cell = k % 2 == 1;
            }
        }
        mask
    }
}

/// Intersection over union of the even-odd rasterizations of `a` and `b`
/// on a shared grid over their joint bounding box.
pub fn polygon_iou(a: &[Point], b: &[Point], raster_scale: usize) -> Result<f64> {
    if raster_scale == 0 {
        return Err(Error::Input("raster_scale must be >= 1".into()));
    }
    if a.len() < 3 || b.len() < 3 {
        return Ok(0.0);
    }
    let (ax0, ay0, ax1, ay1) = bounding_box(a);
    let (bx0, by0, bx1, by1) = bounding_box(b);
    if ax1 <= bx0 || bx1 <= ax0 || ay1 <= by0 || by1 <= ay0 {
        return Ok(0.0);
    }
    let grid = RasterGrid::covering(ax0.min(bx0), ay0.min(by0), ax1.max(bx1), ay1.max(by1), raster_scale);
    let (ma, mb) = (grid.fill(a), grid.fill(b));
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in ma.iter().zip(&mb) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{self, random_tensor};
    use crate::autodiff::Tensor;
    use crate::rng;
    use rand::Rng as _;

    fn de_casteljau(c: &[Point; 4], t: f64) -> Point {
        let mut pts = c.to_vec();
        while pts.len() > 1 {
            pts = pts
                .windows(2)
                .map(|w| ((1.0 - t) * w[0].0 + t * w[1].0, (1.0 - t) * w[0].1 + t * w[1].1))
                .collect();
        }
        pts[0]
    }

    fn random_curve(r: &mut rng::Rng) -> [Point; 4] {
        [(); 4].map(|_| (r.gen_range(-100.0..100.0), r.gen_range(-100.0..100.0)))
    }

    fn curved_region() -> BezierRegion {
        BezierRegion {
            top: [(10.0, 20.0), (30.0, 8.0), (60.0, 8.0), (80.0, 22.0)],
            bottom: [(12.0, 36.0), (32.0, 24.0), (58.0, 24.0), (78.0, 38.0)],
        }
    }

    #[test]
    fn endpoints_interpolate() {
        let c = [(1.0, 2.0), (3.0, 5.0), (-1.0, 0.0), (7.0, 8.0)];
        assert_eq!(bezier_point(&c, 0.0).unwrap(), c[0]);
        assert_eq!(bezier_point(&c, 1.0).unwrap(), c[3]);
    }

    #[test]
    fn collinear_equidistant_is_linear() {
        let c = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)];
        assert_eq!(bezier_point(&c, 0.5).unwrap(), (1.5, 0.0));
    }

    #[test]
    fn parameter_out_of_range() {
        let c = [(0.0, 0.0); 4];
        assert!(matches!(bezier_point(&c, 1.01), Err(Error::Input(_))));
        assert!(matches!(bezier_point(&c, -0.1), Err(Error::Input(_))));
    }

    #[test]
    fn bernstein_matches_de_casteljau() {
        let mut r = rng::seeded(21);
        let c = random_curve(&mut r);
        let (p, q) = (bezier_point(&c, 0.37).unwrap(), de_casteljau(&c, 0.37));
        assert!((p.0 - q.0).abs() < 1e-12 && (p.1 - q.1).abs() < 1e-12);
    }

    #[test]
    fn rectangle_grid_is_regular_lattice() {
        let reg = BezierRegion::rectangle(10.0, 20.0, 40.0, 28.0);
        let g = region_grid(&reg, 2, 4).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let (x, y) = g.at(i, j);
                let ex = 10.0 + 30.0 * j as f64 / 3.0;
                let ey = 20.0 + 8.0 * (i as f64 + 0.5) / 2.0;
                assert!((x - ex).abs() < 1e-12 && (y - ey).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn single_column_uses_curve_start() {
        let reg = curved_region();
        let g = region_grid(&reg, 3, 1).unwrap();
        assert_eq!(g.points.len(), 3);
        let (top, bot) = (reg.top[0], reg.bottom[0]);
        let s = 0.5;
        let mid = g.at(1, 0);
        assert!((mid.0 - ((1.0 - s) * top.0 + s * bot.0)).abs() < 1e-12);
        assert!(region_grid(&reg, 0, 3).is_err());
    }

    #[test]
    fn curved_grid_points_lie_between_curves() {
        let reg = curved_region();
        let (oh, ow) = (5, 9);
        let g = region_grid(&reg, oh, ow).unwrap();
        for j in 0..ow {
            let t = j as f64 / (ow - 1) as f64;
            let (a, b) = (de_casteljau(&reg.top, t), de_casteljau(&reg.bottom, t));
            for i in 0..oh {
                let p = g.at(i, j);
                let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
                assert!((cross / len).abs() < 1e-12);
                let s = ((p.0 - a.0) * (b.0 - a.0) + (p.1 - a.1) * (b.1 - a.1)) / (len * len);
                assert!((0.0..=1.0).contains(&s));
            }
        }
    }

    #[test]
    fn align_constant_map_gives_constant() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::full(vec![3, 20, 30], 0.75));
        let reg = curved_region();
        let y = bezier_align(&mut tape, m, &reg, 4, 8, 0.25).unwrap();
        assert_eq!(tape.shape(y), [3, 4, 8]);
        assert!(tape.value(y).iter().all(|v| (v - 0.75).abs() < 1e-9));
    }

    #[test]
    fn align_rejects_bad_scale() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::zeros(vec![1, 4, 4]));
        let reg = BezierRegion::rectangle(0.0, 0.0, 2.0, 2.0);
        assert!(bezier_align(&mut tape, m, &reg, 2, 2, 0.0).is_err());
    }

    #[test]
    fn align_gradient_matches_finite_differences() {
        let mut r = rng::seeded(22);
        let map = random_tensor(&mut r, vec![2, 8, 12], -2.0, 2.0, 0.0);
        let reg = BezierRegion {
            top: [(3.3, 5.1), (12.7, 2.9), (25.1, 3.7), (37.3, 6.3)],
            bottom: [(4.1, 21.7), (13.3, 18.1), (26.9, 19.3), (38.7, 23.9)],
        };
        let e = gradcheck::check(&[map], |t, v| {
            let y = bezier_align(t, v[0], &reg, 3, 6, 0.25)?;
            let s = t.sum(y);
            Ok(s)
        })
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn straight_region_polygon_is_rectangle() {
        let reg = BezierRegion::rectangle(1.0, 2.0, 7.0, 5.0);
        let p = region_to_polygon(&reg, 2).unwrap();
        assert_eq!(p, vec![(1.0, 2.0), (7.0, 2.0), (7.0, 5.0), (1.0, 5.0)]);
        let p4 = region_to_polygon(&reg, 4).unwrap();
        assert_eq!(p4.len(), 8);
        assert!((polygon_area(&p4) - 18.0).abs() < 1e-9);
        assert!(region_to_polygon(&reg, 1).is_err());
    }

    #[test]
    fn polygon_vertices_are_curve_points() {
        let reg = curved_region();
        let n = 7;
        let p = region_to_polygon(&reg, n).unwrap();
        for i in 0..n {
            let t = i as f64 / (n - 1) as f64;
            assert_eq!(p[i], bezier_point(&reg.top, t).unwrap());
            assert_eq!(p[2 * n - 1 - i], bezier_point(&reg.bottom, t).unwrap());
        }
    }

    fn square(x: f64, y: f64, s: f64) -> Polygon {
        vec![(x, y), (x + s, y), (x + s, y + s), (x, y + s)]
    }

    #[test]
    fn iou_examples() {
        let a = square(0.0, 0.0, 1.0);
        assert_eq!(polygon_iou(&a, &a, 8).unwrap(), 1.0);
        assert_eq!(polygon_iou(&a, &square(3.0, 3.0, 1.0), 8).unwrap(), 0.0);
        let half = polygon_iou(&a, &square(0.5, 0.0, 1.0), 8).unwrap();
        assert!((half - 1.0 / 3.0).abs() < 0.02, "{half}");
        let degenerate = vec![(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)];
        assert_eq!(polygon_iou(&a, &degenerate, 8).unwrap(), 0.0);
        assert_eq!(polygon_iou(&degenerate, &degenerate, 8).unwrap(), 0.0);
        assert!(polygon_iou(&a, &a, 0).is_err());
    }

    #[test]
    fn raster_fill_agrees_with_point_test() {
        let poly = curved_region().polygon();
        let (x0, y0, x1, y1) = bounding_box(&poly);
        let g = RasterGrid::covering(x0, y0, x1, y1, 3);
        let m = g.fill(&poly);
        for r in 0..g.rows {
            for c in 0..g.cols {
                assert_eq!(m[r * g.cols + c], point_in_polygon(g.sample(r, c), &poly), "({r},{c})");
            }
        }
    }

    #[test]
    fn raster_area_tracks_shoelace() {
        let poly = curved_region().polygon();
        let (x0, y0, x1, y1) = bounding_box(&poly);
        let g = RasterGrid::covering(x0, y0, x1, y1, 8);
        let count = g.fill(&poly).iter().filter(|&&b| b).count() as f64;
        let area = count / 64.0;
        assert!((area - polygon_area(&poly)).abs() / polygon_area(&poly) < 0.01);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn poly_strategy() -> impl Strategy<Value = BezierRegion> {
            (0.0..50.0f64, 0.0..50.0f64, 5.0..40.0f64, 4.0..20.0f64, -6.0..6.0f64).prop_map(|(x, y, w, h, bend)| {
                BezierRegion {
                    top: [
                        (x, y),
                        (x + w / 3.0, y + bend),
                        (x + 2.0 * w / 3.0, y + bend),
                        (x + w, y),
                    ],
                    bottom: [
                        (x, y + h),
                        (x + w / 3.0, y + h + bend),
                        (x + 2.0 * w / 3.0, y + h + bend),
                        (x + w, y + h),
                    ],
                }
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn iou_is_symmetric_and_reflexive(a in poly_strategy(), b in poly_strategy()) {
                let (pa, pb) = (a.polygon(), b.polygon());
                prop_assert_eq!(polygon_iou(&pa, &pb, 4).unwrap(), polygon_iou(&pb, &pa, 4).unwrap());
                prop_assert_eq!(polygon_iou(&pa, &pa, 4).unwrap(), 1.0);
                let v = polygon_iou(&pa, &pb, 4).unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
            }

            #[test]
            fn bernstein_equals_de_casteljau(seed in any::<u64>(), t in 0.0..=1.0f64) {
                let mut r = rng::seeded(seed);
                let c = random_curve(&mut r);
                let (p, q) = (bezier_point(&c, t).unwrap(), de_casteljau(&c, t));
                prop_assert!((p.0 - q.0).abs() < 1e-12 && (p.1 - q.1).abs() < 1e-12);
            }

            #[test]
            fn align_is_translation_equivariant(shift_x in 0usize..4, shift_y in 0usize..3, seed in 0u64..1000) {
                let mut r = rng::seeded(seed);
                let (c, h, w) = (2, 10, 14);
                let map = random_tensor(&mut r, vec![c, h, w], -2.0, 2.0, 0.0);
                let (h2, w2) = (h + shift_y, w + shift_x);
                let mut shifted = vec![0.0; c * h2 * w2];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            shifted[(ch * h2 + y + shift_y) * w2 + x + shift_x] = map.data()[(ch * h + y) * w + x];
                        }
                    }
                }
                let scale = 0.5;
                let reg = BezierRegion {
                    top: [(2.5, 3.0), (8.0, 1.5), (16.0, 2.0), (22.5, 4.0)],
                    bottom: [(3.0, 14.0), (9.0, 12.0), (15.0, 13.0), (21.0, 15.5)],
                };
                let mut tape = Tape::new();
                let m0 = tape.leaf(map);
                let m1 = tape.leaf(Tensor::new(vec![c, h2, w2], shifted).unwrap());
                // dyadic control points and a 2x5 grid keep every weight and
                // coordinate exactly representable, so equality is bitwise
                let y0 = bezier_align(&mut tape, m0, &reg, 2, 5, scale).unwrap();
                let moved = reg.translated(shift_x as f64 / scale, shift_y as f64 / scale);
                let y1 = bezier_align(&mut tape, m1, &moved, 2, 5, scale).unwrap();
                prop_assert_eq!(tape.value(y0), tape.value(y1));
            }
        }
    }
}
