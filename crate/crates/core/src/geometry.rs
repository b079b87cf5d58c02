//! Oriented box geometry.
//!
//! An oriented bounding box is stored as a [`Quad`] whose vertices are in a
//! canonical order: `v1` touches the left edge of the surrounding horizontal box,
//! `v2` the top edge, `v3` the right edge and `v4` the bottom edge. That order is
//! clockwise on screen (image coordinates, y pointing down).
//!
//! [`encode`] turns a quad into its surrounding [`Hbb`] plus the two orientation
//! offsets `(w, h)`; [`decode`] inverts it for rectangles. Exact convex polygon
//! IoU is provided for NMS and evaluation, together with a raster estimate that
//! tests use as an independent oracle.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Quads with an area below this many square pixels are rejected.
pub const DEGENERATE_AREA: f64 = 1e-6;

/// Tolerance for on-edge classification while clipping.
pub const CLIP_EPS: f64 = 1e-9;

/// Union areas below this value make IoU report zero.
pub const UNION_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("quad has non-finite coordinates")]
    NonFinite,
    #[error("degenerate quad: area {area:.3e} px² is below tolerance")]
    DegenerateQuad { area: f64 },
    #[error("quad vertices do not form a convex polygon")]
    NotConvex,
}

/// A point in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    #[inline]
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    #[inline]
    fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }
}

impl From<(f64, f64)> for Point2 {
    fn from((x, y): (f64, f64)) -> Self {
        Point2::new(x, y)
    }
}

/// Axis-aligned box given by its extremes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hbb {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Hbb {
    pub const fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self {
            xmin,
            ymin,
            xmax,
            ymax,
        }
    }

    /// Smallest box containing every point.
    pub fn enclosing(points: &[Point2]) -> Self {
        let mut b = Hbb::new(
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        );
        for p in points {
            b.xmin = b.xmin.min(p.x);
            b.ymin = b.ymin.min(p.y);
            b.xmax = b.xmax.max(p.x);
            b.ymax = b.ymax.max(p.y);
        }
        b
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    /// True when `p` lies strictly inside the box.
    pub fn contains_strict(&self, p: Point2) -> bool {
        p.x > self.xmin && p.x < self.xmax && p.y > self.ymin && p.y < self.ymax
    }
}

/// Surrounding box plus the orientation offsets `(w, h)`.
///
/// `w` is the distance from the right edge back to the top-touching vertex and
/// `h` the distance from the bottom edge up to the left-touching vertex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodedBox {
    pub hbb: Hbb,
    pub w: f64,
    pub h: f64,
}

impl EncodedBox {
    /// Clamps `w` and `h` into `[0, width]` and `[0, height]`.
    pub fn clamped(hbb: Hbb, w: f64, h: f64) -> Self {
        Self {
            hbb,
            w: w.clamp(0.0, hbb.width().max(0.0)),
            h: h.clamp(0.0, hbb.height().max(0.0)),
        }
    }
}

/// A canonically ordered oriented box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    vertices: [Point2; 4],
}

impl Quad {
    /// Wraps vertices that are already in canonical order.
    ///
    /// No reordering or validation happens here; use [`canonicalize`] for raw input.
    pub const fn from_canonical(vertices: [Point2; 4]) -> Self {
        Self { vertices }
    }

    /// Canonicalizes eight interleaved coordinates `x1 y1 ... x4 y4`.
    pub fn from_coords(c: [f64; 8]) -> Result<Self, GeometryError> {
        canonicalize([
            Point2::new(c[0], c[1]),
            Point2::new(c[2], c[3]),
            Point2::new(c[4], c[5]),
            Point2::new(c[6], c[7]),
        ])
    }

    #[inline]
    pub fn vertices(&self) -> &[Point2; 4] {
        &self.vertices
    }

    pub fn coords(&self) -> [f64; 8] {
        let v = &self.vertices;
        [
            v[0].x, v[0].y, v[1].x, v[1].y, v[2].x, v[2].y, v[3].x, v[3].y,
        ]
    }

    pub fn hbb(&self) -> Hbb {
        Hbb::enclosing(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.vertices)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Quad {
        let mut v = self.vertices;
        for p in &mut v {
            p.x += dx;
            p.y += dy;
        }
        Quad { vertices: v }
    }
}

impl fmt::Display for Quad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.coords();
        write!(
            f,
            "{} {} {} {} {} {} {} {}",
            c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]
        )
    }
}

/// Signed shoelace area; positive for clockwise-on-screen order.
pub fn signed_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a.cross(b);
    }
    0.5 * acc
}

/// Absolute polygon area in square pixels.
pub fn polygon_area(poly: &[Point2]) -> f64 {
    signed_area(poly).abs()
}

/// Reorders four points into the canonical left/top/right/bottom order.
///
/// The points are sorted by angle around their centroid (clockwise on screen)
/// and then rotated so the first vertex is the leftmost one. A vertex tie on the
/// left edge goes to the one with the smaller `y`.
pub fn canonicalize(raw: [Point2; 4]) -> Result<Quad, GeometryError> {
    if raw.iter().any(|p| !p.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let cx = raw.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = raw.iter().map(|p| p.y).sum::<f64>() / 4.0;
    let mut pts = raw;
    pts.sort_by(|a, b| {
        let ta = (a.y - cy).atan2(a.x - cx);
        let tb = (b.y - cy).atan2(b.x - cx);
        ta.total_cmp(&tb)
    });

    let area = signed_area(&pts);
    if area.abs() < DEGENERATE_AREA {
        return Err(GeometryError::DegenerateQuad { area: area.abs() });
    }
    for i in 0..4 {
        let a = pts[i];
        let b = pts[(i + 1) % 4];
        let c = pts[(i + 2) % 4];
        let (e1, e2) = (b.sub(a), c.sub(b));
        let scale = e1.x.hypot(e1.y) * e2.x.hypot(e2.y);
        if e1.cross(e2) < -CLIP_EPS * scale {
            return Err(GeometryError::NotConvex);
        }
    }

    let start = (0..4)
        .min_by(|&i, &j| {
            pts[i]
                .x
                .total_cmp(&pts[j].x)
                .then(pts[i].y.total_cmp(&pts[j].y))
        })
        .expect("four vertices");
    pts.rotate_left(start);
    Ok(Quad { vertices: pts })
}

/// Surrounding box and orientation offsets of a canonical quad.
pub fn encode(q: &Quad) -> EncodedBox {
    let hbb = q.hbb();
    let v = q.vertices();
    EncodedBox {
        hbb,
        w: hbb.xmax - v[1].x,
        h: hbb.ymax - v[0].y,
    }
}

/// Rebuilds the rectangle described by an [`EncodedBox`].
///
/// `v1` and `v2` follow directly from the offsets; `v3` and `v4` are their
/// reflections through the box center.
pub fn decode(e: &EncodedBox) -> Quad {
    let b = &e.hbb;
    Quad {
        vertices: [
            Point2::new(b.xmin, b.ymax - e.h),
            Point2::new(b.xmax - e.w, b.ymin),
            Point2::new(b.xmax, b.ymin + e.h),
            Point2::new(b.xmin + e.w, b.ymax),
        ],
    }
}

/// Clips one convex polygon against another (both clockwise on screen).
///
/// Returns the intersection polygon, or an empty vector when the overlap has
/// fewer than three distinct vertices.
pub fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output: Vec<Point2> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let edge = b.sub(a);
        let side = |p: Point2| edge.cross(p.sub(a));
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let sc = side(cur);
            let sp = side(prev);
            let cur_in = sc >= -CLIP_EPS;
            let prev_in = sp >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output.dedup_by(|a, b| (a.x - b.x).abs() <= CLIP_EPS && (a.y - b.y).abs() <= CLIP_EPS);
    if output.len() > 1 {
        let (first, last) = (output[0], output[output.len() - 1]);
        if (first.x - last.x).abs() <= CLIP_EPS && (first.y - last.y).abs() <= CLIP_EPS {
            output.pop();
        }
    }
    if output.len() < 3 {
        output.clear();
    }
    output
}

#[inline]
fn intersect(p: Point2, q: Point2, sp: f64, sq: f64) -> Point2 {
    let t = sp / (sp - sq);
    Point2::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Intersection polygon of two canonical quads.
pub fn convex_intersect(a: &Quad, b: &Quad) -> Vec<Point2> {
    clip_convex(a.vertices(), b.vertices())
}

/// Exact IoU of two convex quads.
pub fn polygon_iou(a: &Quad, b: &Quad) -> f64 {
    let inter = polygon_area(&convex_intersect(a, b));
    let union = a.area() + b.area() - inter;
    if union < UNION_EPS {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// IoU of two axis-aligned boxes.
pub fn hbb_iou(a: &Hbb, b: &Hbb) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union < UNION_EPS {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Even-odd point-in-polygon test.
fn point_in_polygon(p: Point2, poly: &[Point2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Raster IoU estimate: counts cell centers of a `grid`×`grid` lattice laid over
/// the union of both bounding boxes. Intended as a test oracle.
pub fn raster_iou_oracle(a: &Quad, b: &Quad, grid: usize) -> f64 {
    let ha = a.hbb();
    let hb = b.hbb();
    let xmin = ha.xmin.min(hb.xmin);
    let ymin = ha.ymin.min(hb.ymin);
    let xmax = ha.xmax.max(hb.xmax);
    let ymax = ha.ymax.max(hb.ymax);
    let dx = (xmax - xmin) / grid as f64;
    let dy = (ymax - ymin) / grid as f64;
    let (mut in_a, mut in_b, mut in_both) = (0u64, 0u64, 0u64);
    for iy in 0..grid {
        let y = ymin + (iy as f64 + 0.5) * dy;
        if (y < ha.ymin || y > ha.ymax) && (y < hb.ymin || y > hb.ymax) {
            continue;
        }
        for ix in 0..grid {
            let p = Point2::new(xmin + (ix as f64 + 0.5) * dx, y);
            let ia = point_in_polygon(p, a.vertices());
            let ib = point_in_polygon(p, b.vertices());
            in_a += ia as u64;
            in_b += ib as u64;
            in_both += (ia && ib) as u64;
        }
    }
    let union = in_a + in_b - in_both;
    if union == 0 {
        return 0.0;
    }
    in_both as f64 / union as f64
}
