//! Rotated rectangles, exact convex overlap, IoU/GIoU and the seven-value
//! box encoding used by the detection head.
//!
//! Coordinates are image pixels with `y` growing downwards; "top" means the
//! smallest `y`. Vertex lists are counterclockwise in the usual
//! positive-signed-area sense.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Intersections below this area are treated as disjoint.
pub const AREA_EPS: f64 = 1e-12;

/// Allowed mismatch between an encoding's offsets and its stored area ratio.
pub const THETA_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid rectangle: {0}")]
    InvalidRect(String),
    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),
    #[error("invalid box encoding: {0}")]
    InvalidEncoding(String),
    #[error("inconsistent box encoding: offsets imply area ratio {implied:.6}, encoding says {stored:.6}")]
    InconsistentEncoding { implied: f64, stored: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Point) -> f64 {
        self.sub(o).norm()
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Aabb {
    pub fn from_points(points: impl IntoIterator<Item = Point>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let init = Aabb { x1: first.x, y1: first.y, x2: first.x, y2: first.y };
        Some(it.fold(init, |b, p| Aabb {
            x1: b.x1.min(p.x),
            y1: b.y1.min(p.y),
            x2: b.x2.max(p.x),
            y2: b.y2.max(p.y),
        }))
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, p: Point, tol: f64) -> bool {
        p.x >= self.x1 - tol && p.x <= self.x2 + tol && p.y >= self.y1 - tol && p.y <= self.y2 + tol
    }
}

/// A rectangle of size `w × h` centred at `(cx, cy)` and rotated by `phi`
/// radians. `phi` is kept in `[-π/2, π/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RectFields", into = "RectFields")]
pub struct RotatedRect {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    phi: f64,
}

#[derive(Serialize, Deserialize)]
struct RectFields {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    phi: f64,
}

impl TryFrom<RectFields> for RotatedRect {
    type Error = GeometryError;

    fn try_from(f: RectFields) -> Result<Self, Self::Error> {
        RotatedRect::new(f.cx, f.cy, f.w, f.h, f.phi)
    }
}

impl From<RotatedRect> for RectFields {
    fn from(r: RotatedRect) -> Self {
        RectFields { cx: r.cx, cy: r.cy, w: r.w, h: r.h, phi: r.phi }
    }
}

/// Wraps an angle into `[-π/2, π/2)`.
pub fn canonical_angle(phi: f64) -> f64 {
    let mut a = phi - PI * ((phi + PI / 2.0) / PI).floor();
    if a >= PI / 2.0 {
        a -= PI;
    }
    if a < -PI / 2.0 {
        a += PI;
    }
    a
}

impl RotatedRect {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, phi: f64) -> Result<Self, GeometryError> {
        if ![cx, cy, w, h, phi].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidRect("non-finite parameter".into()));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::InvalidRect(format!("sides must be positive, got {w} x {h}")));
        }
        Ok(Self { cx, cy, w, h, phi: canonical_angle(phi) })
    }

    /// Axis-aligned rectangle `[x1, x2] × [y1, y2]`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, 0.0)
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
    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self { cx: self.cx + dx, cy: self.cy + dy, ..*self }
    }

    pub fn rotated_by(&self, dphi: f64) -> Self {
        Self { phi: canonical_angle(self.phi + dphi), ..*self }
    }

    /// Counterclockwise vertices.
    pub fn vertices(&self) -> [Point; 4] {
        let (s, c) = self.phi.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(lx, ly)| Point::new(self.cx + lx * c - ly * s, self.cy + lx * s + ly * c))
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::from_points(self.vertices()).expect("four vertices")
    }

    /// Same point set as `other`: every vertex has a partner within `tol`.
    pub fn same_shape(&self, other: &RotatedRect, tol: f64) -> bool {
        self.vertex_distance(other) <= tol
    }

    /// Largest distance from a vertex of either rectangle to the nearest
    /// vertex of the other.
    pub fn vertex_distance(&self, other: &RotatedRect) -> f64 {
        let a = self.vertices();
        let b = other.vertices();
        let one_way = |p: &[Point; 4], q: &[Point; 4]| {
            p.iter()
                .map(|v| q.iter().map(|u| v.distance(*u)).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max)
        };
        one_way(&a, &b).max(one_way(&b, &a))
    }
}

/// Smallest axis-aligned box containing all four vertices of `r`.
pub fn aabb(r: &RotatedRect) -> Aabb {
    r.aabb()
}

/// Signed shoelace area (positive for counterclockwise order).
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += poly[i].cross(poly[(i + 1) % n]);
    }
    acc / 2.0
}

fn validate_convex(poly: &[Point], name: &str) -> Result<(), GeometryError> {
    if poly.len() < 3 {
        return Err(GeometryError::DegeneratePolygon(format!("{name} has {} vertices", poly.len())));
    }
    if poly.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(GeometryError::DegeneratePolygon(format!("{name} has a non-finite vertex")));
    }
    let area = signed_area(poly);
    let scale = Aabb::from_points(poly.iter().copied()).map(|b| b.width().max(b.height())).unwrap_or(0.0);
    if area.abs() <= 1e-12 * scale * scale.max(1.0) {
        return Err(GeometryError::DegeneratePolygon(format!("{name} is collinear")));
    }
    if area < 0.0 {
        return Err(GeometryError::DegeneratePolygon(format!("{name} is clockwise")));
    }
    let n = poly.len();
    for i in 0..n {
        let e1 = poly[(i + 1) % n].sub(poly[i]);
        let e2 = poly[(i + 2) % n].sub(poly[(i + 1) % n]);
        if e1.cross(e2) < -1e-9 * e1.norm() * e2.norm() {
            return Err(GeometryError::DegeneratePolygon(format!("{name} is not convex")));
        }
    }
    Ok(())
}

fn lex_cmp(a: &[Point], b: &[Point]) -> Ordering {
    for (p, q) in a.iter().zip(b) {
        let o = p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y));
        if o != Ordering::Equal {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

/// Clips `subject` against every edge of the convex counterclockwise `clip`.
fn sutherland_hodgman(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let edge = clip[(i + 1) % m].sub(a);
        let side = |p: Point| edge.cross(p.sub(a));
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(lerp_at(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(lerp_at(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn lerp_at(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Exact area of the intersection of two convex counterclockwise polygons.
///
/// The computation is symmetric bit-for-bit: the operands are put in a
/// canonical order and expressed relative to their common mid-centroid.
pub fn convex_intersection_area(a: &[Point], b: &[Point]) -> Result<f64, GeometryError> {
    validate_convex(a, "first polygon")?;
    validate_convex(b, "second polygon")?;
    Ok(intersection_unchecked(a, b))
}

fn centroid(poly: &[Point]) -> Point {
    let n = poly.len() as f64;
    let (sx, sy) = poly.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    Point::new(sx / n, sy / n)
}

fn intersection_unchecked(a: &[Point], b: &[Point]) -> f64 {
    let (first, second) = if lex_cmp(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
    let (ca, cb) = (centroid(first), centroid(second));
    let origin = Point::new((ca.x + cb.x) / 2.0, (ca.y + cb.y) / 2.0);
    let shift = |poly: &[Point]| poly.iter().map(|p| p.sub(origin)).collect::<Vec<_>>();
    let (subject, clip) = (shift(first), shift(second));
    let clipped = sutherland_hodgman(&subject, &clip);
    let area = signed_area(&clipped);
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

fn intersection_of(a: &RotatedRect, b: &RotatedRect) -> f64 {
    intersection_unchecked(&a.vertices(), &b.vertices())
}

/// Intersection over union of two rotated rectangles.
pub fn iou(a: &RotatedRect, b: &RotatedRect) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = intersection_of(a, b);
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Overlap terms shared by [`iou`] and [`giou`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub intersection: f64,
    pub union: f64,
    /// Area of the axis-aligned box enclosing both rectangles.
    pub enclosing: f64,
}

pub fn overlap(a: &RotatedRect, b: &RotatedRect) -> Overlap {
    let intersection = if a == b { a.area() } else { intersection_of(a, b) };
    let union = a.area() + b.area() - intersection;
    let enclosing = Aabb::from_points(a.vertices().into_iter().chain(b.vertices()))
        .expect("eight vertices")
        .area();
    Overlap { intersection, union, enclosing }
}

/// Generalized IoU with the enclosing region taken as the axis-aligned box
/// around both rectangles' vertices.
pub fn giou(a: &RotatedRect, b: &RotatedRect) -> f64 {
    let o = overlap(a, b);
    let iou = iou(a, b);
    let penalty = ((o.enclosing - o.union) / o.enclosing).max(0.0);
    iou - penalty
}

/// `{x1, y1, x2, y2, w, h, θ}` box parameterization: the circumscribing
/// horizontal box, the offsets of the vertices touching its top and right
/// edges, and the rotated-to-horizontal area ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxEncoding {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    /// Distance from `(x1, y1)` to the vertex on the top edge.
    pub dw: f64,
    /// Distance from `(x2, y1)` to the vertex on the right edge.
    pub dh: f64,
    /// Rotated area over circumscribing-box area, in `(0, 1]`.
    pub theta: f64,
}

impl BoxEncoding {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let vals = [self.x1, self.y1, self.x2, self.y2, self.dw, self.dh, self.theta];
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidEncoding("non-finite field".into()));
        }
        let (bw, bh) = (self.x2 - self.x1, self.y2 - self.y1);
        if bw <= 0.0 || bh <= 0.0 {
            return Err(GeometryError::InvalidEncoding("empty circumscribing box".into()));
        }
        let slack = 1e-9 * bw.max(bh).max(1.0);
        if self.dw < -slack || self.dw > bw + slack || self.dh < -slack || self.dh > bh + slack {
            return Err(GeometryError::InvalidEncoding("offset outside circumscribing box".into()));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0 + 1e-12) {
            return Err(GeometryError::InvalidEncoding(format!("area ratio {} outside (0, 1]", self.theta)));
        }
        Ok(())
    }

    /// The four touch points, top/right/bottom/left.
    pub fn touch_points(&self) -> [Point; 4] {
        [
            Point::new(self.x1 + self.dw, self.y1),
            Point::new(self.x2, self.y1 + self.dh),
            Point::new(self.x2 - self.dw, self.y2),
            Point::new(self.x1, self.y2 - self.dh),
        ]
    }
}

pub fn encode(r: &RotatedRect) -> BoxEncoding {
    let v = r.vertices();
    let bb = Aabb::from_points(v).expect("four vertices");
    // Top vertex; on an exact tie (axis-aligned) the leftmost, giving dw = 0.
    let top = (0..4)
        .min_by(|&i, &j| v[i].y.total_cmp(&v[j].y).then(v[i].x.total_cmp(&v[j].x)))
        .expect("four vertices");
    // Counterclockwise from the top vertex comes the one on the right edge.
    let right = v[(top + 1) % 4];
    BoxEncoding {
        x1: bb.x1,
        y1: bb.y1,
        x2: bb.x2,
        y2: bb.y2,
        dw: v[top].x - bb.x1,
        dh: right.y - bb.y1,
        theta: (r.area() / bb.area()).min(1.0),
    }
}

pub fn decode(e: &BoxEncoding) -> Result<RotatedRect, GeometryError> {
    e.validate()?;
    let [t, r, b, _] = e.touch_points();
    let u = r.sub(t);
    let v = b.sub(r);
    let (lu, lv) = (u.norm(), v.norm());
    let scale = (e.x2 - e.x1).max(e.y2 - e.y1);
    if lu <= 1e-12 * scale || lv <= 1e-12 * scale {
        return Err(GeometryError::InvalidEncoding("offsets collapse the rectangle".into()));
    }
    if (u.dot(v) / (lu * lv)).abs() > THETA_TOLERANCE {
        return Err(GeometryError::InvalidEncoding("offsets do not describe a rectangle".into()));
    }
    let implied = lu * lv / ((e.x2 - e.x1) * (e.y2 - e.y1));
    if (implied - e.theta).abs() > THETA_TOLERANCE {
        return Err(GeometryError::InconsistentEncoding { implied, stored: e.theta });
    }
    RotatedRect::new((e.x1 + e.x2) / 2.0, (e.y1 + e.y2) / 2.0, lu, lv, u.y.atan2(u.x))
}
