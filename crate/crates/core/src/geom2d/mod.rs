//! Planar geometry: points, polygons, half-planes and ellipses.
//!
//! Predicates use an absolute tolerance of [`EPS`] metres. Boolean operations
//! (union, clipping, dilation) run in `f64` on coordinates snapped to a
//! [`SNAP`] grid.

mod boolean;
mod ellipse;
mod visibility;

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::Real;

pub use boolean::{clip_polygon, clip_region, dilate_polygon, shrink_polygon, union_polygons, union_regions};
pub use ellipse::{dilate_ellipse_to_point, ellipse_tangent_halfplane, fit_ellipse_minor_axis, Ellipse};
pub use visibility::{mutually_visible, visibility_polygon, visible_vertices};

/// Absolute tolerance for geometric predicates, metres.
pub const EPS: f64 = 1e-9;
/// Grid that coordinates are snapped to before boolean operations.
pub const SNAP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Point2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: T) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, o: Self) -> T {
        self.x * o.y - self.y * o.x
    }

    pub fn norm2(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Self) -> T {
        (self - o).norm()
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }

    pub fn lerp(self, o: Self, t: T) -> Self {
        self + (o - self) * t
    }

    pub fn midpoint(self, o: Self) -> Self {
        self.lerp(o, T::lit(0.5))
    }

    pub fn rotate(self, theta: T) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn cast<U: Real>(self) -> Point2<U> {
        Point2::new(U::lit(self.x.value()), U::lit(self.y.value()))
    }
}

impl<T: Real> Add for Point2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Real> Sub for Point2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Real> Mul<T> for Point2<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s)
    }
}

impl<T: Real> Neg for Point2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

/// Distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance<T: Real>(p: Point2<T>, a: Point2<T>, b: Point2<T>) -> T {
    let d = b - a;
    let l2 = d.norm2();
    if l2 <= T::zero() {
        return p.dist(a);
    }
    let t = ((p - a).dot(d) / l2).max(T::zero()).min(T::one());
    p.dist(a + d * t)
}

/// Simple polygon with counter-clockwise vertices; the closing edge is implied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2<T>>", into = "Vec<Point2<T>>")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct Polygon<T> {
    vertices: Vec<Point2<T>>,
}

impl<T: Real> Polygon<T> {
    /// Builds a polygon, reversing clockwise input. Rejects fewer than three
    /// vertices, non-finite coordinates and zero area.
    pub fn new(mut vertices: Vec<Point2<T>>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(invalid(format!("polygon needs at least 3 vertices, got {}", vertices.len())));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(invalid("polygon has non-finite coordinates"));
        }
        let area = signed_area(&vertices);
        if area.abs().value() <= EPS * EPS {
            return Err(invalid("polygon has zero area"));
        }
        if area < T::zero() {
            vertices.reverse();
        }
        Ok(Self { vertices })
    }

    pub fn rectangle(min: Point2<T>, max: Point2<T>) -> Result<Self> {
        Self::new(vec![min, Point2::new(max.x, min.y), max, Point2::new(min.x, max.y)])
    }

    /// Regular `sides`-gon with circumradius `radius`, first vertex at `phase`.
    pub fn regular(center: Point2<T>, radius: T, sides: usize, phase: T) -> Result<Self> {
        let step = T::TAU() / T::lit(sides as f64);
        Self::new(
            (0..sides)
                .map(|k| center + Point2::from_angle(phase + step * T::lit(k as f64)) * radius)
                .collect(),
        )
    }

    pub fn vertices(&self) -> &[Point2<T>] {
        &self.vertices
    }

    pub fn into_vertices(self) -> Vec<Point2<T>> {
        self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Edges `(v_i, v_{i+1})`, including the closing edge.
    pub fn edges(&self) -> impl Iterator<Item = (Point2<T>, Point2<T>)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn area(&self) -> T {
        signed_area(&self.vertices)
    }

    pub fn perimeter(&self) -> T {
        self.edges().fold(T::zero(), |s, (a, b)| s + a.dist(b))
    }

    pub fn centroid(&self) -> Point2<T> {
        let mut c = Point2::new(T::zero(), T::zero());
        let mut a2 = T::zero();
        for (p, q) in self.edges() {
            let w = p.cross(q);
            a2 = a2 + w;
            c = c + (p + q) * w;
        }
        c * (T::one() / (T::lit(3.0) * a2))
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Point2<T>, Point2<T>) {
        let mut lo = self.vertices[0];
        let mut hi = lo;
        for v in &self.vertices[1..] {
            lo = Point2::new(lo.x.min(v.x), lo.y.min(v.y));
            hi = Point2::new(hi.x.max(v.x), hi.y.max(v.y));
        }
        (lo, hi)
    }

    /// Distance from `p` to the polygon boundary.
    pub fn boundary_distance(&self, p: Point2<T>) -> T {
        self.edges()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(T::infinity(), T::min)
    }

    /// True if `p` is strictly inside, more than [`EPS`] from the boundary.
    pub fn contains_strict(&self, p: Point2<T>) -> bool {
        crossing_parity(&self.vertices, p) && self.boundary_distance(p).value() > EPS
    }

    pub fn is_convex(&self) -> bool {
        concave_vertex_indices(self).is_empty()
    }

    /// Half-plane description of a convex polygon, one unit-normal row per edge.
    pub fn half_planes(&self) -> Vec<HalfPlane<T>> {
        self.edges()
            .filter(|(a, b)| a.dist(*b).value() > EPS)
            .map(|(a, b)| {
                let n = Point2::new(b.y - a.y, a.x - b.x);
                let n = n * (T::one() / n.norm());
                HalfPlane { a: n, b: n.dot(a) }
            })
            .collect()
    }

    pub fn translate(&self, d: Point2<T>) -> Self {
        Self { vertices: self.vertices.iter().map(|&v| v + d).collect() }
    }

    /// Drops repeated vertices and vertices whose adjacent edges are collinear.
    pub fn simplified(&self) -> Result<Self> {
        Self::new(remove_collinear(&self.vertices))
    }
}

impl<T: Real> TryFrom<Vec<Point2<T>>> for Polygon<T> {
    type Error = crate::Error;
    fn try_from(v: Vec<Point2<T>>) -> Result<Self> {
        Self::new(v)
    }
}

impl<T: Real> From<Polygon<T>> for Vec<Point2<T>> {
    fn from(p: Polygon<T>) -> Self {
        p.vertices
    }
}

pub(crate) fn signed_area<T: Real>(v: &[Point2<T>]) -> T {
    let n = v.len();
    let mut s = T::zero();
    for i in 0..n {
        s = s + v[i].cross(v[(i + 1) % n]);
    }
    s * T::lit(0.5)
}

fn crossing_parity<T: Real>(v: &[Point2<T>], p: Point2<T>) -> bool {
    let n = v.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (v[i], v[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

pub(crate) fn remove_collinear<T: Real>(v: &[Point2<T>]) -> Vec<Point2<T>> {
    let mut pts: Vec<Point2<T>> = Vec::with_capacity(v.len());
    for &p in v {
        if pts.last().is_none_or(|q: &Point2<T>| q.dist(p).value() > EPS) {
            pts.push(p);
        }
    }
    while pts.len() > 1 && pts[0].dist(pts[pts.len() - 1]).value() <= EPS {
        pts.pop();
    }
    loop {
        let n = pts.len();
        if n < 3 {
            return pts;
        }
        let drop = (0..n).find(|&i| {
            let (a, b, c) = (pts[(i + n - 1) % n], pts[i], pts[(i + 1) % n]);
            let d1 = b - a;
            let d2 = c - b;
            // Area of the triangle over its longer side: the offset of b from line ac.
            let h = d1.cross(d2).abs() / (c - a).norm().max(T::lit(EPS));
            h.value() <= EPS && d1.dot(d2) > T::zero()
        });
        match drop {
            Some(i) => {
                pts.remove(i);
            }
            None => return pts,
        }
    }
}

/// Boundary-inclusive point membership.
pub fn polygon_contains<T: Real>(poly: &Polygon<T>, p: Point2<T>) -> bool {
    poly.boundary_distance(p).value() <= EPS || crossing_parity(&poly.vertices, p)
}

/// Checked variant of [`polygon_contains`] for raw vertex lists.
pub fn polygon_contains_raw<T: Real>(vertices: &[Point2<T>], p: Point2<T>) -> Result<bool> {
    if vertices.len() < 3 {
        return Err(invalid("polygon needs at least 3 vertices"));
    }
    let on_edge = (0..vertices.len()).any(|i| {
        point_segment_distance(p, vertices[i], vertices[(i + 1) % vertices.len()]).value() <= EPS
    });
    Ok(on_edge || crossing_parity(vertices, p))
}

fn turn<T: Real>(a: Point2<T>, b: Point2<T>, c: Point2<T>) -> T {
    let d1 = b - a;
    let d2 = c - b;
    let l = d1.norm() * d2.norm();
    if l.value() <= 0.0 {
        return T::zero();
    }
    d1.cross(d2) / l
}

/// Indices of vertices whose interior angle exceeds π.
pub fn concave_vertex_indices<T: Real>(poly: &Polygon<T>) -> Vec<usize> {
    let v = &poly.vertices;
    let n = v.len();
    (0..n)
        .filter(|&i| turn(v[(i + n - 1) % n], v[i], v[(i + 1) % n]).value() < -EPS)
        .collect()
}

/// Vertices whose interior angle exceeds π (reflex vertices).
pub fn concave_vertices<T: Real>(poly: &Polygon<T>) -> Vec<Point2<T>> {
    concave_vertex_indices(poly).into_iter().map(|i| poly.vertices[i]).collect()
}

/// `{x : a·x ≤ b}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfPlane<T> {
    pub a: Point2<T>,
    pub b: T,
}

impl<T: Real> HalfPlane<T> {
    pub fn new(a: Point2<T>, b: T) -> Result<Self> {
        if !(a.norm().value() > 0.0) || !b.is_finite() {
            return Err(invalid("half-plane normal must be nonzero and finite"));
        }
        Ok(Self { a, b })
    }

    /// Same set with a unit normal.
    pub fn normalized(self) -> Self {
        let n = self.a.norm();
        Self { a: self.a * (T::one() / n), b: self.b / n }
    }

    /// `a·p − b`; nonpositive inside.
    pub fn eval(&self, p: Point2<T>) -> T {
        self.a.dot(p) - self.b
    }

    /// Signed distance to the boundary line, positive inside.
    pub fn slack(&self, p: Point2<T>) -> T {
        -self.eval(p) / self.a.norm()
    }

    pub fn contains(&self, p: Point2<T>) -> bool {
        self.slack(p).value() >= -EPS
    }
}

/// Polygon with holes. The outer ring and holes are all stored
/// counter-clockwise; holes must lie inside the outer ring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct Region<T> {
    pub outer: Polygon<T>,
    #[serde(default)]
    pub holes: Vec<Polygon<T>>,
}

impl<T: Real> From<Polygon<T>> for Region<T> {
    fn from(outer: Polygon<T>) -> Self {
        Self { outer, holes: Vec::new() }
    }
}

impl<T: Real> Region<T> {
    pub fn area(&self) -> T {
        self.holes.iter().fold(self.outer.area(), |s, h| s - h.area())
    }

    pub fn contains(&self, p: Point2<T>) -> bool {
        polygon_contains(&self.outer, p) && !self.holes.iter().any(|h| h.contains_strict(p))
    }

    /// Reflex vertices of the region: reflex outer vertices plus convex hole
    /// vertices (which are reflex from the region's side).
    pub fn reflex_vertices(&self) -> Vec<Point2<T>> {
        let mut out = concave_vertices(&self.outer);
        for h in &self.holes {
            let v = h.vertices();
            let n = v.len();
            out.extend(
                (0..n)
                    .filter(|&i| turn(v[(i + n - 1) % n], v[i], v[(i + 1) % n]).value() > EPS)
                    .map(|i| v[i]),
            );
        }
        out
    }
}
