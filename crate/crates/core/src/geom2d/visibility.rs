//! Visibility among polygonal obstacles inside a bounding polygon.

use super::{point_segment_distance, polygon_contains, remove_collinear, Point2, Polygon, EPS};
use crate::error::{invalid, Result};
use crate::Real;

/// Angular offset of the side rays cast past each vertex.
const SIDE_RAY: f64 = 1e-8;

fn check_free<T: Real>(p: Point2<T>, obstacles: &[Polygon<T>], boundary: &Polygon<T>) -> Result<()> {
    if obstacles.iter().any(|o| o.contains_strict(p)) {
        return Err(invalid(format!("point ({}, {}) is inside an obstacle", p.x.value(), p.y.value())));
    }
    if !polygon_contains(boundary, p) {
        return Err(invalid(format!("point ({}, {}) is outside the boundary", p.x.value(), p.y.value())));
    }
    Ok(())
}

/// Whether the open segment `(p, q)` avoids every obstacle interior and stays
/// inside `boundary`. Touching an obstacle boundary, including running along an
/// edge or through a vertex, counts as clear.
///
/// The segment is split at every point where it meets a polygon edge or
/// vertex; each piece then lies entirely inside or outside each polygon and is
/// classified by its midpoint.
pub(crate) fn segment_clear<T: Real>(
    p: Point2<T>,
    q: Point2<T>,
    obstacles: &[Polygon<T>],
    boundary: Option<&Polygon<T>>,
) -> bool {
    // Canonical direction so that the answer is symmetric bit for bit.
    let (p, q) = if (q.x, q.y) < (p.x, p.y) { (q, p) } else { (p, q) };
    let d = q - p;
    let l2 = d.norm2();
    if l2.value() <= EPS * EPS {
        return true;
    }
    let mut ts: Vec<T> = vec![T::zero(), T::one()];
    let polys = obstacles.iter().chain(boundary);
    for poly in polys.clone() {
        for (a, b) in poly.edges() {
            for v in [a, b] {
                if point_segment_distance(v, p, q).value() <= EPS {
                    ts.push(((v - p).dot(d) / l2).max(T::zero()).min(T::one()));
                }
            }
            let e = b - a;
            let den = d.cross(e);
            if den.abs().value() > 1e-300 {
                let w = a - p;
                let t = w.cross(e) / den;
                let s = w.cross(d) / den;
                let (tv, sv) = (t.value(), s.value());
                if tv > 0.0 && tv < 1.0 && (0.0..=1.0).contains(&sv) {
                    ts.push(t);
                }
            }
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    let half = T::lit(0.5);
    ts.windows(2).all(|w| {
        let m = p + d * ((w[0] + w[1]) * half);
        !obstacles.iter().any(|o| o.contains_strict(m)) && boundary.is_none_or(|b| polygon_contains(b, m))
    })
}

/// Whether `p` and `q` see each other. Grazing contact counts as visible.
pub fn mutually_visible<T: Real>(p: Point2<T>, q: Point2<T>, obstacles: &[Polygon<T>], boundary: &Polygon<T>) -> bool {
    segment_clear(p, q, obstacles, Some(boundary))
}

/// Obstacle and boundary vertices visible from `p`, sorted by angle about `p`
/// (ties by distance). `p` itself is excluded if it is a vertex.
pub fn visible_vertices<T: Real>(
    p: Point2<T>,
    obstacles: &[Polygon<T>],
    boundary: &Polygon<T>,
) -> Result<Vec<Point2<T>>> {
    check_free(p, obstacles, boundary)?;
    let mut out: Vec<Point2<T>> = obstacles
        .iter()
        .chain(std::iter::once(boundary))
        .flat_map(|poly| poly.vertices().iter().copied())
        .filter(|&v| v.dist(p).value() > EPS && segment_clear(p, v, obstacles, Some(boundary)))
        .collect();
    let key = |v: &Point2<T>| ((*v - p).y.atan2((*v - p).x).value(), v.dist(p).value());
    out.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    out.dedup_by(|a, b| a.dist(*b).value() <= EPS);
    Ok(out)
}

fn cast_ray<T: Real>(p: Point2<T>, dir: Point2<T>, polys: &[&Polygon<T>]) -> Option<Point2<T>> {
    let mut best: Option<T> = None;
    for poly in polys {
        for (a, b) in poly.edges() {
            let e = b - a;
            let den = dir.cross(e);
            if den.abs().value() <= 1e-300 {
                continue;
            }
            let w = a - p;
            let t = w.cross(e) / den;
            let s = w.cross(dir) / den;
            let sv = s.value();
            if t.value() > 1e-12 && sv >= -1e-12 && sv <= 1.0 + 1e-12 && best.is_none_or(|bt| t < bt) {
                best = Some(t);
            }
        }
    }
    best.map(|t| p + dir * t)
}

/// The region of the boundary polygon visible from `p`, as a star-shaped
/// polygon about `p`.
///
/// Rays are cast through every vertex and at a tiny angular offset on either
/// side of it, which picks up the shadow points behind silhouette vertices.
/// The offset rays make the result lie inside the exact visibility polygon, by
/// at most about `1e-8 · distance` near shadow boundaries.
pub fn visibility_polygon<T: Real>(p: Point2<T>, obstacles: &[Polygon<T>], boundary: &Polygon<T>) -> Result<Polygon<T>> {
    check_free(p, obstacles, boundary)?;
    let polys: Vec<&Polygon<T>> = obstacles.iter().chain(std::iter::once(boundary)).collect();
    let mut angles: Vec<T> = Vec::new();
    for poly in &polys {
        for &v in poly.vertices() {
            if v.dist(p).value() > EPS {
                let th = (v - p).y.atan2((v - p).x);
                angles.extend([th - T::lit(SIDE_RAY), th, th + T::lit(SIDE_RAY)]);
            }
        }
    }
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    angles.dedup();
    let mut hits: Vec<Point2<T>> = angles
        .iter()
        .filter_map(|&th| cast_ray(p, Point2::from_angle(th), &polys))
        .collect();
    hits.dedup_by(|a, b| a.dist(*b).value() <= EPS);
    Polygon::new(remove_collinear(&hits))
}
