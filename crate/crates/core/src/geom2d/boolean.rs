//! Boolean operations on polygons, backed by `geo`'s overlay engine.

use geo::{BooleanOps, Coord, LineString, MultiPolygon};

use super::{remove_collinear, signed_area, HalfPlane, Point2, Polygon, Region, EPS, SNAP};
use crate::error::{invalid, Error, Result};
use crate::Real;

fn snap(x: f64) -> f64 {
    (x / SNAP).round() * SNAP
}

fn ring<T: Real>(poly: &Polygon<T>) -> LineString<f64> {
    let mut c: Vec<Coord<f64>> = poly
        .vertices()
        .iter()
        .map(|v| Coord { x: snap(v.x.value()), y: snap(v.y.value()) })
        .collect();
    c.push(c[0]);
    LineString::new(c)
}

fn to_geo<T: Real>(poly: &Polygon<T>) -> geo::Polygon<f64> {
    geo::Polygon::new(ring(poly), Vec::new())
}

fn region_to_geo<T: Real>(r: &Region<T>) -> geo::Polygon<f64> {
    geo::Polygon::new(ring(&r.outer), r.holes.iter().map(ring).collect())
}

fn from_ring<T: Real>(ls: &LineString<f64>) -> Option<Polygon<T>> {
    let pts: Vec<Point2<T>> = ls
        .0
        .iter()
        .map(|c| Point2::new(T::lit(c.x), T::lit(c.y)))
        .collect();
    let pts = remove_collinear(&pts);
    if pts.len() < 3 || signed_area(&pts).abs().value() <= EPS * EPS {
        return None;
    }
    Polygon::new(pts).ok()
}

fn from_geo<T: Real>(mp: &MultiPolygon<f64>, snap: &Snapper) -> Vec<Region<T>> {
    let conv = |ls: &LineString<f64>| {
        let c: Vec<Coord<f64>> = ls.0.iter().map(|&c| snap.apply(c)).collect();
        from_ring(&LineString::new(c))
    };
    mp.0.iter()
        .filter_map(|p| {
            let outer = conv(p.exterior())?;
            let holes = p.interiors().iter().filter_map(conv).collect();
            Some(Region { outer, holes })
        })
        .collect()
}

/// The overlay engine rounds to an integer grid (about `1e-9` relative to the
/// scene size). Output vertices are pulled back onto the input vertices they
/// came from, or onto the exact intersection of the input lines they lie on.
struct Snapper {
    anchors: Vec<Point2<f64>>,
    lines: Vec<HalfPlane<f64>>,
    tol: f64,
}

impl Snapper {
    fn new() -> Self {
        Self { anchors: Vec::new(), lines: Vec::new(), tol: 0.0 }
    }

    fn add_ring<T: Real>(&mut self, poly: &Polygon<T>) {
        for (a, b) in poly.edges() {
            let (a, b) = (a.cast::<f64>(), b.cast::<f64>());
            self.anchors.push(a);
            if a.dist(b) > 0.0 {
                let n = (b - a).perp() * (1.0 / a.dist(b));
                self.lines.push(HalfPlane { a: n, b: n.dot(a) });
            }
        }
        self.widen(poly);
    }

    /// Grows the tolerance to the overlay grid spacing for a scene containing `poly`.
    fn widen<T: Real>(&mut self, poly: &Polygon<T>) {
        for v in poly.vertices() {
            let ext = v.x.abs().value().max(v.y.abs().value()).max(1.0);
            self.tol = self.tol.max(ext * 1e-7);
        }
    }

    fn add_line(&mut self, h: HalfPlane<f64>) {
        self.lines.push(h.normalized());
    }

    fn apply(&self, c: Coord<f64>) -> Coord<f64> {
        let v = Point2::new(c.x, c.y);
        let near = self
            .anchors
            .iter()
            .map(|&a| (a.dist(v), a))
            .filter(|(d, _)| *d <= self.tol)
            .min_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        if let Some((_, a)) = near {
            return Coord { x: a.x, y: a.y };
        }
        let mut close: Vec<(f64, HalfPlane<f64>)> = self
            .lines
            .iter()
            .map(|h| (h.eval(v).abs(), *h))
            .filter(|(d, _)| *d <= self.tol)
            .collect();
        close.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        let fixed = match close.as_slice() {
            [] => v,
            [(_, h)] => v - h.a * h.eval(v),
            [(_, h1), rest @ ..] => rest
                .iter()
                .find(|(_, h2)| h1.a.cross(h2.a).abs() > 1e-6)
                .map(|(_, h2)| {
                    let det = h1.a.cross(h2.a);
                    Point2::new(
                        (h1.b * h2.a.y - h2.b * h1.a.y) / det,
                        (h1.a.x * h2.b - h2.a.x * h1.b) / det,
                    )
                })
                .unwrap_or(v - h1.a * h1.eval(v)),
        };
        Coord { x: fixed.x, y: fixed.y }
    }
}

/// Minkowski sum of `poly` with a regular `disc_sides`-gon circumscribing the
/// disc of radius `r`. The polygon's faces are oriented so that axis-aligned
/// edges are offset by exactly `r`.
pub fn dilate_polygon<T: Real>(poly: &Polygon<T>, r: T, disc_sides: usize) -> Result<Polygon<T>> {
    check_dilation(r.value(), disc_sides)?;
    if r.value() == 0.0 {
        return Ok(poly.clone());
    }
    let base: Polygon<f64> = Polygon::new(poly.vertices().iter().map(|v| v.cast()).collect())?;
    let mut snap = Snapper::new();
    snap.add_ring(&base);
    let mut pieces = vec![to_geo(&base)];
    for hull in edge_hulls(&base, r.value(), disc_sides)? {
        snap.add_ring(&hull);
        pieces.push(to_geo(&hull));
    }
    let merged = geo::unary_union(pieces.iter());
    let mut out: Vec<Region<T>> = from_geo(&merged, &snap);
    out.sort_by(|x, y| y.outer.area().partial_cmp(&x.outer.area()).unwrap());
    out.into_iter()
        .next()
        .map(|r| r.outer)
        .ok_or_else(|| invalid("dilation produced no polygon"))
}

fn check_dilation(r: f64, disc_sides: usize) -> Result<()> {
    if !(r >= 0.0) {
        return Err(invalid(format!("dilation radius must be nonnegative, got {r}")));
    }
    if disc_sides < 8 {
        return Err(invalid(format!("dilation disc needs at least 8 sides, got {disc_sides}")));
    }
    Ok(())
}

/// Each edge of `poly` swept by the circumscribing `disc_sides`-gon.
fn edge_hulls(poly: &Polygon<f64>, r: f64, disc_sides: usize) -> Result<Vec<Polygon<f64>>> {
    let sides = disc_sides as f64;
    let rc = r / (std::f64::consts::PI / sides).cos();
    let disc: Vec<Point2<f64>> = (0..disc_sides)
        .map(|k| Point2::from_angle((k as f64 + 0.5) * std::f64::consts::TAU / sides) * rc)
        .collect();
    poly.edges()
        .map(|(a, b)| {
            let mut pts: Vec<Point2<f64>> = disc.iter().flat_map(|&d| [a + d, b + d]).collect();
            Polygon::new(convex_hull(&mut pts))
        })
        .collect()
}

/// Points of `poly` at least `r` from its boundary (up to the same polygonal
/// disc approximation as [`dilate_polygon`], so axis-aligned edges move in by
/// exactly `r`). A narrow waist can split the result into several pieces.
pub fn shrink_polygon<T: Real>(poly: &Polygon<T>, r: T, disc_sides: usize) -> Result<Vec<Polygon<T>>> {
    check_dilation(r.value(), disc_sides)?;
    if r.value() == 0.0 {
        return Ok(vec![poly.clone()]);
    }
    let base: Polygon<f64> = Polygon::new(poly.vertices().iter().map(|v| v.cast()).collect())?;
    let mut snap = Snapper::new();
    snap.add_ring(&base);
    let hulls = edge_hulls(&base, r.value(), disc_sides)?;
    hulls.iter().for_each(|h| snap.add_ring(h));
    let band = geo::unary_union(hulls.iter().map(to_geo).collect::<Vec<_>>().iter());
    let inner = MultiPolygon::new(vec![to_geo(&base)]).difference(&band);
    let out: Vec<Polygon<T>> = from_geo::<T>(&inner, &snap).into_iter().map(|r| r.outer).collect();
    if out.is_empty() {
        return Err(Error::EmptyResult);
    }
    Ok(out)
}

/// Andrew's monotone chain; returns the hull counter-clockwise.
pub(crate) fn convex_hull(pts: &mut [Point2<f64>]) -> Vec<Point2<f64>> {
    pts.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap().then(a.y.partial_cmp(&b.y).unwrap()));
    let mut hull: Vec<Point2<f64>> = Vec::with_capacity(pts.len() + 1);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point2<f64>>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 {
                let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
                if (b - a).cross(p - b) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Union of solid polygons. Overlapping inputs are merged; any holes that the
/// union encloses are filled.
pub fn union_polygons<T: Real>(polys: &[Polygon<T>]) -> Vec<Polygon<T>> {
    let geos: Vec<geo::Polygon<f64>> = polys.iter().map(to_geo).collect();
    let mut snap = Snapper::new();
    polys.iter().for_each(|p| snap.add_ring(p));
    let merged = geo::unary_union(geos.iter());
    let mut out: Vec<Polygon<T>> = from_geo::<T>(&merged, &snap).into_iter().map(|r| r.outer).collect();
    // Filling holes can leave a component nested in another's filled hole.
    let snapshot = out.clone();
    out.retain(|p| {
        !snapshot.iter().any(|q| {
            q != p && q.area() > p.area() && p.vertices().iter().all(|&v| super::polygon_contains(q, v))
        })
    });
    out
}

/// Union of regions, keeping holes.
pub fn union_regions<T: Real>(regions: &[Region<T>]) -> Vec<Region<T>> {
    let geos: Vec<geo::Polygon<f64>> = regions.iter().map(region_to_geo).collect();
    let mut snap = Snapper::new();
    for r in regions {
        snap.add_ring(&r.outer);
        r.holes.iter().for_each(|h| snap.add_ring(h));
    }
    from_geo(&geo::unary_union(geos.iter()), &snap)
}

fn halfplane_box(h: &HalfPlane<f64>, lo: Point2<f64>, hi: Point2<f64>) -> Polygon<f64> {
    let h = h.normalized();
    let center = lo.midpoint(hi);
    let foot = center - h.a * h.eval(center);
    let m = 2.0 * (hi.dist(lo) + h.eval(center).abs()) + 1.0;
    let t = h.a.perp();
    Polygon::new(vec![
        foot - t * m,
        foot - t * m - h.a * (2.0 * m),
        foot + t * m - h.a * (2.0 * m),
        foot + t * m,
    ])
    .expect("half-plane box is nondegenerate")
}

fn clip_components<T: Real>(region: &Region<T>, h: &HalfPlane<T>) -> Result<Vec<Region<T>>> {
    let hf = HalfPlane { a: h.a.cast::<f64>(), b: h.b.value() };
    if !(hf.a.norm() > 0.0) {
        return Err(invalid("half-plane normal must be nonzero"));
    }
    let (lo, hi) = region.outer.bounds();
    let bx = halfplane_box(&hf, lo.cast(), hi.cast());
    let out = region_to_geo(region).intersection(&to_geo(&bx));
    let mut snap = Snapper::new();
    snap.add_ring(&region.outer);
    region.holes.iter().for_each(|h| snap.add_ring(h));
    snap.widen(&bx);
    snap.add_line(hf);
    let parts = from_geo::<T>(&out, &snap);
    if parts.is_empty() {
        return Err(Error::EmptyResult);
    }
    Ok(parts)
}

/// `poly ∩ {a·x ≤ b}`. If the cut splits the polygon, the largest piece is
/// returned; see [`clip_region`] to choose the piece by a point instead.
pub fn clip_polygon<T: Real>(poly: &Polygon<T>, h: &HalfPlane<T>) -> Result<Polygon<T>> {
    let mut parts = clip_components(&Region::from(poly.clone()), h)?;
    parts.sort_by(|x, y| y.area().partial_cmp(&x.area()).unwrap());
    Ok(parts.swap_remove(0).outer)
}

/// `region ∩ {a·x ≤ b}`, keeping the connected piece that contains `keep`
/// (or the largest piece when none does).
pub fn clip_region<T: Real>(region: &Region<T>, h: &HalfPlane<T>, keep: Point2<T>) -> Result<Region<T>> {
    let mut parts = clip_components(region, h)?;
    if let Some(i) = parts.iter().position(|p| p.contains(keep)) {
        return Ok(parts.swap_remove(i));
    }
    parts.sort_by(|x, y| y.area().partial_cmp(&x.area()).unwrap());
    Ok(parts.swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Point2<f64> {
        Point2::new(x, y)
    }

    #[test]
    fn hull_of_square_with_interior_point() {
        let mut pts = vec![p(0.0, 0.0), p(1.0, 0.0), p(0.5, 0.5), p(1.0, 1.0), p(0.0, 1.0), p(0.5, 0.0)];
        let h = convex_hull(&mut pts);
        assert_eq!(h.len(), 4);
        assert!(signed_area(&h) > 0.0);
    }

    #[test]
    fn overlapping_union_area() {
        let a = Polygon::rectangle(p(0.0, 0.0), p(1.0, 1.0)).unwrap();
        let b = Polygon::rectangle(p(0.5, 0.0), p(1.5, 1.0)).unwrap();
        let u = union_polygons(&[a, b]);
        assert_eq!(u.len(), 1);
        assert!((u[0].area() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn ring_of_squares_is_filled() {
        let mut ring = Vec::new();
        for (x0, y0, x1, y1) in [(0.0, 0.0, 3.0, 1.0), (2.0, 0.0, 3.0, 3.0), (0.0, 2.0, 3.0, 3.0), (0.0, 0.0, 1.0, 3.0)] {
            ring.push(Polygon::rectangle(p(x0, y0), p(x1, y1)).unwrap());
        }
        let u = union_polygons(&ring);
        assert_eq!(u.len(), 1);
        assert!((u[0].area() - 9.0).abs() < 1e-9);
    }
}
