//! Brute-force oracles and scene generators shared by the integration tests.
//! Nothing here calls into the library's own predicates.
#![allow(dead_code)]

use mmr_planner::geom2d::{Point2, Polygon};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type P = Point2<f64>;

pub fn p(x: f64, y: f64) -> P {
    Point2::new(x, y)
}

pub fn orient(a: P, b: P, c: P) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Winding number of a closed vertex ring about `q`.
pub fn winding(v: &[P], q: P) -> i32 {
    let n = v.len();
    let mut w = 0;
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        if a.y <= q.y {
            if b.y > q.y && orient(a, b, q) > 0.0 {
                w += 1;
            }
        } else if b.y <= q.y && orient(a, b, q) < 0.0 {
            w -= 1;
        }
    }
    w
}

pub fn seg_dist(q: P, a: P, b: P) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let l2 = dx * dx + dy * dy;
    let t = if l2 == 0.0 { 0.0 } else { (((q.x - a.x) * dx + (q.y - a.y) * dy) / l2).clamp(0.0, 1.0) };
    ((q.x - a.x - t * dx).powi(2) + (q.y - a.y - t * dy).powi(2)).sqrt()
}

pub fn ring_dist(v: &[P], q: P) -> f64 {
    (0..v.len()).map(|i| seg_dist(q, v[i], v[(i + 1) % v.len()])).fold(f64::INFINITY, f64::min)
}

/// Inside by winding number and at least `margin` from the boundary.
pub fn deep_inside(v: &[P], q: P, margin: f64) -> bool {
    winding(v, q) != 0 && ring_dist(v, q) > margin
}

/// Inside or within `tol` of the boundary.
pub fn inside_or_near(v: &[P], q: P, tol: f64) -> bool {
    winding(v, q) != 0 || ring_dist(v, q) <= tol
}

/// Segment visibility by proper edge crossings plus dense interior sampling.
pub fn oracle_clear(a: P, b: P, obstacles: &[Polygon<f64>], boundary: &Polygon<f64>) -> bool {
    let rings = obstacles.iter().map(|o| o.vertices()).chain(std::iter::once(boundary.vertices()));
    for v in rings {
        for i in 0..v.len() {
            let (c, d) = (v[i], v[(i + 1) % v.len()]);
            let (o1, o2) = (orient(a, b, c), orient(a, b, d));
            let (o3, o4) = (orient(c, d, a), orient(c, d, b));
            let tol = 1e-12;
            if (o1 > tol && o2 < -tol || o1 < -tol && o2 > tol) && (o3 > tol && o4 < -tol || o3 < -tol && o4 > tol) {
                return false;
            }
        }
    }
    let n = 4000;
    for k in 1..n {
        let t = k as f64 / n as f64;
        let q = p(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t);
        if obstacles.iter().any(|o| deep_inside(o.vertices(), q, 1e-7)) {
            return false;
        }
        if !inside_or_near(boundary.vertices(), q, 1e-7) {
            return false;
        }
    }
    true
}

/// Star-shaped polygon around `c` with `k` vertices and radii in `[r_lo, r_hi]`.
pub fn random_star(rng: &mut ChaCha8Rng, c: P, k: usize, r_lo: f64, r_hi: f64) -> Polygon<f64> {
    loop {
        let mut ang: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        ang.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gaps_ok = (0..k).all(|i| {
            let next = if i + 1 < k { ang[i + 1] } else { ang[0] + std::f64::consts::TAU };
            next - ang[i] > 0.2 && next - ang[i] < 2.8
        });
        if !gaps_ok {
            continue;
        }
        let v: Vec<P> = ang
            .iter()
            .map(|&t| {
                let r = rng.gen_range(r_lo..r_hi);
                p(c.x + r * t.cos(), c.y + r * t.sin())
            })
            .collect();
        if let Ok(poly) = Polygon::new(v) {
            return poly;
        }
    }
}

/// Random scene in `[0, 10]²`: up to three star obstacles in separate cells,
/// at most `max_vertices` obstacle vertices in total.
pub fn random_scene(rng: &mut ChaCha8Rng, max_vertices: usize) -> (Vec<Polygon<f64>>, Polygon<f64>) {
    let boundary = Polygon::rectangle(p(0.0, 0.0), p(10.0, 10.0)).unwrap();
    let cells = [(2.5, 2.5), (7.5, 2.5), (2.5, 7.5), (7.5, 7.5)];
    let count = rng.gen_range(1..=3usize);
    let mut used = 0;
    let mut obstacles = Vec::new();
    let mut order: Vec<usize> = (0..4).collect();
    for i in (1..4).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    for &ci in order.iter().take(count) {
        let left = max_vertices - used;
        if left < 3 {
            break;
        }
        let k = rng.gen_range(3..=left.min(6));
        used += k;
        let (cx, cy) = cells[ci];
        let c = p(cx + rng.gen_range(-0.8..0.8), cy + rng.gen_range(-0.8..0.8));
        obstacles.push(random_star(rng, c, k, 0.5, 1.6));
    }
    (obstacles, boundary)
}

pub fn free_point(rng: &mut ChaCha8Rng, obstacles: &[Polygon<f64>]) -> P {
    loop {
        let q = p(rng.gen_range(0.2..9.8), rng.gen_range(0.2..9.8));
        if obstacles.iter().all(|o| winding(o.vertices(), q) == 0 && ring_dist(o.vertices(), q) > 1e-3) {
            return q;
        }
    }
}

/// Interior angle at each vertex of a counter-clockwise ring, in `(0, 2π)`.
pub fn interior_angles(v: &[P]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (a, b, c) = (v[(i + n - 1) % n], v[i], v[(i + 1) % n]);
            let back = (a.y - b.y).atan2(a.x - b.x);
            let fwd = (c.y - b.y).atan2(c.x - b.x);
            // Interior lies to the left when walking counter-clockwise.
            let mut ang = back - fwd;
            while ang <= 0.0 {
                ang += std::f64::consts::TAU;
            }
            while ang >= std::f64::consts::TAU {
                ang -= std::f64::consts::TAU;
            }
            ang
        })
        .collect()
}

/// Monte-Carlo area of `{q : inside(q)}` over the box `[lo, hi]`.
pub fn mc_area(rng: &mut ChaCha8Rng, lo: P, hi: P, n: usize, inside: impl Fn(P) -> bool) -> f64 {
    let hits = (0..n)
        .filter(|_| inside(p(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y))))
        .count();
    (hi.x - lo.x) * (hi.y - lo.y) * hits as f64 / n as f64
}
