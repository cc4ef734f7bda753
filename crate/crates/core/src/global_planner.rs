//! Offline planning: shortest path among dilated obstacles, a convex
//! free-space corridor around every path segment and a smooth reference curve
//! that stays inside the corridors.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geom2d::{
    clip_region, dilate_polygon, ellipse_tangent_halfplane, fit_ellipse_minor_axis,
    mutually_visible, polygon_contains, shrink_polygon, union_polygons, union_regions,
    visibility_polygon, Ellipse, HalfPlane, Point2, Polygon, Region, EPS,
};
use crate::Real;

/// Sides of the polygon that approximates the dilation disc.
pub const DISC_SIDES: usize = 16;

/// Workspace with static obstacles and the transport task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub boundary: Polygon<f64>,
    pub obstacles: Vec<Polygon<f64>>,
    pub start: Point2<f64>,
    pub goal: Point2<f64>,
}

impl Environment {
    /// Whether `p` is inside the boundary and outside every obstacle interior.
    pub fn is_free(&self, p: Point2<f64>) -> bool {
        polygon_contains(&self.boundary, p) && !self.obstacles.iter().any(|o| o.contains_strict(p))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("start", self.start), ("goal", self.goal)] {
            if !p.is_finite() || !self.is_free(p) {
                return Err(Error::InfeasibleEndpoint(format!("{name} ({}, {}) is not in free space", p.x, p.y)));
            }
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !o.vertices().iter().all(|&v| polygon_contains(&self.boundary, v)) {
                return Err(invalid(format!("obstacle {i} leaves the workspace boundary")));
            }
        }
        Ok(())
    }
}

/// Obstacles grown by the formation radius and the boundary shrunk by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilatedMap {
    pub boundary: Polygon<f64>,
    pub obstacles: Vec<Polygon<f64>>,
}

/// Dilates every obstacle by `r_f`, merges overlapping ones and shrinks the
/// boundary by `r_f`. When the shrunk boundary falls apart the piece holding
/// the start is kept.
pub fn build_dilated_map(env: &Environment, r_f: f64) -> Result<DilatedMap> {
    if !(r_f > 0.0) {
        return Err(invalid(format!("formation radius must be positive, got {r_f}")));
    }
    let grown: Vec<Polygon<f64>> = env
        .obstacles
        .iter()
        .map(|o| dilate_polygon(o, r_f, DISC_SIDES))
        .collect::<Result<_>>()?;
    let obstacles = union_polygons(&grown);
    let pieces = shrink_polygon(&env.boundary, r_f, DISC_SIDES).map_err(|_| {
        Error::InfeasibleEndpoint(format!("workspace is narrower than twice the formation radius {r_f}"))
    })?;
    let boundary = pieces
        .into_iter()
        .find(|b| polygon_contains(b, env.start))
        .ok_or_else(|| Error::InfeasibleEndpoint("start is within the formation radius of the boundary".into()))?;
    for (name, p) in [("start", env.start), ("goal", env.goal)] {
        if !polygon_contains(&boundary, p) {
            return Err(Error::InfeasibleEndpoint(format!("{name} is not reachable inside the shrunk boundary")));
        }
        if let Some(i) = obstacles.iter().position(|o| o.contains_strict(p)) {
            return Err(Error::InfeasibleEndpoint(format!("{name} is covered by dilated obstacle {i}")));
        }
    }
    Ok(DilatedMap { boundary, obstacles })
}

/// Graph over the free vertices of a dilated map plus start and goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityGraph {
    /// Node 0 is the start, node 1 the goal.
    pub nodes: Vec<Point2<f64>>,
    /// `(i, j, length)` with `i < j`.
    pub edges: Vec<(usize, usize, f64)>,
}

impl VisibilityGraph {
    pub fn build(map: &DilatedMap, start: Point2<f64>, goal: Point2<f64>) -> Self {
        let mut nodes = vec![start, goal];
        let free = |v: Point2<f64>| {
            polygon_contains(&map.boundary, v) && !map.obstacles.iter().any(|o| o.contains_strict(v))
        };
        for v in map.obstacles.iter().chain(std::iter::once(&map.boundary)).flat_map(|p| p.vertices().iter().copied()) {
            if free(v) && !nodes.iter().any(|n| n.dist(v) <= EPS) {
                nodes.push(v);
            }
        }
        let mut edges = Vec::new();
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                let (p, q) = (nodes[i], nodes[j]);
                if p.dist(q) > EPS && mutually_visible(p, q, &map.obstacles, &map.boundary) {
                    edges.push((i, j, p.dist(q)));
                }
            }
        }
        Self { nodes, edges }
    }

    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(i, j, w) in &self.edges {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
        adj.iter_mut().for_each(|a| a.sort_by_key(|e| e.0));
        adj
    }

    /// Shortest node sequence from start to goal. Among equally short paths
    /// the one with the lexicographically smallest node indices is returned.
    pub fn shortest_path(&self) -> Option<Vec<usize>> {
        let adj = self.adjacency();
        let to_goal = dijkstra(&adj, 1);
        if !to_goal[0].is_finite() {
            return None;
        }
        let mut path = vec![0];
        let mut u = 0;
        while u != 1 {
            let tol = 1e-9 * (1.0 + to_goal[u]);
            u = adj[u]
                .iter()
                .find(|&&(v, w)| (w + to_goal[v] - to_goal[u]).abs() <= tol && to_goal[v] < to_goal[u])
                .map(|&(v, _)| v)?;
            path.push(u);
        }
        Some(path)
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

fn dijkstra(adj: &[Vec<(usize, f64)>], src: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    dist[src] = 0.0;
    let mut heap = BinaryHeap::from([Entry(0.0, src)]);
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            if d + w < dist[v] {
                dist[v] = d + w;
                heap.push(Entry(d + w, v));
            }
        }
    }
    dist
}

/// Shortest piecewise-linear path from start to goal for a formation that
/// fits in a circle of radius `r_f`.
pub fn plan_shortest_path(env: &Environment, r_f: f64) -> Result<Vec<Point2<f64>>> {
    env.validate()?;
    let map = build_dilated_map(env, r_f)?;
    let graph = VisibilityGraph::build(&map, env.start, env.goal);
    let idx = graph.shortest_path().ok_or(Error::NoPath)?;
    Ok(idx.into_iter().map(|i| graph.nodes[i]).collect())
}

/// Free region around path segment `seg_index`: the union of what the two
/// segment endpoints see among the undilated obstacles.
pub fn segment_concave_polygon(seg_index: usize, path: &[Point2<f64>], env: &Environment) -> Result<Region<f64>> {
    if seg_index + 1 >= path.len() {
        return Err(invalid(format!("segment {seg_index} does not exist on a path of {} vertices", path.len())));
    }
    let (p, q) = (path[seg_index], path[seg_index + 1]);
    let vp = visibility_polygon(p, &env.obstacles, &env.boundary)?;
    let vq = visibility_polygon(q, &env.obstacles, &env.boundary)?;
    let parts = union_regions(&[Region::from(vp), Region::from(vq)]);
    let mid = p.midpoint(q);
    parts
        .into_iter()
        .find(|r| r.contains(mid))
        .ok_or_else(|| invalid(format!("segment {seg_index} is not covered by its endpoint visibility")))
}

/// Convex polygon `{x : A x ≤ b}` with unit-length rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexRegion {
    pub a: Vec<[f64; 2]>,
    pub b: Vec<f64>,
    /// Corner points, counter-clockwise.
    pub vertices: Vec<Point2<f64>>,
}

impl ConvexRegion {
    pub fn from_polygon(poly: &Polygon<f64>) -> Self {
        let hs = poly.half_planes();
        Self {
            a: hs.iter().map(|h| [h.a.x, h.a.y]).collect(),
            b: hs.iter().map(|h| h.b).collect(),
            vertices: poly.vertices().to_vec(),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = HalfPlane<f64>> + '_ {
        self.a.iter().zip(&self.b).map(|(a, &b)| HalfPlane { a: Point2::new(a[0], a[1]), b })
    }

    /// `min_j (b_j − a_jᵀ p)`: the distance from `p` to the nearest edge line,
    /// negative outside.
    pub fn slack<T: Real>(&self, p: Point2<T>) -> T {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(a, &b)| T::lit(b) - T::lit(a[0]) * p.x - T::lit(a[1]) * p.y)
            .fold(T::infinity(), |m, s| m.min(s))
    }

    pub fn contains(&self, p: Point2<f64>) -> bool {
        self.slack(p) >= -EPS
    }

    pub fn polygon(&self) -> Result<Polygon<f64>> {
        Polygon::new(self.vertices.clone())
    }
}

/// One path segment with its free region and the convex corridor cut from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSegmentPolygon {
    pub segment: (Point2<f64>, Point2<f64>),
    pub concave: Region<f64>,
    pub convex: ConvexRegion,
}

/// What the convexification loop did, for inspection and testing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvexifyTrace {
    /// Number of reflex vertices before the first cut and after every cut.
    pub reflex_counts: Vec<usize>,
    pub cuts: Vec<HalfPlane<f64>>,
    pub touched: Vec<Point2<f64>>,
    /// Growth ellipse behind each cut; `None` for a fallback cut.
    pub ellipses: Vec<Option<Ellipse<f64>>>,
}

fn region_holds_segment(region: &Region<f64>, p: Point2<f64>, q: Point2<f64>) -> bool {
    let near = |x: Point2<f64>| {
        region.contains(x)
            || region.outer.boundary_distance(x) <= 1e-7
            || region.holes.iter().any(|h| h.boundary_distance(x) <= 1e-7)
    };
    (0..=8).all(|k| near(p.lerp(q, k as f64 / 8.0)))
}

/// Cuts reflex vertices off `concave` with tangents of an ellipse grown about
/// the segment until the remaining polygon is convex.
pub fn convexify(concave: &Region<f64>, segment: (Point2<f64>, Point2<f64>), r_f: f64) -> Result<ConvexRegion> {
    convexify_traced(concave, segment, r_f).map(|(c, _)| c)
}

/// [`convexify`], also returning the sequence of cuts.
pub fn convexify_traced(
    concave: &Region<f64>,
    segment: (Point2<f64>, Point2<f64>),
    r_f: f64,
) -> Result<(ConvexRegion, ConvexifyTrace)> {
    let (p, q) = segment;
    if !region_holds_segment(concave, p, q) {
        return Err(invalid("segment is not contained in the polygon"));
    }
    let mut poly = concave.clone();
    let mut reflex = poly.reflex_vertices();
    let mut trace = ConvexifyTrace { reflex_counts: vec![reflex.len()], ..Default::default() };
    if reflex.is_empty() && poly.holes.is_empty() {
        return Ok((ConvexRegion::from_polygon(&poly.outer), trace));
    }

    let d = p.midpoint(q);
    let len = p.dist(q);
    let dir = if len > EPS { (q - p) * (1.0 / len) } else { Point2::new(1.0, 0.0) };
    let theta = dir.y.atan2(dir.x);
    let a = 0.5 * len + r_f;
    let to_axes = |x: Point2<f64>| {
        let r = x - d;
        (dir.dot(r), dir.cross(r))
    };

    let mut kappa0: Option<Ellipse<f64>> = None;
    let max_iter = 4 * reflex.len() + 16;
    while !reflex.is_empty() {
        if trace.cuts.len() >= max_iter {
            return Err(invalid(format!("convexification did not converge after {max_iter} cuts")));
        }
        let (x_star, kappa, cut) = match kappa0 {
            None => {
                // Seed ellipse: the minor axis grows until it first touches a reflex vertex.
                let seed = reflex
                    .iter()
                    .filter_map(|&v| {
                        let (u1, u2) = to_axes(v);
                        (u1.abs() < a).then(|| (u2.abs() / (1.0 - (u1 / a).powi(2)).sqrt(), v))
                    })
                    .min_by(|x, y| x.0.total_cmp(&y.0));
                match seed {
                    Some((_, v)) => match fit_ellipse_minor_axis(theta, a, d, v) {
                        Ok(k) => {
                            kappa0 = Some(k);
                            (v, Some(k), ellipse_tangent_halfplane(&k, v)?.normalized())
                        }
                        Err(Error::DegenerateFit(_)) => {
                            // Vertex on the major-axis line: cut perpendicular to the segment there.
                            let n = if to_axes(v).0 >= 0.0 { dir } else { -dir };
                            (v, None, HalfPlane { a: n, b: n.dot(v) })
                        }
                        Err(e) => return Err(e),
                    },
                    None => {
                        // Every reflex vertex lies beyond the ends of the major axis.
                        kappa0 = Some(Ellipse::from_axes(theta, a, r_f.min(a), d)?);
                        continue;
                    }
                }
            }
            Some(k0) => {
                // The scaled seed ellipse first touches the vertex of least level.
                let v = *reflex.iter().min_by(|x, y| k0.level(**x).total_cmp(&k0.level(**y))).expect("nonempty");
                let k = k0.scaled(k0.level(v).max(1.0));
                (v, Some(k), ellipse_tangent_halfplane(&k, v)?.normalized())
            }
        };
        poly = clip_region(&poly, &cut, d)?;
        trace.cuts.push(cut);
        trace.touched.push(x_star);
        trace.ellipses.push(kappa);
        // A vertex on any cut line is no longer reflex; drop it despite round-off.
        reflex = poly
            .reflex_vertices()
            .into_iter()
            .filter(|&v| !trace.cuts.iter().any(|h| h.eval(v).abs() <= 1e-7))
            .collect();
        trace.reflex_counts.push(reflex.len());
    }
    if !poly.holes.is_empty() {
        return Err(invalid("convexification left a hole in the corridor"));
    }
    let outer = poly.outer.simplified()?;
    Ok((ConvexRegion::from_polygon(&outer), trace))
}

/// Path vertices plus one point per corridor change, placed on the outgoing
/// segment at the middle of its stretch inside both corridors, so that
/// every three consecutive control points share one corridor.
pub fn insert_control_points(path: &[Point2<f64>], corridors: &[ConvexRegion]) -> Result<Vec<Point2<f64>>> {
    if path.len() < 2 || corridors.len() != path.len() - 1 {
        return Err(invalid(format!("{} path vertices need {} corridors, got {}", path.len(), path.len().saturating_sub(1), corridors.len())));
    }
    let mut out = vec![path[0], path[1]];
    for i in 0..corridors.len() - 1 {
        let (w, next) = (path[i + 1], path[i + 2]);
        let (lo, hi) = [&corridors[i], &corridors[i + 1]]
            .iter()
            .fold((0.0f64, 1.0f64), |(lo, hi), c| {
                let (l, h) = chord_interval(c, w, next);
                (lo.max(l), hi.min(h))
            });
        if lo > EPS || hi - lo <= EPS {
            return Err(Error::CorridorGap(i, i + 1));
        }
        out.push(w.lerp(next, 0.5 * (lo + hi)));
        out.push(next);
    }
    Ok(out)
}

/// Parameter range `[lo, hi]` of the line `w + t (next − w)` inside `c`,
/// empty (`lo > hi`) when the line misses it.
fn chord_interval(c: &ConvexRegion, w: Point2<f64>, next: Point2<f64>) -> (f64, f64) {
    let dvec = next - w;
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for h in c.rows() {
        let rate = h.a.dot(dvec);
        let slack = h.b - h.a.dot(w);
        if rate.abs() <= 1e-15 {
            if slack < -EPS {
                return (1.0, 0.0);
            }
        } else if rate > 0.0 {
            hi = hi.min(slack / rate);
        } else {
            lo = lo.max(slack / rate);
        }
    }
    (lo, hi)
}

/// Quadratic Bézier spline through the midpoints of the control polygon,
/// starting at the first and ending at the last control point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    /// Control triples `(start, handle, end)` of every piece.
    pub pieces: Vec<[Point2<f64>; 3]>,
}

/// Builds the reference curve from the control points.
pub fn smooth_reference(control_points: &[Point2<f64>]) -> Result<Reference> {
    let c = control_points;
    match c.len() {
        0 | 1 => Err(invalid("a reference needs at least two control points")),
        2 => Ok(Reference { pieces: vec![[c[0], c[0].midpoint(c[1]), c[1]]] }),
        n => {
            let pieces = (0..n - 2)
                .map(|j| {
                    let s = if j == 0 { c[0] } else { c[j].midpoint(c[j + 1]) };
                    let e = if j == n - 3 { c[n - 1] } else { c[j + 1].midpoint(c[j + 2]) };
                    [s, c[j + 1], e]
                })
                .collect();
            Ok(Reference { pieces })
        }
    }
}

/// Samples per piece used to bracket arc-length queries.
const BRACKET_SAMPLES: usize = 64;

impl Reference {
    pub fn start(&self) -> Point2<f64> {
        self.pieces[0][0]
    }

    pub fn end(&self) -> Point2<f64> {
        self.pieces[self.pieces.len() - 1][2]
    }

    /// `p_r(c)` for `c ∈ [0, 1]`, each piece taking an equal share of `c`.
    pub fn eval(&self, c: f64) -> Point2<f64> {
        let n = self.pieces.len();
        let s = c.clamp(0.0, 1.0) * n as f64;
        let j = (s.floor() as usize).min(n - 1);
        let t = s - j as f64;
        let [p0, p1, p2] = self.pieces[j];
        let u = 1.0 - t;
        p0 * (u * u) + p1 * (2.0 * u * t) + p2 * (t * t)
    }

    /// Derivative of [`Reference::eval`] with respect to `c`.
    pub fn tangent(&self, c: f64) -> Point2<f64> {
        let n = self.pieces.len();
        let s = c.clamp(0.0, 1.0) * n as f64;
        let j = (s.floor() as usize).min(n - 1);
        let t = s - j as f64;
        let [p0, p1, p2] = self.pieces[j];
        ((p1 - p0) * (1.0 - t) + (p2 - p1) * t) * (2.0 * n as f64)
    }

    pub fn sample(&self, count: usize) -> Vec<Point2<f64>> {
        let last = count.saturating_sub(1).max(1) as f64;
        (0..count).map(|k| self.eval(k as f64 / last)).collect()
    }

    /// Approximate arc length from a dense polyline.
    pub fn length(&self) -> f64 {
        self.sample(self.pieces.len() * BRACKET_SAMPLES + 1).windows(2).map(|w| w[0].dist(w[1])).sum()
    }
}

/// Points along `p_r` with consecutive chords of exactly `v_op · t_c`, ending
/// at the curve end with one shorter final step.
pub fn discretize_reference(reference: &Reference, v_op: f64, t_c: f64) -> Result<Vec<Point2<f64>>> {
    if !(v_op > 0.0 && t_c > 0.0) {
        return Err(invalid(format!("v_op and T_c must be positive, got {v_op} and {t_c}")));
    }
    let step = v_op * t_c;
    let end = reference.end();
    let grid = reference.pieces.len() * BRACKET_SAMPLES;
    let dc = 1.0 / grid as f64;
    let mut out = vec![reference.start()];
    let (mut c, mut cur) = (0.0f64, reference.start());
    let mut k = 0usize;
    loop {
        // March along the grid to the first sample at least `step` away.
        let mut hit = None;
        while k < grid {
            k += 1;
            if reference.eval(k as f64 * dc).dist(cur) >= step {
                hit = Some(k as f64 * dc);
                break;
            }
        }
        let Some(mut hi) = hit else { break };
        let mut lo = c.max(hi - dc);
        for _ in 0..60 {
            let m = 0.5 * (lo + hi);
            if reference.eval(m).dist(cur) >= step {
                hi = m;
            } else {
                lo = m;
            }
        }
        let (lo_p, hi_p) = (reference.eval(lo), reference.eval(hi));
        // Place the point on the bracketing chord at exactly `step` from `cur`.
        let next = circle_segment_point(cur, step, lo_p, hi_p).unwrap_or(hi_p);
        c = hi;
        k = (c / dc).floor() as usize;
        cur = next;
        out.push(cur);
    }
    if cur.dist(end) <= 1e-9 * (1.0 + step) {
        *out.last_mut().expect("nonempty") = end;
    } else {
        out.push(end);
    }
    Ok(out)
}

/// Point on segment `[a, b]` at distance `r` from `center`, nearest to `b`.
fn circle_segment_point(center: Point2<f64>, r: f64, a: Point2<f64>, b: Point2<f64>) -> Option<Point2<f64>> {
    let d = b - a;
    let f = a - center;
    let (qa, qb, qc) = (d.dot(d), 2.0 * f.dot(d), f.dot(f) - r * r);
    if qa <= 0.0 {
        return None;
    }
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return None;
    }
    let t = (-qb + disc.sqrt()) / (2.0 * qa);
    (-1e-9..=1.0 + 1e-9).contains(&t).then(|| a + d * t.clamp(0.0, 1.0))
}

/// Result of the offline pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalPlan {
    pub r_f: f64,
    pub path: Vec<Point2<f64>>,
    pub segments: Vec<PathSegmentPolygon>,
    pub control_points: Vec<Point2<f64>>,
    pub reference: Reference,
}

impl GlobalPlan {
    pub fn corridors(&self) -> Vec<ConvexRegion> {
        self.segments.iter().map(|s| s.convex.clone()).collect()
    }
}

/// Runs the whole offline pipeline.
pub fn plan_global(env: &Environment, r_f: f64) -> Result<GlobalPlan> {
    let path = plan_shortest_path(env, r_f)?;
    let mut segments = Vec::with_capacity(path.len() - 1);
    for i in 0..path.len() - 1 {
        let concave = segment_concave_polygon(i, &path, env)?;
        let segment = (path[i], path[i + 1]);
        let convex = convexify(&concave, segment, r_f)?;
        segments.push(PathSegmentPolygon { segment, concave, convex });
    }
    let corridors: Vec<ConvexRegion> = segments.iter().map(|s| s.convex.clone()).collect();
    let control_points = insert_control_points(&path, &corridors)?;
    let reference = smooth_reference(&control_points)?;
    Ok(GlobalPlan { r_f, path, segments, control_points, reference })
}
