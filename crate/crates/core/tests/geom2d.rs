mod common;

use approx::assert_relative_eq;
use common::*;
use mmr_planner::geom2d::*;
use mmr_planner::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn square(x0: f64, y0: f64, s: f64) -> Polygon<f64> {
    Polygon::rectangle(p(x0, y0), p(x0 + s, y0 + s)).unwrap()
}

fn segment_meets_convex(a: P, b: P, poly: &[P]) -> bool {
    if winding(poly, a) != 0 || winding(poly, b) != 0 {
        return true;
    }
    (0..poly.len()).any(|i| {
        let (c, d) = (poly[i], poly[(i + 1) % poly.len()]);
        orient(a, b, c) * orient(a, b, d) <= 0.0 && orient(c, d, a) * orient(c, d, b) <= 0.0
    })
}

/// `q ∈ P ⊕ D` for a convex `P` given as vertex ring: some edge of `P`, or
/// `P` itself, meets `q − D`.
fn in_minkowski(q: P, poly: &[P], disc: &[P]) -> bool {
    if winding(poly, q) != 0 {
        return true;
    }
    let shifted: Vec<P> = disc.iter().map(|d| p(q.x - d.x, q.y - d.y)).collect();
    let mut shifted = shifted;
    shifted.reverse();
    (0..poly.len()).any(|i| segment_meets_convex(poly[i], poly[(i + 1) % poly.len()], &shifted))
}

#[test]
fn dilation_identity_at_zero_radius() {
    let sq = square(0.0, 0.0, 1.0);
    assert_eq!(dilate_polygon(&sq, 0.0, 16).unwrap(), sq);
    assert!(matches!(dilate_polygon(&sq, -0.1, 16), Err(Error::InvalidInput(_))));
    assert!(matches!(dilate_polygon(&sq, 0.1, 6), Err(Error::InvalidInput(_))));
}

#[test]
fn dilated_square_area_matches_minkowski_formula_and_sampling() {
    let sq = square(0.0, 0.0, 1.0);
    let r = 0.1;
    let n = 16.0;
    let disc_area = n * r * r * (std::f64::consts::PI / n).tan();
    let expected = 1.0 + 4.0 * r + disc_area;
    let dil = dilate_polygon(&sq, r, 16).unwrap();
    assert_relative_eq!(dil.area(), expected, max_relative = 1e-9);

    let rc = r / (std::f64::consts::PI / n).cos();
    let disc: Vec<P> = (0..16)
        .map(|k| {
            let t = (k as f64 + 0.5) * std::f64::consts::TAU / n;
            p(rc * t.cos(), rc * t.sin())
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..20_000 {
        let q = p(rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2));
        let oracle = in_minkowski(q, sq.vertices(), &disc);
        let lib = polygon_contains(&dil, q);
        if oracle != lib && ring_dist(dil.vertices(), q) > 1e-9 {
            mismatches += 1;
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn dilated_thin_rectangle_covers_distance_band() {
    let thin = Polygon::rectangle(p(0.0, 0.0), p(2.0, 0.01)).unwrap();
    let r = 0.25;
    let dil = dilate_polygon(&thin, r, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5000 {
        let q = p(rng.gen_range(-0.4..2.4), rng.gen_range(-0.4..0.41));
        if ring_dist(thin.vertices(), q) <= r || winding(thin.vertices(), q) != 0 {
            assert!(polygon_contains(&dil, q), "{q:?}");
        }
    }
}

#[test]
fn union_examples() {
    let a = square(0.0, 0.0, 1.0);
    let b = square(3.0, 0.0, 1.0);
    let u = union_polygons(&[a.clone(), b.clone()]);
    assert_eq!(u.len(), 2);
    let total: f64 = u.iter().map(|x| x.area()).sum();
    assert_relative_eq!(total, 2.0, max_relative = 1e-12);

    let u = union_polygons(&[a.clone(), a.clone()]);
    assert_eq!(u.len(), 1);
    assert_relative_eq!(u[0].area(), 1.0, max_relative = 1e-12);

    let c = square(0.5, 0.0, 1.0);
    let u = union_polygons(&[a, c]);
    assert_eq!(u.len(), 1);
    // Inclusion–exclusion: 1 + 1 − 0.5.
    assert_relative_eq!(u[0].area(), 1.5, max_relative = 1e-12);
}

#[test]
fn visible_vertices_examples() {
    let boundary = Polygon::rectangle(p(0.0, 0.0), p(10.0, 10.0)).unwrap();
    let v = visible_vertices(p(3.0, 4.0), &[], &boundary).unwrap();
    assert_eq!(v.len(), 4);

    let obstacle = Polygon::rectangle(p(4.0, 4.0), p(5.0, 5.0)).unwrap();
    let from = p(2.0, 4.5);
    let obs = [obstacle];
    let seen = visible_vertices(from, &obs, &boundary).unwrap();
    assert!(seen.contains(&p(4.0, 4.0)) && seen.contains(&p(4.0, 5.0)));
    assert!(!seen.contains(&p(5.0, 4.0)) && !seen.contains(&p(5.0, 5.0)));
    assert!(visible_vertices(p(4.5, 4.5), &obs, &boundary).is_err());
}

#[test]
fn mutual_visibility_examples() {
    let boundary = Polygon::rectangle(p(0.0, 0.0), p(10.0, 10.0)).unwrap();
    assert!(mutually_visible(p(1.0, 1.0), p(9.0, 8.0), &[], &boundary));
    let obs = [Polygon::rectangle(p(4.0, 4.0), p(5.0, 5.0)).unwrap()];
    assert!(!mutually_visible(p(3.0, 4.5), p(6.0, 4.5), &obs, &boundary));
    // Running along an obstacle edge, and grazing a corner, are both visible.
    assert!(mutually_visible(p(3.0, 4.0), p(6.0, 4.0), &obs, &boundary));
    assert!(mutually_visible(p(3.0, 3.0), p(6.0, 6.0 - 0.0), &obs, &boundary) == oracle_clear(p(3.0, 3.0), p(6.0, 6.0), &obs, &boundary));
    assert!(mutually_visible(p(3.0, 5.0), p(4.0, 6.0), &obs, &boundary));
}

#[test]
fn visibility_matches_brute_force_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..60 {
        let (obs, boundary) = random_scene(&mut rng, 12);
        let mut queries: Vec<P> = (0..3).map(|_| free_point(&mut rng, &obs)).collect();
        queries.extend(obs.iter().flat_map(|o| o.vertices().iter().copied()));
        let targets: Vec<P> =
            obs.iter().chain([&boundary]).flat_map(|o| o.vertices().iter().copied()).collect();
        for &q in &queries {
            let got = visible_vertices(q, &obs, &boundary).unwrap();
            for &t in &targets {
                if t == q {
                    continue;
                }
                assert_eq!(got.contains(&t), oracle_clear(q, t, &obs, &boundary), "{q:?} -> {t:?}");
                assert_eq!(mutually_visible(q, t, &obs, &boundary), mutually_visible(t, q, &obs, &boundary));
            }
        }
    }
}

#[test]
fn visibility_polygon_lies_in_free_space_and_sees_its_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..30 {
        let (obs, boundary) = random_scene(&mut rng, 12);
        let q = free_point(&mut rng, &obs);
        let vis = visibility_polygon(q, &obs, &boundary).unwrap();
        for _ in 0..300 {
            let s = p(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
            if vis.contains_strict(s) && ring_dist(vis.vertices(), s) > 1e-6 {
                assert!(obs.iter().all(|o| !deep_inside(o.vertices(), s, 1e-9)));
                assert!(oracle_clear(q, s, &obs, &boundary), "{q:?} {s:?}");
            } else if ring_dist(vis.vertices(), s) > 1e-5 {
                assert!(!oracle_clear(q, s, &obs, &boundary), "{q:?} misses visible {s:?}");
            }
        }
    }
}

#[test]
fn ellipse_tangent_examples() {
    let unit = Ellipse::circle(p(0.0, 0.0), 1.0).unwrap();
    let h = ellipse_tangent_halfplane(&unit, p(1.0, 0.0)).unwrap();
    assert_relative_eq!(h.a.x, 2.0);
    assert_relative_eq!(h.a.y, 0.0);
    assert_relative_eq!(h.b, 2.0);
    let h = ellipse_tangent_halfplane(&unit, p(0.0, -1.0)).unwrap();
    assert_relative_eq!(h.a.y, -2.0);
    assert_relative_eq!(h.b, 2.0);
    assert!(ellipse_tangent_halfplane(&unit, p(0.5, 0.0)).is_err());

    let e = Ellipse::new([[2.0, 0.0], [0.0, 1.0]], p(1.0, 0.0)).unwrap();
    let h = ellipse_tangent_halfplane(&e, p(3.0, 0.0)).unwrap().normalized();
    // Oracle: gradient of (x−d)ᵀ diag(1/4, 1) (x−d) at x* is (1, 0).
    assert_relative_eq!(h.a.x, 1.0);
    assert_relative_eq!(h.b, 3.0);
}

#[test]
fn ellipse_fit_and_dilate_examples() {
    let o = p(0.0, 0.0);
    let e = fit_ellipse_minor_axis(0.0, 2.0, o, p(0.0, 1.0)).unwrap();
    let (_, a, b) = e.axes();
    assert_relative_eq!((a, b).0, 2.0, epsilon = 1e-12);
    assert_relative_eq!(b, 1.0, epsilon = 1e-12);
    let e = fit_ellipse_minor_axis(0.0, 2.0, o, p(2f64.sqrt(), 2f64.sqrt() / 2.0)).unwrap();
    assert_relative_eq!(e.axes().2, 1.0, epsilon = 1e-12);
    assert!(matches!(fit_ellipse_minor_axis(0.0, 2.0, o, p(2.5, 0.1)), Err(Error::DegenerateFit(_))));
    assert!(matches!(fit_ellipse_minor_axis(0.0, 2.0, o, p(1.0, 0.0)), Err(Error::DegenerateFit(_))));

    let unit = Ellipse::circle(o, 1.0).unwrap();
    let d = dilate_ellipse_to_point(&unit, p(2.0, 0.0)).unwrap();
    assert_relative_eq!(d.axes().1, 2.0);
    assert_relative_eq!(d.axes().2, 2.0);
    assert_eq!(dilate_ellipse_to_point(&unit, p(0.0, 1.0)).unwrap(), unit);
    let e0 = Ellipse::new([[2.0, 0.0], [0.0, 1.0]], o).unwrap();
    let d = dilate_ellipse_to_point(&e0, p(0.0, 3.0)).unwrap();
    assert_relative_eq!(d.c[0][0], 6.0);
    assert_relative_eq!(d.c[1][1], 3.0);
    assert!(dilate_ellipse_to_point(&e0, p(0.5, 0.0)).is_err());
}

#[test]
fn concave_vertex_examples() {
    let pent = Polygon::regular(p(0.0, 0.0), 1.0, 5, 0.1).unwrap();
    assert!(concave_vertices(&pent).is_empty());
    let star: Vec<P> = (0..10)
        .map(|k| {
            let r = if k % 2 == 0 { 1.0 } else { 0.4 };
            let t = k as f64 * std::f64::consts::TAU / 10.0;
            p(r * t.cos(), r * t.sin())
        })
        .collect();
    let star = Polygon::new(star).unwrap();
    let reflex = concave_vertices(&star);
    let oracle = interior_angles(star.vertices()).iter().filter(|&&a| a > std::f64::consts::PI).count();
    assert_eq!(reflex.len(), 5);
    assert_eq!(oracle, 5);
}

#[test]
fn clip_examples() {
    let sq = square(0.0, 0.0, 1.0);
    let keep_all = HalfPlane::new(p(1.0, 0.0), 2.0).unwrap();
    assert_relative_eq!(clip_polygon(&sq, &keep_all).unwrap().area(), 1.0, max_relative = 1e-12);
    let half = HalfPlane::new(p(1.0, 0.0), 0.5).unwrap();
    let c = clip_polygon(&sq, &half).unwrap();
    assert_relative_eq!(c.area(), 0.5, max_relative = 1e-12);
    assert_eq!(c.len(), 4);
    let none = HalfPlane::new(p(1.0, 0.0), -1.0).unwrap();
    assert!(matches!(clip_polygon(&sq, &none), Err(Error::EmptyResult)));
}

#[test]
fn clip_area_matches_sampling_on_random_convex_polygons() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let k = rng.gen_range(4..9);
        let poly = Polygon::regular(p(0.0, 0.0), rng.gen_range(0.5..2.0), k, rng.gen_range(0.0..1.0)).unwrap();
        let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let h = HalfPlane::new(p(th.cos(), th.sin()), rng.gen_range(-0.3..0.3)).unwrap();
        let c = clip_polygon(&poly, &h).unwrap();
        let (lo, hi) = poly.bounds();
        let est = mc_area(&mut rng, lo, hi, 200_000, |q| {
            winding(poly.vertices(), q) != 0 && h.a.x * q.x + h.a.y * q.y <= h.b
        });
        assert!((c.area() - est).abs() <= 0.01 * est, "{} vs {}", c.area(), est);
    }
}

fn arb_convex() -> impl Strategy<Value = Polygon<f64>> {
    (3usize..9, 0.3f64..2.0, -1.0f64..1.0, -1.0f64..1.0, 0.0f64..1.0)
        .prop_map(|(k, r, cx, cy, ph)| Polygon::regular(p(cx, cy), r, k, ph).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dilation_contains_input_and_is_monotone(poly in arb_convex(), r1 in 0.0f64..0.5, dr in 0.0f64..0.5) {
        let d1 = dilate_polygon(&poly, r1, 16).unwrap();
        let d2 = dilate_polygon(&poly, r1 + dr, 16).unwrap();
        for &v in poly.vertices() {
            prop_assert!(polygon_contains(&d1, v));
        }
        for &v in d1.vertices() {
            prop_assert!(inside_or_near(d2.vertices(), v, 1e-9));
        }
    }

    #[test]
    fn union_is_idempotent_and_order_invariant(a in arb_convex(), b in arb_convex(), c in arb_convex()) {
        let area = |ps: &[Polygon<f64>]| ps.iter().map(|x| x.area()).sum::<f64>();
        let u1 = union_polygons(&[a.clone(), b.clone(), c.clone()]);
        let u2 = union_polygons(&[c.clone(), a.clone(), b.clone()]);
        let u3 = union_polygons(&u1);
        prop_assert!((area(&u1) - area(&u2)).abs() <= 1e-9 * area(&u1));
        prop_assert!((area(&u1) - area(&u3)).abs() <= 1e-9 * area(&u1));
    }

    #[test]
    fn tangent_halfplane_supports_ellipse(th in 0.0f64..3.2, a in 0.2f64..3.0, b in 0.2f64..3.0, s in 0.0f64..6.3) {
        let e = Ellipse::from_axes(th, a, b, p(0.3, -0.7)).unwrap();
        let x_star = e.from_unit(p(s.cos(), s.sin()));
        let h = ellipse_tangent_halfplane(&e, x_star).unwrap();
        prop_assert!((h.a.x * x_star.x + h.a.y * x_star.y - h.b).abs() <= 1e-9 * (1.0 + h.b.abs()));
        for k in 0..200 {
            let t = k as f64 * std::f64::consts::TAU / 200.0;
            let y = e.from_unit(p(t.cos(), t.sin()));
            prop_assert!(h.eval(y) <= 1e-9 * (1.0 + h.a.norm()));
        }
    }

    #[test]
    fn clip_is_subset_of_polygon_and_halfplane(poly in arb_convex(), th in 0.0f64..6.3, off in -0.2f64..0.2) {
        let h = HalfPlane::new(p(th.cos(), th.sin()), off).unwrap();
        if let Ok(c) = clip_polygon(&poly, &h) {
            for &v in c.vertices() {
                prop_assert!(h.eval(v) <= 1e-9);
                prop_assert!(inside_or_near(poly.vertices(), v, 1e-9));
            }
        }
    }
}
