use serde::{Deserialize, Serialize};

use super::{HalfPlane, Point2, EPS};
use crate::error::{invalid, Error, Result};
use crate::Real;

/// Tolerance on `‖C⁻¹(x − d)‖ = 1` when a point is claimed to be on the boundary.
const ON_BOUNDARY_TOL: f64 = 1e-6;

/// `{C x̄ + d : ‖x̄‖ ≤ 1}` with `C = Rᵀ diag(a, b) R`.
///
/// `R` maps world offsets into the ellipse frame, so the first axis (semi-axis
/// `a`) points along `(cos θ, sin θ)` in the world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse<T> {
    pub c: [[T; 2]; 2],
    pub d: Point2<T>,
}

impl<T: Real> Ellipse<T> {
    /// Ellipse with semi-axis `a` along angle `theta` and `b` across it.
    pub fn from_axes(theta: T, a: T, b: T, d: Point2<T>) -> Result<Self> {
        if !(a.value() > 0.0 && b.value() > 0.0) {
            return Err(invalid("ellipse semi-axes must be positive"));
        }
        let (s, c) = theta.sin_cos();
        // Rᵀ Λ R with R = [[c, s], [-s, c]].
        let m00 = a * c * c + b * s * s;
        let m11 = a * s * s + b * c * c;
        let m01 = (a - b) * c * s;
        Ok(Self { c: [[m00, m01], [m01, m11]], d })
    }

    pub fn circle(center: Point2<T>, r: T) -> Result<Self> {
        Self::from_axes(T::zero(), r, r, center)
    }

    /// Checks symmetry and positive definiteness.
    pub fn new(c: [[T; 2]; 2], d: Point2<T>) -> Result<Self> {
        let sym = (c[0][1] - c[1][0]).abs().value() <= EPS * (1.0 + c[0][1].abs().value());
        let e = Self { c: [[c[0][0], c[0][1]], [c[0][1], c[1][1]]], d };
        if !sym || !(c[0][0].value() > 0.0) || !(e.det().value() > 0.0) {
            return Err(invalid("ellipse matrix must be symmetric positive definite"));
        }
        Ok(e)
    }

    fn det(&self) -> T {
        self.c[0][0] * self.c[1][1] - self.c[0][1] * self.c[1][0]
    }

    /// `C⁻¹(x − d)`.
    pub fn to_unit(&self, x: Point2<T>) -> Point2<T> {
        let r = x - self.d;
        let inv = T::one() / self.det();
        Point2::new(
            (self.c[1][1] * r.x - self.c[0][1] * r.y) * inv,
            (self.c[0][0] * r.y - self.c[1][0] * r.x) * inv,
        )
    }

    /// `C x̄ + d`.
    pub fn from_unit(&self, u: Point2<T>) -> Point2<T> {
        Point2::new(
            self.c[0][0] * u.x + self.c[0][1] * u.y,
            self.c[1][0] * u.x + self.c[1][1] * u.y,
        ) + self.d
    }

    /// `‖C⁻¹(x − d)‖`: below 1 inside, 1 on the boundary.
    pub fn level(&self, x: Point2<T>) -> T {
        self.to_unit(x).norm()
    }

    /// Canonical `(θ, a, b)` with `a ≥ b`, θ in `(−π/2, π/2]`.
    pub fn axes(&self) -> (T, T, T) {
        let (p, q, r) = (self.c[0][0], self.c[0][1], self.c[1][1]);
        let half = T::lit(0.5);
        let mean = (p + r) * half;
        let rad = ((p - r) * half).hypot(q);
        let theta = if rad.value() <= 0.0 { T::zero() } else { (q + q).atan2(p - r) * half };
        (theta, mean + rad, mean - rad)
    }

    /// Same centre, `C` scaled by `s`.
    pub fn scaled(&self, s: T) -> Self {
        Self {
            c: [[self.c[0][0] * s, self.c[0][1] * s], [self.c[1][0] * s, self.c[1][1] * s]],
            d: self.d,
        }
    }

    pub fn area(&self) -> T {
        T::PI() * self.det()
    }
}

/// Tangent half-plane `a = 2 C⁻ᵀC⁻¹(x* − d)`, `b = aᵀx*` at a boundary point.
pub fn ellipse_tangent_halfplane<T: Real>(e: &Ellipse<T>, x_star: Point2<T>) -> Result<HalfPlane<T>> {
    let u = e.to_unit(x_star);
    if (u.norm().value() - 1.0).abs() > ON_BOUNDARY_TOL {
        return Err(invalid(format!(
            "tangent point is not on the ellipse boundary (level {:.9})",
            u.norm().value()
        )));
    }
    // C is symmetric, so C⁻ᵀ C⁻¹ r = C⁻¹ u.
    let a = e.to_unit(u + e.d) * T::lit(2.0);
    HalfPlane::new(a, a.dot(x_star))
}

/// Ellipse with fixed orientation `theta`, semi-axis `a` and centre `d` whose
/// second semi-axis is grown until the boundary passes through `x_star`.
pub fn fit_ellipse_minor_axis<T: Real>(theta: T, a: T, d: Point2<T>, x_star: Point2<T>) -> Result<Ellipse<T>> {
    let r = x_star - d;
    let (s, c) = theta.sin_cos();
    let u1 = c * r.x + s * r.y;
    let u2 = -s * r.x + c * r.y;
    if u2.abs().value() <= EPS {
        return Err(Error::DegenerateFit(format!(
            "point lies on the major-axis line (offset {:.3e})",
            u2.value()
        )));
    }
    if u1.abs() >= a {
        return Err(Error::DegenerateFit(format!(
            "point is beyond the major semi-axis (|u1| = {:.6} >= a = {:.6})",
            u1.abs().value(),
            a.value()
        )));
    }
    let ratio = u1 / a;
    let b = u2.abs() / (T::one() - ratio * ratio).sqrt();
    Ellipse::from_axes(theta, a, b, d)
}

/// Scales `e0` about its centre, keeping the aspect ratio, until `x_star` is on
/// the boundary. `x_star` must not be strictly inside `e0`.
pub fn dilate_ellipse_to_point<T: Real>(e0: &Ellipse<T>, x_star: Point2<T>) -> Result<Ellipse<T>> {
    let s = e0.level(x_star);
    if s.value() < 1.0 - ON_BOUNDARY_TOL {
        return Err(invalid(format!("point is inside the ellipse (scale {:.9})", s.value())));
    }
    Ok(e0.scaled(s))
}
