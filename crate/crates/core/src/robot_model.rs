//! Kinematics of one mobile manipulator (differential-drive base carrying a
//! DH-parameterised arm) and of a formation of them holding a shared object.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geom2d::{HalfPlane, Point2, Polygon};
use crate::Real;

/// Standard DH row: `T = Rz(θ) Tz(d) Tx(a) Rx(α)` with `θ = q + theta_offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DHRow {
    pub d: f64,
    pub a: f64,
    pub alpha: f64,
    #[serde(default)]
    pub theta_offset: f64,
}

impl DHRow {
    pub const fn new(d: f64, a: f64, alpha: f64) -> Self {
        Self { d, a, alpha, theta_offset: 0.0 }
    }
}

/// Five revolute joints plus a fixed gripper row.
pub fn default_dh_table() -> Vec<DHRow> {
    use std::f64::consts::PI;
    vec![
        DHRow::new(0.070, 0.0, 0.0),
        DHRow::new(0.0, 0.0, 0.5 * PI),
        DHRow::new(0.100, 0.0, -PI),
        DHRow::new(0.125, 0.0, PI),
        DHRow::new(0.0, 0.120, -0.5 * PI),
        DHRow::new(0.0, 0.0, 0.0),
    ]
}

/// Base pose and arm joint angles of one robot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MMRState<T> {
    pub base: Point2<T>,
    pub phi: T,
    pub arm: Vec<T>,
}

/// Forward speed, yaw rate and arm joint rates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput<T> {
    pub v: T,
    pub omega: T,
    pub arm_rates: Vec<T>,
}

impl<T: Real> ControlInput<T> {
    pub fn zero(n_arm: usize) -> Self {
        Self { v: T::zero(), omega: T::zero(), arm_rates: vec![T::zero(); n_arm] }
    }

    /// `[v, ω, q̇_1, …]`.
    pub fn to_vec(&self) -> Vec<T> {
        let mut out = vec![self.v, self.omega];
        out.extend_from_slice(&self.arm_rates);
        out
    }

    pub fn from_slice(u: &[T]) -> Self {
        Self { v: u[0], omega: u[1], arm_rates: u[2..].to_vec() }
    }
}

/// Joint position box and control box (`[v, ω, q̇_1, …]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

impl Limits {
    /// Default box for an arm with `n_arm` joints: the first two (yaw) joints
    /// turn ±π, the remaining ones ±0.5 rad; |v| ≤ 0.3 m/s, |ω| ≤ 0.5 rad/s,
    /// joint rates ≤ 0.5 rad/s.
    pub fn default_for(n_arm: usize) -> Self {
        use std::f64::consts::PI;
        let q_max: Vec<f64> = (0..n_arm).map(|j| if j < 2 { PI } else { 0.5 }).collect();
        let mut u_max = vec![0.3, 0.5];
        u_max.extend(std::iter::repeat_n(0.5, n_arm));
        Self {
            q_min: q_max.iter().map(|q| -q).collect(),
            q_max,
            u_min: u_max.iter().map(|u| -u).collect(),
            u_max,
        }
    }

    pub fn validate(&self, n_arm: usize) -> Result<()> {
        if self.q_min.len() != n_arm || self.q_max.len() != n_arm {
            return Err(invalid(format!("joint limits need {n_arm} entries")));
        }
        if self.u_min.len() != n_arm + 2 || self.u_max.len() != n_arm + 2 {
            return Err(invalid(format!("control limits need {} entries", n_arm + 2)));
        }
        let ok = |lo: &[f64], hi: &[f64]| lo.iter().zip(hi).all(|(l, h)| l <= h);
        if !ok(&self.q_min, &self.q_max) || !ok(&self.u_min, &self.u_max) {
            return Err(invalid("lower limit above upper limit"));
        }
        Ok(())
    }

    pub fn contains_arm(&self, arm: &[f64]) -> bool {
        arm.iter().zip(self.q_min.iter().zip(&self.q_max)).all(|(q, (lo, hi))| lo <= q && q <= hi)
    }

    pub fn contains_control(&self, u: &ControlInput<f64>) -> bool {
        u.to_vec().iter().zip(self.u_min.iter().zip(&self.u_max)).all(|(x, (lo, hi))| lo <= x && x <= hi)
    }

    pub fn clamp_control(&self, u: &ControlInput<f64>) -> ControlInput<f64> {
        let c: Vec<f64> = u
            .to_vec()
            .iter()
            .zip(self.u_min.iter().zip(&self.u_max))
            .map(|(x, (lo, hi))| x.clamp(*lo, *hi))
            .collect();
        ControlInput::from_slice(&c)
    }
}

/// `[ẋ, ẏ, φ̇, q̇_a]` of the unicycle base plus arm.
pub fn base_derivative<T: Real>(state: &MMRState<T>, u: &ControlInput<T>) -> MMRState<T> {
    let (s, c) = state.phi.sin_cos();
    MMRState { base: Point2::new(u.v * c, u.v * s), phi: u.omega, arm: u.arm_rates.clone() }
}

/// One classical RK4 step of the base; the arm integrates its constant rates
/// exactly.
pub fn step_rk4<T: Real>(state: &MMRState<T>, u: &ControlInput<T>, tc: T) -> MMRState<T> {
    let mut out = state.clone();
    let (x, y, phi) = rk4_base(state.base.x, state.base.y, state.phi, u.v, u.omega, tc);
    out.base = Point2::new(x, y);
    out.phi = phi;
    for (q, r) in out.arm.iter_mut().zip(&u.arm_rates) {
        *q = *q + *r * tc;
    }
    out
}

pub(crate) fn rk4_base<T: Real>(x: T, y: T, phi: T, v: T, omega: T, h: T) -> (T, T, T) {
    let half = T::lit(0.5);
    let f = |ph: T| {
        let (s, c) = ph.sin_cos();
        (v * c, v * s)
    };
    let (k1x, k1y) = f(phi);
    let (k2x, k2y) = f(phi + omega * h * half);
    let (k4x, k4y) = f(phi + omega * h);
    // k3 equals k2 because the rates depend on φ alone and φ̇ is constant.
    let sixth = h / T::lit(6.0);
    let four = T::lit(4.0);
    (
        x + sixth * (k1x + four * k2x + k4x),
        y + sixth * (k1y + four * k2y + k4y),
        phi + omega * h,
    )
}

/// Homogeneous transform stored as rotation and translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame<T> {
    pub rot: [[T; 3]; 3],
    pub pos: [T; 3],
}

impl<T: Real> Frame<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { rot: [[o, z, z], [z, o, z], [z, z, o]], pos: [z; 3] }
    }

    /// Planar pose at ground height.
    pub fn planar(x: T, y: T, phi: T) -> Self {
        let (s, c) = phi.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self { rot: [[c, -s, z], [s, c, z], [z, z, o]], pos: [x, y, z] }
    }

    pub fn dh(row: &DHRow, q: T) -> Self {
        let (st, ct) = (q + T::lit(row.theta_offset)).sin_cos();
        let (sa, ca) = (T::lit(row.alpha.sin()), T::lit(row.alpha.cos()));
        let (a, d) = (T::lit(row.a), T::lit(row.d));
        Self {
            rot: [[ct, -st * ca, st * sa], [st, ct * ca, -ct * sa], [T::zero(), sa, ca]],
            pos: [a * ct, a * st, d],
        }
    }

    pub fn compose(&self, o: &Self) -> Self {
        let mut rot = [[T::zero(); 3]; 3];
        let mut pos = self.pos;
        for i in 0..3 {
            for j in 0..3 {
                rot[i][j] = self.rot[i][0] * o.rot[0][j] + self.rot[i][1] * o.rot[1][j] + self.rot[i][2] * o.rot[2][j];
            }
            pos[i] = pos[i] + self.rot[i][0] * o.pos[0] + self.rot[i][1] * o.pos[1] + self.rot[i][2] * o.pos[2];
        }
        Self { rot, pos }
    }

    /// Heading of the frame's x-axis projected on the ground plane.
    pub fn yaw(&self) -> T {
        self.rot[1][0].atan2(self.rot[0][0])
    }
}

/// Frames of the arm chain in the base frame: index 0 is the base, index `k`
/// the frame after DH row `k`. The last DH row is the fixed gripper.
pub fn arm_chain<T: Real>(arm: &[T], dh: &[DHRow]) -> Vec<Frame<T>> {
    let mut frames = Vec::with_capacity(dh.len() + 1);
    let mut f = Frame::identity();
    frames.push(f);
    for (k, row) in dh.iter().enumerate() {
        let q = arm.get(k).copied().unwrap_or_else(T::zero);
        f = f.compose(&Frame::dh(row, q));
        frames.push(f);
    }
    frames
}

fn check_arm(n_arm: usize, dh: &[DHRow]) -> Result<()> {
    if n_arm + 1 != dh.len() {
        return Err(invalid(format!(
            "arm has {n_arm} joints but the DH table has {} rows (expected joints + gripper)",
            dh.len()
        )));
    }
    Ok(())
}

/// World-frame end-effector position and yaw.
pub fn forward_kinematics<T: Real>(state: &MMRState<T>, dh: &[DHRow]) -> Result<([T; 3], T)> {
    check_arm(state.arm.len(), dh)?;
    let ee = ee_frame(state.base.x, state.base.y, state.phi, &state.arm, dh);
    Ok((ee.pos, ee.yaw()))
}

pub(crate) fn ee_frame<T: Real>(x: T, y: T, phi: T, arm: &[T], dh: &[DHRow]) -> Frame<T> {
    let local = arm_chain(arm, dh).pop().expect("chain has frames");
    Frame::planar(x, y, phi).compose(&local)
}

/// Object reference shape on the ground plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectShape {
    Circle { radius: f64 },
    Polygon { vertices: Vec<Point2<f64>> },
}

impl ObjectShape {
    /// Circumradius about the object frame origin.
    pub fn circumradius(&self) -> f64 {
        match self {
            ObjectShape::Circle { radius } => *radius,
            ObjectShape::Polygon { vertices } => vertices.iter().map(|v| v.norm()).fold(0.0, f64::max),
        }
    }
}

/// Static description of one robot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub dh: Vec<DHRow>,
    pub limits: Limits,
    /// Base footprint in the base frame.
    pub footprint: Polygon<f64>,
    /// Half-thickness added to the arm bounding circle.
    #[serde(default = "default_link_radius")]
    pub link_radius: f64,
}

fn default_link_radius() -> f64 {
    0.02
}

impl RobotModel {
    /// Default arm table, default limits and a square footprint of side `side`.
    pub fn with_square_base(side: f64) -> Self {
        let h = 0.5 * side;
        let dh = default_dh_table();
        Self {
            limits: Limits::default_for(dh.len() - 1),
            dh,
            footprint: Polygon::rectangle(Point2::new(-h, -h), Point2::new(h, h)).expect("positive side"),
            link_radius: default_link_radius(),
        }
    }

    pub fn n_arm(&self) -> usize {
        self.dh.len() - 1
    }

    pub fn base_radius(&self) -> f64 {
        self.footprint.vertices().iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Upper estimate of the planar base-to-end-effector distance over the
    /// joint box, from a 5-level grid over every joint.
    pub fn planar_reach(&self) -> f64 {
        let n = self.n_arm();
        let levels = 5usize;
        let mut best: f64 = 0.0;
        let mut idx = vec![0usize; n];
        loop {
            let arm: Vec<f64> = (0..n)
                .map(|j| {
                    let t = idx[j] as f64 / (levels - 1) as f64;
                    self.limits.q_min[j] + t * (self.limits.q_max[j] - self.limits.q_min[j])
                })
                .collect();
            let ee = arm_chain(&arm, &self.dh).pop().expect("frames");
            best = best.max(ee.pos[0].hypot(ee.pos[1]));
            let mut k = 0;
            while k < n {
                idx[k] += 1;
                if idx[k] < levels {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == n {
                return best;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dh.is_empty() {
            return Err(invalid("DH table is empty"));
        }
        self.limits.validate(self.n_arm())
    }
}

/// Where robot `i` holds the object: a point in the object frame and the
/// end-effector yaw relative to the object yaw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    pub offset: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

/// Static geometry of the formation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Formation {
    pub robots: Vec<RobotModel>,
    pub grasps: Vec<Grasp>,
    pub object: ObjectShape,
    /// Upper bound on the object height.
    #[serde(default = "default_z_h")]
    pub z_h: f64,
}

fn default_z_h() -> f64 {
    f64::INFINITY
}

impl Formation {
    pub fn n(&self) -> usize {
        self.robots.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.robots.len() < 2 {
            return Err(invalid("a formation needs at least two robots"));
        }
        if self.grasps.len() != self.robots.len() {
            return Err(invalid("one grasp per robot is required"));
        }
        for r in &self.robots {
            r.validate()?;
        }
        if !(self.z_h > 0.0) {
            return Err(invalid("z_h must be positive"));
        }
        let wedges = self.wedge_angles();
        let total: f64 = wedges.iter().map(|w| w.1 - w.0).sum();
        if (total - std::f64::consts::TAU).abs() > 1e-9 {
            return Err(invalid("grasps must be listed counter-clockwise around the object"));
        }
        for (i, w) in wedges.iter().enumerate() {
            let span = w.1 - w.0;
            if !(span > 0.0 && span <= std::f64::consts::PI + 1e-12) {
                return Err(invalid(format!(
                    "grasps must be listed counter-clockwise with every wedge at most π wide (robot {i})"
                )));
            }
        }
        Ok(())
    }

    /// Radius of a circle at the object centre enclosing the whole formation:
    /// object circumradius (or the farthest grasp point, if larger) plus the
    /// largest base radius plus planar reach.
    pub fn enclosing_radius(&self) -> f64 {
        let reach = self
            .robots
            .iter()
            .map(|r| r.base_radius() + r.planar_reach())
            .fold(0.0, f64::max);
        let grasp = self.grasps.iter().map(|g| g.offset[0].hypot(g.offset[1])).fold(0.0, f64::max);
        self.object.circumradius().max(grasp) + reach
    }

    fn grasp_angle(&self, i: usize) -> f64 {
        let o = self.grasps[i].offset;
        o[1].atan2(o[0])
    }

    /// Object-frame angular sector `[start, end]` (end > start) of each robot,
    /// bounded by the bisectors with its neighbours.
    pub fn wedge_angles(&self) -> Vec<(f64, f64)> {
        use std::f64::consts::TAU;
        let n = self.n();
        let ccw_gap = |a: f64, b: f64| (b - a).rem_euclid(TAU);
        let bis: Vec<f64> = (0..n)
            .map(|i| {
                let prev = self.grasp_angle((i + n - 1) % n);
                let cur = self.grasp_angle(i);
                let gap = if n == 2 || ccw_gap(prev, cur) == 0.0 { TAU / n as f64 } else { ccw_gap(prev, cur) };
                cur - 0.5 * gap
            })
            .collect();
        (0..n)
            .map(|i| {
                let start = bis[i];
                let mut end = bis[(i + 1) % n];
                while end <= start {
                    end += TAU;
                }
                (start, end)
            })
            .collect()
    }
}

/// Object pose and robot states.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FormationConfig<T> {
    pub p: [T; 3],
    pub psi: T,
    pub robots: Vec<MMRState<T>>,
}

pub(crate) fn wrap_angle<T: Real>(a: T) -> T {
    a.sin().atan2(a.cos())
}

/// `[p_ee − p − Rz(ψ)·r, wrap(yaw_ee − ψ − yaw_offset)]`.
pub fn grasp_residual<T: Real>(formation: &Formation, cfg: &FormationConfig<T>, i: usize) -> Result<[T; 4]> {
    let robot = &formation.robots[i];
    let st = &cfg.robots[i];
    check_arm(st.arm.len(), &robot.dh)?;
    let ee = ee_frame(st.base.x, st.base.y, st.phi, &st.arm, &robot.dh);
    Ok(grasp_residual_from_frame(&ee, cfg.p, cfg.psi, &formation.grasps[i]))
}

pub(crate) fn grasp_residual_from_frame<T: Real>(ee: &Frame<T>, p: [T; 3], psi: T, g: &Grasp) -> [T; 4] {
    let (s, c) = psi.sin_cos();
    let (ox, oy, oz) = (T::lit(g.offset[0]), T::lit(g.offset[1]), T::lit(g.offset[2]));
    let target = [p[0] + c * ox - s * oy, p[1] + s * ox + c * oy, p[2] + oz];
    // Yaw error without extracting the yaw: rotate the projected x-axis by −(ψ + offset).
    let (sg, cg) = (psi + T::lit(g.yaw)).sin_cos();
    let (r00, r10) = (ee.rot[0][0], ee.rot[1][0]);
    let yaw_err = (r10 * cg - r00 * sg).atan2(r00 * cg + r10 * sg);
    [ee.pos[0] - target[0], ee.pos[1] - target[1], ee.pos[2] - target[2], yaw_err]
}

/// Base pose that puts the end effector of `robot` with joint angles `arm`
/// onto grasp `g` of an object at `(p_xy, psi)`, and the object height this
/// implies.
pub fn place_robot(robot: &RobotModel, g: &Grasp, p_xy: Point2<f64>, psi: f64, arm: &[f64]) -> Result<(MMRState<f64>, f64)> {
    check_arm(arm.len(), &robot.dh)?;
    let local = arm_chain(arm, &robot.dh).pop().expect("frames");
    let phi = psi + g.yaw - local.yaw();
    let target = p_xy + Point2::new(g.offset[0], g.offset[1]).rotate(psi);
    let base = target - Point2::new(local.pos[0], local.pos[1]).rotate(phi);
    let pz = local.pos[2] - g.offset[2];
    Ok((MMRState { base, phi, arm: arm.to_vec() }, pz))
}

/// Formation configuration with every end effector exactly on its grasp.
/// All robots must imply the same object height.
pub fn inverse_placement(formation: &Formation, p_xy: Point2<f64>, psi: f64, arms: &[Vec<f64>]) -> Result<FormationConfig<f64>> {
    let mut robots = Vec::with_capacity(formation.n());
    let mut pz: Option<f64> = None;
    for (i, robot) in formation.robots.iter().enumerate() {
        let (st, z) = place_robot(robot, &formation.grasps[i], p_xy, psi, &arms[i])?;
        if let Some(z0) = pz {
            if (z - z0).abs() > 1e-9 {
                return Err(invalid(format!("robot {i} implies object height {z}, robot 0 implies {z0}")));
            }
        }
        pz = Some(z);
        robots.push(st);
    }
    Ok(FormationConfig { p: [p_xy.x, p_xy.y, pz.unwrap_or(0.0)], psi, robots })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle<T> {
    pub c: Point2<T>,
    pub r: T,
}

/// Ground-plane bounding circles of every body.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundingCircles<T> {
    pub bases: Vec<Circle<T>>,
    pub arms: Vec<Circle<T>>,
    pub object: Circle<T>,
}

impl<T: Real> BoundingCircles<T> {
    /// Every circle, bases first, then arms, then the object.
    pub fn all(&self) -> Vec<Circle<T>> {
        self.bases.iter().chain(&self.arms).chain(std::iter::once(&self.object)).copied().collect()
    }
}

/// Smoothing length in the arm-circle link norms, metres.
pub(crate) const LINK_NORM_EPS: f64 = 1e-4;

/// Circle around the arm: centred between the arm root and the end effector
/// with radius half the projected chain length (plus link thickness). Every
/// point of the chain lies in the ellipse with foci at root and end effector
/// and major axis equal to the chain length, which this circle contains.
pub(crate) fn arm_circle<T: Real>(x: T, y: T, phi: T, arm: &[T], robot: &RobotModel) -> Circle<T> {
    let frames = arm_chain(arm, &robot.dh);
    let eps2 = T::lit(LINK_NORM_EPS * LINK_NORM_EPS);
    let mut len = T::zero();
    for w in frames.windows(2) {
        let dx = w[1].pos[0] - w[0].pos[0];
        let dy = w[1].pos[1] - w[0].pos[1];
        len = len + (dx * dx + dy * dy + eps2).sqrt();
    }
    let ee = frames.last().expect("frames").pos;
    let half = T::lit(0.5);
    let local = Point2::new(ee[0] * half, ee[1] * half);
    Circle { c: Point2::new(x, y) + local.rotate(phi), r: len * half + T::lit(robot.link_radius) }
}

pub fn bounding_circles<T: Real>(formation: &Formation, cfg: &FormationConfig<T>) -> BoundingCircles<T> {
    let bases = formation
        .robots
        .iter()
        .zip(&cfg.robots)
        .map(|(r, s)| Circle { c: s.base, r: T::lit(r.base_radius()) })
        .collect();
    let arms = formation
        .robots
        .iter()
        .zip(&cfg.robots)
        .map(|(r, s)| arm_circle(s.base.x, s.base.y, s.phi, &s.arm, r))
        .collect();
    let object = Circle { c: Point2::new(cfg.p[0], cfg.p[1]), r: T::lit(formation.object.circumradius()) };
    BoundingCircles { bases, arms, object }
}

/// Half-planes bounding robot `i`'s wedge for an object at `p` with yaw `psi`.
/// Two rows per robot, or one when the wedge is a half-plane (two robots).
pub fn wedge_planes<T: Real>(formation: &Formation, p: Point2<T>, psi: T) -> Result<Vec<Vec<HalfPlane<T>>>> {
    if formation.n() < 2 {
        return Err(invalid("wedges need at least two robots"));
    }
    Ok(formation
        .wedge_angles()
        .iter()
        .map(|&(start, end)| {
            let d0 = Point2::from_angle(psi + T::lit(start));
            let d1 = Point2::from_angle(psi + T::lit(end));
            // Left of the start ray: −perp(d0)·(v − p) ≤ 0; right of the end ray: perp(d1)·(v − p) ≤ 0.
            let h0 = HalfPlane { a: -d0.perp(), b: -d0.perp().dot(p) };
            let h1 = HalfPlane { a: d1.perp(), b: d1.perp().dot(p) };
            if (end - start - std::f64::consts::PI).abs() < 1e-12 {
                vec![h0]
            } else {
                vec![h0, h1]
            }
        })
        .collect())
}
