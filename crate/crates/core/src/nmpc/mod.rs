//! Receding-horizon planning: the multiple-shooting transcription of the
//! formation NMPC, its SQP solve, and the plan/execute/replan loop.

mod sqp;

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use num_traits::Zero;

use crate::autodiff::{hessian, jacobian, HyperDual64};
use crate::error::{invalid, Error, Result};
use crate::geom2d::Point2;
use crate::global_planner::{discretize_reference, ConvexRegion, GlobalPlan};
use crate::robot_model::{
    arm_circle, bounding_circles, ee_frame, grasp_residual_from_frame, rk4_base, step_rk4, wedge_planes, wrap_angle, ControlInput,
    Formation, FormationConfig, MMRState,
};
use crate::Real;

use sqp::{Eval, Nlp, SqpOptions, SqpStatus, Triplets};

/// Diagonal cost weights. `w_u` is applied to every robot's control vector
/// `[v, ω, q̇_1, …]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weights {
    pub w_u: Vec<f64>,
    pub w_e: [f64; 2],
    pub w_n: [f64; 2],
}

impl Default for Weights {
    fn default() -> Self {
        Self { w_u: vec![0.05, 0.05, 5.0, 0.5, 5.0, 5.0, 5.0], w_e: [0.01, 0.01], w_n: [1e5, 1e5] }
    }
}

impl Weights {
    /// Weight of control channel `j`; channels past the end reuse the last entry.
    pub fn w_u_at(&self, j: usize) -> f64 {
        self.w_u.get(j).or(self.w_u.last()).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Safety {
    pub d_safe: f64,
    pub d_safe_dyn: f64,
}

impl Default for Safety {
    fn default() -> Self {
        Self { d_safe: 0.05, d_safe_dyn: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub t_h: f64,
    pub t_e: f64,
    pub t_c: f64,
    pub v_op: f64,
    pub weights: Weights,
    pub safety: Safety,
    pub kkt_tol: f64,
    pub feas_tol: f64,
    pub max_iter: usize,
    /// Dynamic obstacles farther than this from the object are ignored.
    pub sensing_radius: f64,
    pub goal_tol: f64,
    pub yaw_tol: f64,
    /// Consecutive solver failures before the drive aborts.
    pub max_failures: usize,
    /// Simulated time limit of one drive, seconds.
    pub max_duration: f64,
    /// Cycles without measurable progress before the drive gives up.
    pub stall_cycles: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            t_h: 9.0,
            t_e: 3.0,
            t_c: 0.25,
            v_op: 0.15,
            weights: Weights::default(),
            safety: Safety::default(),
            kkt_tol: 1e-6,
            feas_tol: 1e-6,
            max_iter: 20,
            sensing_radius: 3.0,
            goal_tol: 0.05,
            yaw_tol: 0.15,
            max_failures: 3,
            max_duration: 600.0,
            stall_cycles: 4,
        }
    }
}

impl PlannerConfig {
    pub fn n_h(&self) -> usize {
        (self.t_h / self.t_c).round() as usize
    }

    /// Steps executed per cycle.
    pub fn n_e(&self) -> usize {
        (self.t_e / self.t_c).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_c > 0.0 && self.t_e > 0.0 && self.t_h > 0.0 && self.v_op > 0.0) {
            return Err(invalid("T_c, T_e, T_h and v_op must be positive"));
        }
        if !(self.t_e < self.t_h) {
            return Err(invalid(format!("execution time {} must be shorter than the horizon {}", self.t_e, self.t_h)));
        }
        if self.n_e() == 0 || self.n_e() > self.n_h() {
            return Err(invalid("T_e must cover at least one step of the horizon"));
        }
        if self.safety.d_safe < 0.0 || self.safety.d_safe_dyn < 0.0 {
            return Err(invalid("safety distances must be nonnegative"));
        }
        Ok(())
    }
}

/// Constant-velocity snapshot of a circular dynamic obstacle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSnapshot {
    pub p: Point2<f64>,
    pub v: Point2<f64>,
    pub r: f64,
}

impl ObstacleSnapshot {
    /// Predicted centre `dt` seconds after the snapshot.
    pub fn at(&self, dt: f64) -> Point2<f64> {
        self.p + self.v * dt
    }
}

#[derive(Clone, Debug)]
pub struct HorizonProblem {
    pub formation: Formation,
    pub n_h: usize,
    pub t_c: f64,
    pub initial: FormationConfig<f64>,
    /// `n_h + 1` reference points; entry 0 pairs with the pinned state.
    pub reference: Vec<Point2<f64>>,
    /// Corridor of every step, `n_h + 1` entries.
    pub corridors: Vec<ConvexRegion>,
    pub obstacles: Vec<ObstacleSnapshot>,
    pub weights: Weights,
    pub safety: Safety,
}

impl HorizonProblem {
    pub fn validate(&self) -> Result<()> {
        let f = &self.formation;
        if f.n() == 0 || f.grasps.len() != f.n() {
            return Err(invalid("formation needs robots and one grasp per robot"));
        }
        for r in &f.robots {
            r.validate()?;
        }
        if self.n_h == 0 || !(self.t_c > 0.0) {
            return Err(invalid("horizon needs at least one step and T_c > 0"));
        }
        if self.reference.len() != self.n_h + 1 || self.corridors.len() != self.n_h + 1 {
            return Err(invalid(format!("reference and corridors need {} entries", self.n_h + 1)));
        }
        if self.initial.robots.len() != f.n() {
            return Err(invalid("initial state has the wrong robot count"));
        }
        for (s, r) in self.initial.robots.iter().zip(&f.robots) {
            if s.arm.len() != r.n_arm() {
                return Err(invalid("initial arm length does not match the DH table"));
            }
        }
        if self.obstacles.iter().any(|o| !(o.r > 0.0)) {
            return Err(invalid("obstacle radius must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    /// Feasible and KKT residual within tolerance.
    Optimal,
    /// Feasible within tolerance, KKT test not met at the iteration limit.
    FeasibleNotOptimal,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HorizonSolution {
    pub states: Vec<FormationConfig<f64>>,
    /// `controls[k][i]`: robot `i` during step `k`.
    pub controls: Vec<Vec<ControlInput<f64>>>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub max_constraint_violation: f64,
    pub solve_time: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Inequality rows within 1e-6 of their bound.
    pub active_constraints: usize,
    pub warnings: Vec<String>,
}

/// `uᵀW_u u + eᵀW_e e` with `e` the planar CoM error.
pub fn stage_cost<T: Real>(state: &FormationConfig<T>, u: &[ControlInput<T>], reference: Point2<f64>, weights: &Weights) -> T {
    let mut j = T::zero();
    for ui in u {
        for (c, val) in ui.to_vec().into_iter().enumerate() {
            j = j + T::lit(weights.w_u_at(c)) * val * val;
        }
    }
    j + tracking_cost(state, reference, weights.w_e)
}

/// `eᵀW_N e` at the end of the horizon.
pub fn terminal_cost<T: Real>(state: &FormationConfig<T>, reference: Point2<f64>, w_n: [f64; 2]) -> T {
    tracking_cost(state, reference, w_n)
}

fn tracking_cost<T: Real>(state: &FormationConfig<T>, reference: Point2<f64>, w: [f64; 2]) -> T {
    let ex = state.p[0] - T::lit(reference.x);
    let ey = state.p[1] - T::lit(reference.y);
    T::lit(w[0]) * ex * ex + T::lit(w[1]) * ey * ey
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintKind {
    Dynamics,
    Grasp,
    Corridor,
    Wedge,
    DynamicObstacle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Body {
    Base,
    Arm,
    Object,
}

/// One scalar constraint. Equalities are `g = 0`, inequalities `g ≤ 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConstraintRow {
    pub step: usize,
    pub kind: ConstraintKind,
    pub robot: Option<usize>,
    pub body: Option<Body>,
    pub equality: bool,
}

#[derive(Clone, Copy, Debug)]
enum Var {
    Z(usize),
    Const(f64),
}

#[derive(Clone, Debug)]
enum BlockKind {
    BaseDynamics,
    ArmDynamics { n_arm: usize },
    Robot { robot: usize },
    Object,
}

#[derive(Clone, Debug)]
struct Block {
    kind: BlockKind,
    step: usize,
    vars: Vec<Var>,
    /// Global indices of the block's rows, equalities first.
    rows: Vec<usize>,
}

/// The horizon problem as a nonlinear program in the multiple-shooting layout
/// `[u_0, x_1, u_1, x_2, …, u_{N−1}, x_N]`; `x_0` is pinned to the initial
/// state and does not appear.
pub struct ConstraintSet<'a> {
    problem: &'a HorizonProblem,
    state_off: Vec<usize>,
    ctrl_off: Vec<usize>,
    ns: usize,
    nu: usize,
    x0: Vec<f64>,
    blocks: Vec<Block>,
    rows: Vec<ConstraintRow>,
    m_eq: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// Assemble every constraint of the horizon problem.
pub fn build_constraints(problem: &HorizonProblem) -> Result<ConstraintSet<'_>> {
    problem.validate()?;
    let f = &problem.formation;
    let mut state_off = Vec::new();
    let mut ctrl_off = Vec::new();
    let (mut ns, mut nu) = (0, 0);
    for r in &f.robots {
        state_off.push(ns);
        ctrl_off.push(nu);
        ns += 3 + r.n_arm();
        nu += 2 + r.n_arm();
    }
    let obj = ns;
    ns += 4;
    let n_h = problem.n_h;
    let mut x0 = vec![0.0; ns];
    for (i, s) in problem.initial.robots.iter().enumerate() {
        let o = state_off[i];
        x0[o] = s.base.x;
        x0[o + 1] = s.base.y;
        x0[o + 2] = s.phi;
        x0[o + 3..o + 3 + s.arm.len()].copy_from_slice(&s.arm);
    }
    x0[obj..obj + 3].copy_from_slice(&problem.initial.p);
    x0[obj + 3] = problem.initial.psi;

    let mut set = ConstraintSet {
        problem,
        state_off,
        ctrl_off,
        ns,
        nu,
        x0,
        blocks: Vec::new(),
        rows: Vec::new(),
        m_eq: 0,
        lo: Vec::new(),
        hi: Vec::new(),
    };

    // (kind, step, vars, row descriptions) before global row numbering.
    let mut pending: Vec<(BlockKind, usize, Vec<Var>, Vec<ConstraintRow>)> = Vec::new();
    let n_obs = problem.obstacles.len();
    let wedged = f.n() >= 2;
    for k in 0..n_h {
        for (i, robot) in f.robots.iter().enumerate() {
            let na = robot.n_arm();
            let row = |kind, equality| ConstraintRow { step: k + 1, kind, robot: Some(i), body: None, equality };
            let mut vars: Vec<Var> = (0..3).map(|j| set.state_var(k, set.state_off[i] + j)).collect();
            vars.push(Var::Z(set.ctrl_idx(k, i, 0)));
            vars.push(Var::Z(set.ctrl_idx(k, i, 1)));
            vars.extend((0..3).map(|j| set.state_var(k + 1, set.state_off[i] + j)));
            pending.push((BlockKind::BaseDynamics, k, vars, vec![row(ConstraintKind::Dynamics, true); 3]));
            if na > 0 {
                let mut vars: Vec<Var> = (0..na).map(|j| set.state_var(k, set.state_off[i] + 3 + j)).collect();
                vars.extend((0..na).map(|j| Var::Z(set.ctrl_idx(k, i, 2 + j))));
                vars.extend((0..na).map(|j| set.state_var(k + 1, set.state_off[i] + 3 + j)));
                pending.push((BlockKind::ArmDynamics { n_arm: na }, k, vars, vec![row(ConstraintKind::Dynamics, true); na]));
            }
        }
        let step = k + 1;
        let n_corr = problem.corridors[step].b.len();
        for (i, robot) in f.robots.iter().enumerate() {
            let na = robot.n_arm();
            let mut vars: Vec<Var> = (0..3 + na).map(|j| set.state_var(step, set.state_off[i] + j)).collect();
            vars.extend((0..4).map(|j| set.state_var(step, obj + j)));
            let row = |kind, body, equality| ConstraintRow { step, kind, robot: Some(i), body, equality };
            let mut rows = vec![row(ConstraintKind::Grasp, None, true); 4];
            for body in [Body::Base, Body::Arm] {
                rows.extend(std::iter::repeat_n(row(ConstraintKind::Corridor, Some(body), false), n_corr));
            }
            if wedged {
                let n_w = if f.wedge_angles()[i].1 - f.wedge_angles()[i].0 >= std::f64::consts::PI - 1e-12 { 1 } else { 2 };
                for body in [Body::Base, Body::Arm] {
                    rows.extend(std::iter::repeat_n(row(ConstraintKind::Wedge, Some(body), false), n_w));
                }
            }
            for body in [Body::Base, Body::Arm] {
                rows.extend(std::iter::repeat_n(row(ConstraintKind::DynamicObstacle, Some(body), false), n_obs));
            }
            pending.push((BlockKind::Robot { robot: i }, step, vars, rows));
        }
        let vars = vec![set.state_var(step, obj), set.state_var(step, obj + 1)];
        let row = |kind| ConstraintRow { step, kind, robot: None, body: Some(Body::Object), equality: false };
        let mut rows = vec![row(ConstraintKind::Corridor); n_corr];
        rows.extend(std::iter::repeat_n(row(ConstraintKind::DynamicObstacle), n_obs));
        pending.push((BlockKind::Object, step, vars, rows));
    }

    let m_eq: usize = pending.iter().map(|p| p.3.iter().filter(|r| r.equality).count()).sum();
    let (mut next_eq, mut next_in) = (0, m_eq);
    let mut all_rows = vec![None; pending.iter().map(|p| p.3.len()).sum()];
    for (kind, step, vars, rows) in pending {
        let mut idx = Vec::with_capacity(rows.len());
        for r in rows {
            let g = if r.equality {
                next_eq += 1;
                next_eq - 1
            } else {
                next_in += 1;
                next_in - 1
            };
            all_rows[g] = Some(r);
            idx.push(g);
        }
        set.blocks.push(Block { kind, step, vars, rows: idx });
    }
    set.rows = all_rows.into_iter().map(|r| r.expect("every row assigned")).collect();
    set.m_eq = m_eq;

    let n = n_h * (nu + ns);
    set.lo = vec![f64::NEG_INFINITY; n];
    set.hi = vec![f64::INFINITY; n];
    for k in 0..n_h {
        for (i, robot) in f.robots.iter().enumerate() {
            let l = &robot.limits;
            for j in 0..2 + robot.n_arm() {
                let z = set.ctrl_idx(k, i, j);
                set.lo[z] = l.u_min[j];
                set.hi[z] = l.u_max[j];
            }
            for j in 0..robot.n_arm() {
                let z = set.state_idx(k + 1, set.state_off[i] + 3 + j);
                set.lo[z] = l.q_min[j];
                set.hi[z] = l.q_max[j];
            }
        }
        let z = set.state_idx(k + 1, obj + 2);
        set.lo[z] = 0.0;
        set.hi[z] = f.z_h;
    }
    Ok(set)
}

impl<'a> ConstraintSet<'a> {
    pub fn rows(&self) -> &[ConstraintRow] {
        &self.rows
    }

    pub fn count(&self, kind: ConstraintKind) -> usize {
        self.rows.iter().filter(|r| r.kind == kind).count()
    }

    pub fn n_vars(&self) -> usize {
        self.problem.n_h * (self.nu + self.ns)
    }

    /// Constraint values for a state/control trajectory, in row order.
    pub fn evaluate(&self, states: &[FormationConfig<f64>], controls: &[Vec<ControlInput<f64>>]) -> Result<Vec<f64>> {
        let z = self.pack(states, controls)?;
        Ok(self.constraint_values(&z))
    }

    fn obj_off(&self) -> usize {
        self.ns - 4
    }

    fn state_idx(&self, k: usize, j: usize) -> usize {
        debug_assert!(k >= 1);
        (k - 1) * (self.nu + self.ns) + self.nu + j
    }

    fn ctrl_idx(&self, k: usize, i: usize, j: usize) -> usize {
        k * (self.nu + self.ns) + self.ctrl_off[i] + j
    }

    fn state_var(&self, k: usize, j: usize) -> Var {
        if k == 0 {
            Var::Const(self.x0[j])
        } else {
            Var::Z(self.state_idx(k, j))
        }
    }

    fn local(&self, b: &Block, z: &[f64]) -> Vec<f64> {
        b.vars
            .iter()
            .map(|v| match v {
                Var::Z(i) => z[*i],
                Var::Const(c) => *c,
            })
            .collect()
    }

    fn block_values<T: Real>(&self, b: &Block, v: &[T]) -> Vec<T> {
        let p = self.problem;
        let tc = T::lit(p.t_c);
        match b.kind {
            BlockKind::BaseDynamics => {
                let (x, y, phi) = rk4_base(v[0], v[1], v[2], v[3], v[4], tc);
                vec![v[5] - x, v[6] - y, v[7] - phi]
            }
            BlockKind::ArmDynamics { n_arm } => (0..n_arm).map(|j| v[2 * n_arm + j] - v[j] - v[n_arm + j] * tc).collect(),
            BlockKind::Robot { robot } => {
                let model = &p.formation.robots[robot];
                let na = model.n_arm();
                let (x, y, phi) = (v[0], v[1], v[2]);
                let arm = &v[3..3 + na];
                let obj = &v[3 + na..7 + na];
                let ee = ee_frame(x, y, phi, arm, &model.dh);
                let mut out = grasp_residual_from_frame(&ee, [obj[0], obj[1], obj[2]], obj[3], &p.formation.grasps[robot]).to_vec();
                let base = Point2::new(x, y);
                let r_base = T::lit(model.base_radius());
                let ac = arm_circle(x, y, phi, arm, model);
                let d_safe = T::lit(p.safety.d_safe);
                let corridor = &p.corridors[b.step];
                for (c, r) in [(base, r_base), (ac.c, ac.r)] {
                    for h in corridor.rows() {
                        out.push(T::lit(h.a.x) * c.x + T::lit(h.a.y) * c.y - T::lit(h.b) + d_safe + r);
                    }
                }
                if p.formation.n() >= 2 {
                    let planes = wedge_planes(&p.formation, Point2::new(obj[0], obj[1]), obj[3]).expect("two or more robots");
                    for c in [base, ac.c] {
                        for h in &planes[robot] {
                            out.push(h.eval(c));
                        }
                    }
                }
                let dt = p.t_c * b.step as f64;
                let d_dyn = T::lit(p.safety.d_safe_dyn);
                for (c, r) in [(base, r_base), (ac.c, ac.r)] {
                    for o in &p.obstacles {
                        let q = o.at(dt);
                        let (dx, dy) = (c.x - T::lit(q.x), c.y - T::lit(q.y));
                        out.push(T::lit(o.r) + r + d_dyn - (dx * dx + dy * dy).sqrt());
                    }
                }
                out
            }
            BlockKind::Object => {
                let r = T::lit(p.formation.object.circumradius());
                let d_safe = T::lit(p.safety.d_safe);
                let mut out: Vec<T> = p.corridors[b.step]
                    .rows()
                    .map(|h| T::lit(h.a.x) * v[0] + T::lit(h.a.y) * v[1] - T::lit(h.b) + d_safe + r)
                    .collect();
                let dt = p.t_c * b.step as f64;
                let d_dyn = T::lit(p.safety.d_safe_dyn);
                for o in &p.obstacles {
                    let q = o.at(dt);
                    let (dx, dy) = (v[0] - T::lit(q.x), v[1] - T::lit(q.y));
                    out.push(T::lit(o.r) + r + d_dyn - (dx * dx + dy * dy).sqrt());
                }
                out
            }
        }
    }

    fn constraint_values(&self, z: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; self.rows.len()];
        for b in &self.blocks {
            let vals = self.block_values(b, &self.local(b, z));
            for (r, v) in b.rows.iter().zip(vals) {
                c[*r] = v;
            }
        }
        c
    }

    fn objective(&self, z: &[f64], grad: Option<&mut Vec<f64>>) -> f64 {
        let p = self.problem;
        let w = &p.weights;
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.clear();
            g.resize(z.len(), 0.0);
        }
        let obj = self.obj_off();
        // Tracking error of the pinned state is a constant of the problem.
        let e0 = [self.x0[obj] - p.reference[0].x, self.x0[obj + 1] - p.reference[0].y];
        let mut f = w.w_e[0] * e0[0] * e0[0] + w.w_e[1] * e0[1] * e0[1];
        for k in 0..p.n_h {
            for (i, robot) in p.formation.robots.iter().enumerate() {
                for j in 0..2 + robot.n_arm() {
                    let idx = self.ctrl_idx(k, i, j);
                    let wj = w.w_u_at(j);
                    f += wj * z[idx] * z[idx];
                    if let Some(g) = g.as_deref_mut() {
                        g[idx] += 2.0 * wj * z[idx];
                    }
                }
            }
            let step = k + 1;
            let we = if step == p.n_h { w.w_n } else { w.w_e };
            for d in 0..2 {
                let idx = self.state_idx(step, obj + d);
                let e = z[idx] - if d == 0 { p.reference[step].x } else { p.reference[step].y };
                f += we[d] * e * e;
                if let Some(g) = g.as_deref_mut() {
                    g[idx] += 2.0 * we[d] * e;
                }
            }
        }
        f
    }

    fn objective_hessian(&self, stages: &mut [DMatrix<f64>]) {
        let mut add = |i: usize, v: f64| {
            let (g, l) = self.stage_of(i);
            stages[g][(l, l)] += v;
        };
        let p = self.problem;
        let w = &p.weights;
        for k in 0..p.n_h {
            for (i, robot) in p.formation.robots.iter().enumerate() {
                for j in 0..2 + robot.n_arm() {
                    let idx = self.ctrl_idx(k, i, j);
                    add(idx, 2.0 * w.w_u_at(j));
                }
            }
            let step = k + 1;
            let we = if step == p.n_h { w.w_n } else { w.w_e };
            for d in 0..2 {
                let idx = self.state_idx(step, self.obj_off() + d);
                add(idx, 2.0 * we[d]);
            }
        }
    }

    /// Flatten a trajectory into the decision vector.
    fn pack(&self, states: &[FormationConfig<f64>], controls: &[Vec<ControlInput<f64>>]) -> Result<Vec<f64>> {
        let n_h = self.problem.n_h;
        if states.len() != n_h + 1 || controls.len() != n_h {
            return Err(invalid(format!("trajectory needs {} states and {n_h} controls", n_h + 1)));
        }
        let mut z = vec![0.0; self.n_vars()];
        for k in 0..n_h {
            for (i, u) in controls[k].iter().enumerate() {
                for (j, val) in u.to_vec().into_iter().enumerate() {
                    z[self.ctrl_idx(k, i, j)] = val;
                }
            }
            let s = &states[k + 1];
            for (i, r) in s.robots.iter().enumerate() {
                let o = self.state_idx(k + 1, self.state_off[i]);
                z[o] = r.base.x;
                z[o + 1] = r.base.y;
                z[o + 2] = r.phi;
                z[o + 3..o + 3 + r.arm.len()].copy_from_slice(&r.arm);
            }
            let o = self.state_idx(k + 1, self.obj_off());
            z[o..o + 3].copy_from_slice(&s.p);
            z[o + 3] = s.psi;
        }
        Ok(z)
    }

    fn unpack(&self, z: &[f64]) -> (Vec<FormationConfig<f64>>, Vec<Vec<ControlInput<f64>>>) {
        let f = &self.problem.formation;
        let mut states = vec![self.problem.initial.clone()];
        let mut controls = Vec::with_capacity(self.problem.n_h);
        for k in 0..self.problem.n_h {
            controls.push(
                f.robots
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let o = self.ctrl_idx(k, i, 0);
                        ControlInput::from_slice(&z[o..o + 2 + r.n_arm()])
                    })
                    .collect(),
            );
            let robots = f
                .robots
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let o = self.state_idx(k + 1, self.state_off[i]);
                    MMRState { base: Point2::new(z[o], z[o + 1]), phi: z[o + 2], arm: z[o + 3..o + 3 + r.n_arm()].to_vec() }
                })
                .collect();
            let o = self.state_idx(k + 1, self.obj_off());
            states.push(FormationConfig { p: [z[o], z[o + 1], z[o + 2]], psi: z[o + 3], robots });
        }
        (states, controls)
    }

    /// First guess: object on the reference at the current yaw and height,
    /// robots placed by rigid transport of the current formation, controls
    /// from finite differences.
    fn initial_guess(&self) -> Vec<f64> {
        let p = self.problem;
        let init = &p.initial;
        let mut states = vec![init.clone()];
        for k in 1..=p.n_h {
            let target = p.reference[k];
            let (dx, dy) = (target.x - init.p[0], target.y - init.p[1]);
            let robots = init
                .robots
                .iter()
                .map(|r| MMRState { base: Point2::new(r.base.x + dx, r.base.y + dy), phi: r.phi, arm: r.arm.clone() })
                .collect();
            states.push(FormationConfig { p: [target.x, target.y, init.p[2]], psi: init.psi, robots });
        }
        let controls = self.difference_controls(&states);
        self.pack(&states, &controls).expect("consistent sizes")
    }

    /// Controls that best reproduce consecutive states, within limits.
    fn difference_controls(&self, states: &[FormationConfig<f64>]) -> Vec<Vec<ControlInput<f64>>> {
        let tc = self.problem.t_c;
        (0..self.problem.n_h)
            .map(|k| {
                self.problem
                    .formation
                    .robots
                    .iter()
                    .enumerate()
                    .map(|(i, model)| {
                        let (a, b) = (&states[k].robots[i], &states[k + 1].robots[i]);
                        let d = b.base - a.base;
                        let v = d.dot(Point2::from_angle(a.phi)) / tc;
                        let omega = wrap_angle(b.phi - a.phi) / tc;
                        let rates = a.arm.iter().zip(&b.arm).map(|(qa, qb)| (qb - qa) / tc).collect();
                        model.limits.clamp_control(&ControlInput { v, omega, arm_rates: rates })
                    })
                    .collect()
            })
            .collect()
    }

    /// Stage of a decision variable and its position inside that stage.
    /// Stage `k` holds `[x_k, u_k]`; stage 0 has only `u_0`, stage `N` only `x_N`.
    fn stage_of(&self, i: usize) -> (usize, usize) {
        let stride = self.nu + self.ns;
        let (q, r) = (i / stride, i % stride);
        let g = if r < self.nu { q } else { q + 1 };
        (g, i - self.stage_start(g))
    }

    fn stage_start(&self, g: usize) -> usize {
        (g * (self.nu + self.ns)).saturating_sub(self.ns)
    }

    fn stage_len(&self, g: usize) -> usize {
        let end = (g * (self.nu + self.ns) + self.nu).min(self.n_vars());
        end - self.stage_start(g)
    }

    fn block_hessian(&self, b: &Block, z: &[f64], lambda: &[f64], stages: &mut [DMatrix<f64>]) {
        if matches!(b.kind, BlockKind::ArmDynamics { .. }) {
            return;
        }
        let weights: Vec<f64> = b.rows.iter().map(|r| lambda.get(*r).copied().unwrap_or(0.0)).collect();
        if weights.iter().all(|w| *w == 0.0) {
            return;
        }
        let local = self.local(b, z);
        let (_, _, h) = hessian(
            |v| {
                self.block_values(b, v)
                    .into_iter()
                    .zip(&weights)
                    .fold(HyperDual64::zero(), |acc, (g, w)| acc + g * HyperDual64::lit(*w))
            },
            &local,
        );
        let nl = local.len();
        for (lr, vr) in b.vars.iter().enumerate() {
            let Var::Z(gr) = vr else { continue };
            let (sr, ir) = self.stage_of(*gr);
            for (lc, vc) in b.vars.iter().enumerate() {
                let Var::Z(gc) = vc else { continue };
                let v = h[lr * nl + lc];
                if v == 0.0 {
                    continue;
                }
                let (sc, ic) = self.stage_of(*gc);
                // Every nonlinear term involves a single stage.
                debug_assert_eq!(sr, sc, "cross-stage curvature");
                if sr == sc {
                    stages[sr][(ir, ic)] += v;
                }
            }
        }
    }
}

/// `m` with its negative eigenvalues mirrored to positive ones.
fn psd_part(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().all(|e| *e >= 0.0) {
        return m;
    }
    let clipped = eig.eigenvalues.map(f64::abs);
    &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

impl Nlp for ConstraintSet<'_> {
    fn n(&self) -> usize {
        self.n_vars()
    }

    fn m_eq(&self) -> usize {
        self.m_eq
    }

    fn m_in(&self) -> usize {
        self.rows.len() - self.m_eq
    }

    fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    fn eval(&self, z: &[f64]) -> Eval {
        let mut grad = Vec::new();
        let f = self.objective(z, Some(&mut grad));
        let mut c = vec![0.0; self.rows.len()];
        let mut jac = Triplets::default();
        for b in &self.blocks {
            let local = self.local(b, z);
            let (vals, j) = jacobian(|v| self.block_values(b, v), &local);
            let nl = local.len();
            for (ri, (r, v)) in b.rows.iter().zip(vals).enumerate() {
                c[*r] = v;
                for (l, var) in b.vars.iter().enumerate() {
                    if let Var::Z(g) = var {
                        jac.push(*r, *g, j[ri * nl + l]);
                    }
                }
            }
        }
        Eval { f, grad, c, jac }
    }

    fn values(&self, z: &[f64]) -> (f64, Vec<f64>) {
        (self.objective(z, None), self.constraint_values(z))
    }

    fn hessian(&self, z: &[f64], lambda: &[f64]) -> Triplets {
        let n_h = self.problem.n_h;
        let mut stages: Vec<DMatrix<f64>> = (0..=n_h).map(|g| DMatrix::zeros(self.stage_len(g), self.stage_len(g))).collect();
        self.objective_hessian(&mut stages);
        for b in &self.blocks {
            self.block_hessian(b, z, lambda, &mut stages);
        }
        // The Lagrangian Hessian is block diagonal by stage, so projecting
        // each stage block gives the nearest positive semidefinite matrix.
        let mut t = Triplets::default();
        for (g, m) in stages.into_iter().enumerate() {
            let start = self.stage_start(g);
            let m = if m.iter().all(|v| *v == 0.0) { m } else { psd_part(m) };
            for r in 0..m.nrows() {
                for c in r..m.ncols() {
                    t.push(start + r, start + c, m[(r, c)]);
                }
                t.push(start + r, start + r, HESSIAN_SHIFT);
            }
        }
        t
    }
}

/// Diagonal shift that keeps every QP strictly convex.
const HESSIAN_SHIFT: f64 = 1e-8;

fn max_violation(rows: &[ConstraintRow], c: &[f64]) -> f64 {
    rows.iter().zip(c).map(|(r, v)| if r.equality { v.abs() } else { v.max(0.0) }).fold(0.0, f64::max)
}

/// Solve one horizon. `warm_start` is a previous trajectory already aligned
/// with this problem's steps (see [`shift_solution`]).
pub fn solve_horizon(problem: &HorizonProblem, warm_start: Option<&HorizonSolution>, config: &PlannerConfig) -> Result<HorizonSolution> {
    let start = Instant::now();
    let set = build_constraints(problem)?;
    let mut warnings = Vec::new();
    let init_margin = pinned_state_violation(problem);
    if init_margin > 1e-6 {
        let msg = format!("pinned state violates safety margins by {init_margin:.3e} m");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let z0 = match warm_start {
        Some(ws) => set.pack(&ws.states, &ws.controls)?,
        None => set.initial_guess(),
    };
    // Tighter internal feasibility so that re-simulating the controls stays
    // within tolerance after errors accumulate over the horizon.
    let opts = SqpOptions { max_iter: config.max_iter, kkt_tol: config.kkt_tol, feas_tol: 1e-2 * config.feas_tol };
    let res = sqp::solve(&set, &z0, &opts);
    if res.status == SqpStatus::Infeasible {
        return Err(Error::SolverFailure {
            iterations: res.iterations,
            violation: res.violation,
            best_iterate: res.x,
            report: res.report,
        });
    }
    let c = set.constraint_values(&res.x);
    let (states, controls) = set.unpack(&res.x);
    let active = set.rows.iter().zip(&c).filter(|(r, v)| !r.equality && **v > -1e-6).count();
    Ok(HorizonSolution {
        states,
        controls,
        objective: res.f,
        kkt_residual: res.kkt,
        max_constraint_violation: max_violation(&set.rows, &c),
        solve_time: start.elapsed().as_secs_f64(),
        iterations: res.iterations,
        status: if res.status == SqpStatus::Optimal { SolveStatus::Optimal } else { SolveStatus::FeasibleNotOptimal },
        active_constraints: active,
        warnings,
    })
}

/// Largest corridor or wedge violation of the pinned state.
fn pinned_state_violation(problem: &HorizonProblem) -> f64 {
    let f = &problem.formation;
    let cfg = &problem.initial;
    let d = problem.safety.d_safe;
    let corridor = &problem.corridors[0];
    let mut worst: f64 = 0.0;
    let circles = crate::robot_model::bounding_circles(f, cfg);
    for c in circles.all() {
        worst = worst.max(c.r + d - corridor.slack(c.c));
    }
    if f.n() >= 2 {
        if let Ok(planes) = wedge_planes(f, Point2::new(cfg.p[0], cfg.p[1]), cfg.psi) {
            for (i, rows) in planes.iter().enumerate() {
                for h in rows {
                    worst = worst.max(h.eval(circles.bases[i].c)).max(h.eval(circles.arms[i].c));
                }
            }
        }
    }
    worst
}

/// Drop the first `steps` steps of a solution and pad the tail by holding the
/// last state with zero controls.
pub fn shift_solution(sol: &HorizonSolution, steps: usize) -> HorizonSolution {
    let mut out = sol.clone();
    let n_h = sol.controls.len();
    let s = steps.min(n_h);
    out.states.drain(..s);
    out.controls.drain(..s);
    let last = out.states.last().cloned().expect("states");
    let zero: Vec<ControlInput<f64>> = last.robots.iter().map(|r| ControlInput::zero(r.arm.len())).collect();
    while out.controls.len() < n_h {
        out.states.push(last.clone());
        out.controls.push(zero.clone());
    }
    out
}

/// Per-horizon diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HorizonRecord {
    pub t: f64,
    pub lambda: usize,
    pub obstacles: usize,
    pub objective: Option<f64>,
    pub kkt_residual: Option<f64>,
    pub max_constraint_violation: Option<f64>,
    pub solve_time: f64,
    pub iterations: usize,
    pub status: String,
    pub active_constraints: usize,
    pub warnings: Vec<String>,
}

/// Obstacle snapshots seen by the planner at time `t` with the object at `com`.
pub trait ObstacleFeed {
    fn snapshot(&mut self, t: f64, com: Point2<f64>) -> Vec<ObstacleSnapshot>;
}

impl<F: FnMut(f64, Point2<f64>) -> Vec<ObstacleSnapshot>> ObstacleFeed for F {
    fn snapshot(&mut self, t: f64, com: Point2<f64>) -> Vec<ObstacleSnapshot> {
        self(t, com)
    }
}

/// Executed trajectory of a receding-horizon drive on a uniform `T_c` grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DriveResult {
    pub t_c: f64,
    /// `states[s]` at time `s·T_c`.
    pub states: Vec<FormationConfig<f64>>,
    /// `controls[s]` drives `states[s]` to `states[s + 1]`.
    pub controls: Vec<Vec<ControlInput<f64>>>,
    /// Corridor assigned to each executed state.
    pub corridor_index: Vec<usize>,
    /// Obstacle snapshots the planner used for each cycle, by cycle start step.
    pub horizons: Vec<HorizonRecord>,
    /// Steps between replans.
    pub steps_per_cycle: usize,
    pub completed: bool,
    pub diagnostic: Option<String>,
}

/// Reference points of a plan sampled at `v_op·T_c` and the corridor of each.
pub fn reference_schedule(plan: &GlobalPlan, config: &PlannerConfig) -> Result<(Vec<Point2<f64>>, Vec<usize>)> {
    let pts = discretize_reference(&plan.reference, config.v_op, config.t_c)?;
    let corridors = plan.corridors();
    let mut assign = Vec::with_capacity(pts.len());
    let mut cur = 0usize;
    for p in &pts {
        // Latest corridor that contains the point, never moving backwards.
        if let Some(j) = (cur..corridors.len()).rev().find(|&j| corridors[j].slack(*p) >= -1e-9) {
            cur = j;
        }
        assign.push(cur);
    }
    Ok((pts, assign))
}

/// Whether every body of `cfg` keeps `margin` inside `corridor`.
fn fits(formation: &Formation, cfg: &FormationConfig<f64>, corridor: &ConvexRegion, margin: f64) -> bool {
    bounding_circles(formation, cfg).all().iter().all(|c| corridor.slack(c.c) >= c.r + margin)
}

/// Corridor for each predicted configuration, starting from `start` and never
/// moving backwards. A later corridor is taken as soon as the whole
/// formation fits in it; if the object centre leaves the current corridor,
/// the later corridor containing it most deeply is taken instead.
pub fn assign_corridors(formation: &Formation, corridors: &[ConvexRegion], guesses: &[FormationConfig<f64>], start: usize, margin: f64) -> Vec<usize> {
    let mut cur = start.min(corridors.len() - 1);
    guesses
        .iter()
        .map(|g| {
            if let Some(j) = (cur + 1..corridors.len()).rev().find(|&j| fits(formation, g, &corridors[j], margin)) {
                cur = j;
            } else {
                let p = Point2::new(g.p[0], g.p[1]);
                if corridors[cur].slack(p) < 0.0 {
                    let deepest = (cur + 1..corridors.len())
                        .map(|j| (j, corridors[j].slack(p)))
                        .filter(|(_, s)| *s >= 0.0)
                        .max_by(|a, b| a.1.total_cmp(&b.1));
                    if let Some((j, _)) = deepest {
                        cur = j;
                    }
                }
            }
            cur
        })
        .collect()
}

/// `cfg` moved rigidly so that the object centre sits at `to`.
fn translated(cfg: &FormationConfig<f64>, to: Point2<f64>) -> FormationConfig<f64> {
    let d = to - Point2::new(cfg.p[0], cfg.p[1]);
    let mut out = cfg.clone();
    out.p[0] += d.x;
    out.p[1] += d.y;
    for r in &mut out.robots {
        r.base = r.base + d;
    }
    out
}

/// Index of the reference point nearest to `p`, searching from `from` on.
pub fn nearest_reference(reference: &[Point2<f64>], p: Point2<f64>, from: usize) -> usize {
    let mut best = from.min(reference.len() - 1);
    let mut best_d = f64::INFINITY;
    for (i, r) in reference.iter().enumerate().skip(from) {
        let d = (*r - p).norm();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn at_goal(cfg: &FormationConfig<f64>, goal: Point2<f64>, goal_yaw: Option<f64>, config: &PlannerConfig) -> bool {
    let pos_ok = (Point2::new(cfg.p[0], cfg.p[1]) - goal).norm() <= config.goal_tol;
    let yaw_ok = goal_yaw.is_none_or(|y| wrap_angle(cfg.psi - y).abs() <= config.yaw_tol);
    pos_ok && yaw_ok
}

/// Plan, execute `T_e`, re-sense and replan until the object reaches the end
/// of the reference. States advance by RK4 on the executed controls; the
/// object follows the planned pose.
pub fn receding_horizon_drive(
    plan: &GlobalPlan,
    formation: &Formation,
    initial: FormationConfig<f64>,
    config: &PlannerConfig,
    goal_yaw: Option<f64>,
    feed: &mut dyn ObstacleFeed,
) -> Result<DriveResult> {
    receding_horizon_drive_observed(plan, formation, initial, config, goal_yaw, feed, &mut |_, _| {})
}

/// [`receding_horizon_drive`], handing every successful solve and the problem
/// it answered to `observer`.
pub fn receding_horizon_drive_observed(
    plan: &GlobalPlan,
    formation: &Formation,
    initial: FormationConfig<f64>,
    config: &PlannerConfig,
    goal_yaw: Option<f64>,
    feed: &mut dyn ObstacleFeed,
    observer: &mut dyn FnMut(&HorizonProblem, &HorizonSolution),
) -> Result<DriveResult> {
    config.validate()?;
    let (reference, _) = reference_schedule(plan, config)?;
    let corridors = plan.corridors();
    let goal = *reference.last().expect("reference has points");
    let n_h = config.n_h();
    let n_e = config.n_e();
    let com = |c: &FormationConfig<f64>| Point2::new(c.p[0], c.p[1]);

    let mut lambda = nearest_reference(&reference, com(&initial), 0);
    let mut out = DriveResult {
        t_c: config.t_c,
        states: vec![initial.clone()],
        controls: Vec::new(),
        corridor_index: assign_corridors(formation, &corridors, std::slice::from_ref(&initial), 0, config.safety.d_safe),
        horizons: Vec::new(),
        steps_per_cycle: n_e,
        completed: false,
        diagnostic: None,
    };
    if at_goal(&initial, goal, goal_yaw, config) {
        out.completed = true;
        return Ok(out);
    }
    let max_steps = (config.max_duration / config.t_c).ceil() as usize;
    let mut warm: Option<HorizonSolution> = None;
    let mut failures = 0usize;
    let mut progress: Vec<f64> = Vec::new();

    loop {
        let step = out.controls.len();
        let t = step as f64 * config.t_c;
        let cur = out.states.last().cloned().expect("state");
        lambda = nearest_reference(&reference, com(&cur), lambda);
        let idx = |k: usize| (lambda + k).min(reference.len() - 1);
        let guesses: Vec<FormationConfig<f64>> = (0..=n_h)
            .map(|k| match &warm {
                Some(w) if k > 0 && k < w.states.len() - n_e => w.states[k].clone(),
                _ if k == 0 => cur.clone(),
                _ => translated(&cur, reference[idx(k)]),
            })
            .collect();
        let here = *out.corridor_index.last().expect("index");
        let step_corridor = assign_corridors(formation, &corridors, &guesses, here, config.safety.d_safe);
        let obstacles = feed.snapshot(t, com(&cur));
        let problem = HorizonProblem {
            formation: formation.clone(),
            n_h,
            t_c: config.t_c,
            initial: cur.clone(),
            reference: (0..=n_h).map(|k| reference[idx(k)]).collect(),
            corridors: step_corridor.iter().map(|&c| corridors[c].clone()).collect(),
            obstacles: obstacles.clone(),
            weights: config.weights.clone(),
            safety: config.safety,
        };
        let ws = warm.take().map(|mut w| {
            // The pinned state is the executed one.
            w.states[0] = cur.clone();
            w
        });
        let t0 = Instant::now();
        let result = solve_horizon(&problem, ws.as_ref(), config);
        let mut record = HorizonRecord {
            t,
            lambda,
            obstacles: obstacles.len(),
            objective: None,
            kkt_residual: None,
            max_constraint_violation: None,
            solve_time: t0.elapsed().as_secs_f64(),
            iterations: 0,
            status: String::new(),
            active_constraints: 0,
            warnings: Vec::new(),
        };
        let controls: Vec<Vec<ControlInput<f64>>>;
        let mut planned: Option<HorizonSolution> = None;
        match result {
            Ok(sol) => {
                observer(&problem, &sol);
                failures = 0;
                record.objective = Some(sol.objective);
                record.kkt_residual = Some(sol.kkt_residual);
                record.max_constraint_violation = Some(sol.max_constraint_violation);
                record.solve_time = sol.solve_time;
                record.iterations = sol.iterations;
                record.status = format!("{:?}", sol.status);
                record.active_constraints = sol.active_constraints;
                record.warnings = sol.warnings.clone();
                controls = sol.controls[..n_e].to_vec();
                planned = Some(sol);
            }
            Err(Error::SolverFailure { iterations, violation, report, .. }) => {
                failures += 1;
                record.iterations = iterations;
                record.max_constraint_violation = Some(violation);
                record.status = "SolverFailure".into();
                record.warnings = report.lines().map(str::to_string).collect();
                log::warn!("solver failure at t = {t:.2} s (violation {violation:.3e}); holding position");
                controls = vec![cur.robots.iter().map(|r| ControlInput::zero(r.arm.len())).collect(); n_e];
            }
            Err(e) => return Err(e),
        }
        out.horizons.push(record);
        if failures >= config.max_failures {
            out.diagnostic = Some(format!("aborted after {failures} consecutive solver failures at t = {t:.2} s"));
            return Ok(out);
        }

        let before = com(&cur);
        for (s, u) in controls.iter().enumerate() {
            let prev = out.states.last().expect("state");
            let robots: Vec<MMRState<f64>> = prev
                .robots
                .iter()
                .zip(u)
                .zip(&formation.robots)
                .map(|((r, ui), m)| step_rk4(r, &m.limits.clamp_control(ui), config.t_c))
                .collect();
            let (p, psi) = match &planned {
                Some(sol) => (sol.states[s + 1].p, sol.states[s + 1].psi),
                None => (prev.p, prev.psi),
            };
            let next = FormationConfig { p, psi, robots };
            let corridor = if planned.is_some() { step_corridor[s + 1] } else { *out.corridor_index.last().expect("index") };
            out.corridor_index.push(corridor);
            out.controls.push(u.clone());
            out.states.push(next);
            if at_goal(out.states.last().expect("state"), goal, goal_yaw, config) {
                out.completed = true;
                return Ok(out);
            }
        }
        let executed = controls.len();
        warm = planned.map(|sol| shift_solution(&sol, executed));

        progress.push((com(out.states.last().expect("state")) - before).norm());
        if progress.len() >= config.stall_cycles
            && progress[progress.len() - config.stall_cycles..].iter().sum::<f64>() < 1e-2
            && failures == 0
        {
            out.diagnostic = Some(format!("no progress over {} cycles at t = {:.2} s", config.stall_cycles, t));
            return Ok(out);
        }
        if out.controls.len() >= max_steps {
            out.diagnostic = Some(format!("time limit of {} s reached", config.max_duration));
            return Ok(out);
        }
    }
}
