//! Closed-loop kinematic simulation with moving obstacles and the safety
//! metrics recorded along the way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geom2d::{polygon_contains, Point2};
use crate::global_planner::{plan_global, ConvexRegion, Environment, GlobalPlan};
use crate::nmpc::{
    nearest_reference, receding_horizon_drive_observed, reference_schedule, DriveResult, HorizonProblem, HorizonSolution, ObstacleSnapshot,
    PlannerConfig,
};
use crate::robot_model::{bounding_circles, forward_kinematics, grasp_residual, inverse_placement, Formation, FormationConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicObstacle {
    /// Centre at `t = 0`.
    pub p0: Point2<f64>,
    pub v: Point2<f64>,
    pub r: f64,
    /// Times between which the obstacle exists.
    #[serde(default = "always")]
    pub active_window: [f64; 2],
}

fn always() -> [f64; 2] {
    [0.0, f64::INFINITY]
}

impl DynamicObstacle {
    pub fn position(&self, t: f64) -> Point2<f64> {
        self.p0 + self.v * t
    }

    pub fn is_active(&self, t: f64) -> bool {
        self.active_window[0] <= t && t <= self.active_window[1]
    }
}

/// Everything a closed-loop run needs.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub environment: Environment,
    pub formation: Formation,
    pub start_yaw: f64,
    pub goal_yaw: Option<f64>,
    /// Joint angles every robot starts with.
    pub arms: Vec<Vec<f64>>,
    pub obstacles: Vec<DynamicObstacle>,
    pub config: PlannerConfig,
    /// Scale every obstacle velocity by an independent factor in [0.8, 1.2].
    pub perturb_velocities: bool,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.environment.validate()?;
        self.formation.validate()?;
        self.config.validate()?;
        if self.arms.len() != self.formation.n() {
            return Err(invalid("one initial arm configuration per robot is required"));
        }
        if self.obstacles.iter().any(|o| !(o.r > 0.0)) {
            return Err(invalid("dynamic obstacle radius must be positive"));
        }
        Ok(())
    }

    pub fn initial_config(&self) -> Result<FormationConfig<f64>> {
        inverse_placement(&self.formation, self.environment.start, self.start_yaw, &self.arms)
    }

    /// Ground-truth obstacles, with velocities perturbed when enabled.
    pub fn ground_truth_obstacles(&self) -> Vec<DynamicObstacle> {
        if !self.perturb_velocities {
            return self.obstacles.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.obstacles
            .iter()
            .map(|o| {
                let s: f64 = rng.gen_range(0.8..=1.2);
                DynamicObstacle { v: o.v * s, ..o.clone() }
            })
            .collect()
    }
}

/// Obstacles the planner sees at time `t`: active ones whose centre lies
/// within `sensing_radius` of the object, at their exact position, with the
/// velocity the planner assumes for them.
pub fn obstacle_feed(t: f64, truth: &[DynamicObstacle], nominal: &[DynamicObstacle], com: Point2<f64>, sensing_radius: f64) -> Vec<ObstacleSnapshot> {
    truth
        .iter()
        .zip(nominal)
        .filter(|(o, _)| o.is_active(t) && (o.position(t) - com).norm() <= sensing_radius)
        .map(|(o, n)| ObstacleSnapshot { p: o.position(t), v: n.v, r: o.r })
        .collect()
}

/// `(d_static, d_dynamic)`. The static margin of a body is its best corridor
/// slack minus its radius; the dynamic margin is the smallest centre gap
/// minus both radii. `None` when there are no obstacles.
pub fn compute_margins(
    formation: &Formation,
    cfg: &FormationConfig<f64>,
    corridors: &[ConvexRegion],
    obstacles: &[(Point2<f64>, f64)],
) -> (f64, Option<f64>) {
    let circles = bounding_circles(formation, cfg).all();
    let d_static = circles
        .iter()
        .map(|c| corridors.iter().map(|k| k.slack(c.c) - c.r).fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min);
    let d_dynamic = obstacles
        .iter()
        .flat_map(|(p, r)| circles.iter().map(move |c| (c.c - *p).norm() - r - c.r))
        .reduce(f64::min);
    (d_static, d_dynamic)
}

/// Smallest gap between any body circle and the static obstacles or the
/// workspace boundary.
pub fn static_clearance(env: &Environment, formation: &Formation, cfg: &FormationConfig<f64>) -> f64 {
    bounding_circles(formation, cfg)
        .all()
        .iter()
        .map(|c| {
            let inside = polygon_contains(&env.boundary, c.c);
            let mut d = if inside { env.boundary.boundary_distance(c.c) } else { -env.boundary.boundary_distance(c.c) };
            for o in &env.obstacles {
                let s = o.boundary_distance(c.c);
                d = d.min(if polygon_contains(o, c.c) { -s } else { s });
            }
            d - c.r
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub t: Vec<f64>,
    pub d_static: Vec<f64>,
    /// `None` where no obstacle is active.
    pub d_dynamic: Vec<Option<f64>>,
    /// Gap to the true static obstacles, not to the corridors.
    pub clearance_static: Vec<f64>,
    pub tracking_error: Vec<f64>,
    pub object_yaw: Vec<f64>,
    /// Distance of every end-effector pair `(i, j)`, `i < j`, in pair order.
    pub ee_distance: Vec<Vec<f64>>,
    pub grasp_residual: Vec<f64>,
    pub solve_times: Vec<f64>,
    pub completed: bool,
    pub duration: f64,
    pub diagnostic: Option<String>,
}

impl RunMetrics {
    pub fn min_static(&self) -> f64 {
        self.d_static.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn min_dynamic(&self) -> Option<f64> {
        self.d_dynamic.iter().flatten().copied().reduce(f64::min)
    }

    /// Largest deviation of any end-effector distance from its initial value.
    pub fn ee_distance_deviation(&self) -> f64 {
        let Some(first) = self.ee_distance.first() else { return 0.0 };
        self.ee_distance
            .iter()
            .flat_map(|row| row.iter().zip(first).map(|(d, d0)| (d - d0).abs()))
            .fold(0.0, f64::max)
    }
}

pub struct RunOutput {
    pub plan: GlobalPlan,
    pub drive: DriveResult,
    pub metrics: RunMetrics,
}

/// Plan globally, then drive the formation through the scenario.
pub fn run_scenario(scenario: &Scenario) -> Result<RunOutput> {
    scenario.validate()?;
    let plan = plan_global(&scenario.environment, scenario.formation.enclosing_radius())?;
    run_with_plan(scenario, plan)
}

/// Drive with an existing global plan.
pub fn run_with_plan(scenario: &Scenario, plan: GlobalPlan) -> Result<RunOutput> {
    run_with_plan_observed(scenario, plan, &mut |_, _| {})
}

/// [`run_with_plan`] with every successful horizon solve passed to `observer`.
pub fn run_with_plan_observed(
    scenario: &Scenario,
    plan: GlobalPlan,
    observer: &mut dyn FnMut(&HorizonProblem, &HorizonSolution),
) -> Result<RunOutput> {
    scenario.validate()?;
    let initial = scenario.initial_config()?;
    let truth = scenario.ground_truth_obstacles();
    let radius = scenario.config.sensing_radius;
    let mut feed = |t: f64, com: Point2<f64>| obstacle_feed(t, &truth, &scenario.obstacles, com, radius);
    let drive = receding_horizon_drive_observed(&plan, &scenario.formation, initial, &scenario.config, scenario.goal_yaw, &mut feed, observer)?;
    let metrics = measure(scenario, &plan, &drive, &truth)?;
    Ok(RunOutput { plan, drive, metrics })
}

fn measure(scenario: &Scenario, plan: &GlobalPlan, drive: &DriveResult, truth: &[DynamicObstacle]) -> Result<RunMetrics> {
    let f = &scenario.formation;
    let corridors = plan.corridors();
    let (reference, _) = reference_schedule(plan, &scenario.config)?;
    let mut m = RunMetrics {
        completed: drive.completed,
        diagnostic: drive.diagnostic.clone(),
        solve_times: drive.horizons.iter().map(|h| h.solve_time).collect(),
        ..RunMetrics::default()
    };
    let mut lambda = 0;
    for (s, cfg) in drive.states.iter().enumerate() {
        let t = s as f64 * drive.t_c;
        let obs: Vec<(Point2<f64>, f64)> = truth.iter().filter(|o| o.is_active(t)).map(|o| (o.position(t), o.r)).collect();
        let (ds, dd) = compute_margins(f, cfg, &corridors, &obs);
        m.t.push(t);
        m.d_static.push(ds);
        m.d_dynamic.push(dd);
        m.clearance_static.push(static_clearance(&scenario.environment, f, cfg));
        let com = Point2::new(cfg.p[0], cfg.p[1]);
        lambda = nearest_reference(&reference, com, lambda);
        m.tracking_error.push((com - reference[lambda]).norm());
        m.object_yaw.push(cfg.psi);
        let ee: Vec<[f64; 3]> = cfg
            .robots
            .iter()
            .zip(&f.robots)
            .map(|(r, model)| forward_kinematics(r, &model.dh).map(|(p, _)| p))
            .collect::<Result<_>>()?;
        let mut pairs = Vec::new();
        for i in 0..ee.len() {
            for j in i + 1..ee.len() {
                pairs.push(((0..3).map(|k| (ee[i][k] - ee[j][k]).powi(2)).sum::<f64>()).sqrt());
            }
        }
        m.ee_distance.push(pairs);
        let mut g: f64 = 0.0;
        for i in 0..f.n() {
            g = g.max(grasp_residual(f, cfg, i)?.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        }
        m.grasp_residual.push(g);
    }
    m.duration = m.t.last().copied().unwrap_or(0.0);
    Ok(m)
}
