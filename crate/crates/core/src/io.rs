//! File formats: scenario JSON, plan artifacts, trajectory CSV, metrics JSON,
//! the JSON-lines solver log and SVG plots.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::geom2d::{Point2, Polygon};
use crate::global_planner::{discretize_reference, Environment, GlobalPlan};
use crate::nmpc::{DriveResult, HorizonRecord, PlannerConfig};
use crate::robot_model::{default_dh_table, DHRow, Formation, Grasp, Limits, ObjectShape, RobotModel};
use crate::sim::{DynamicObstacle, RunMetrics, Scenario};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub boundary: Polygon<f64>,
    #[serde(default)]
    pub obstacles: Vec<Polygon<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Object yaw; optional for the goal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yaw: Option<f64>,
}

/// Identical robots, one grasp and one initial arm configuration each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotsSpec {
    pub count: usize,
    #[serde(default = "default_dh_table")]
    pub dh: Vec<DHRow>,
    /// Defaults to the standard box for the arm length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<Limits>,
    #[serde(default = "default_footprint")]
    pub footprint: Polygon<f64>,
    #[serde(default = "default_link_radius")]
    pub link_radius: f64,
    pub grasps: Vec<Grasp>,
    /// Initial joint angles per robot; all zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arms: Option<Vec<Vec<f64>>>,
}

fn default_footprint() -> Polygon<f64> {
    RobotModel::with_square_base(0.3).footprint
}

fn default_link_radius() -> f64 {
    RobotModel::with_square_base(0.3).link_radius
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: ObjectShape,
    /// Upper bound on the object height; unbounded when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_h: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub p0: Point2<f64>,
    pub v: Point2<f64>,
    pub r: f64,
    #[serde(default)]
    pub t_start: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
}

/// On-disk scenario. Everything but the geometry, robots and task has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub environment: EnvironmentSpec,
    pub robots: RobotsSpec,
    pub object: ObjectSpec,
    pub start: Pose,
    pub goal: Pose,
    #[serde(default)]
    pub dynamic_obstacles: Vec<ObstacleSpec>,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub perturb_velocities: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioFile {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the compact serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    /// Hex SHA-256 over the parts a global plan depends on: workspace, task,
    /// robots, object and planner parameters. Dynamic obstacles, the seed and
    /// the perturbation flag are left out so one plan serves every run of the
    /// same layout.
    pub fn plan_hash(&self) -> Result<String> {
        let key = (&self.environment, &self.robots, &self.object, &self.start, &self.goal, &self.planner);
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&key)?)))
    }

    /// Apply `key=value` overrides. Keys are dotted paths into the JSON form
    /// (`planner.t_h`, `seed`, `planner.weights.w_n`); values parse as JSON and
    /// fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| invalid(format!("override `{o}` is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node.as_object_mut().ok_or_else(|| invalid(format!("`{key}`: `{part}` is not inside an object")))?;
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
            }
        }
        serde_json::from_value(root).map_err(|e| invalid(format!("override rejected: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.robots;
        if r.count == 0 {
            return Err(invalid("scenario needs at least one robot"));
        }
        if r.grasps.len() != r.count {
            return Err(invalid(format!("{} robots but {} grasps", r.count, r.grasps.len())));
        }
        if let Some(arms) = &r.arms {
            if arms.len() != r.count {
                return Err(invalid(format!("{} robots but {} initial arm configurations", r.count, arms.len())));
            }
        }
        if self.dynamic_obstacles.iter().any(|o| !(o.r > 0.0)) {
            return Err(invalid("dynamic obstacle radius must be positive"));
        }
        if self.object.z_h.is_some_and(|z| !(z >= 0.0)) {
            return Err(invalid("z_h must be nonnegative"));
        }
        self.planner.validate()
    }

    pub fn formation(&self) -> Formation {
        let r = &self.robots;
        let limits = r.limits.clone().unwrap_or_else(|| Limits::default_for(r.dh.len().saturating_sub(1)));
        let model = RobotModel { dh: r.dh.clone(), limits, footprint: r.footprint.clone(), link_radius: r.link_radius };
        Formation {
            robots: vec![model; r.count],
            grasps: r.grasps.clone(),
            object: self.object.shape.clone(),
            z_h: self.object.z_h.unwrap_or(f64::INFINITY),
        }
    }

    pub fn environment(&self) -> Environment {
        Environment {
            boundary: self.environment.boundary.clone(),
            obstacles: self.environment.obstacles.clone(),
            start: Point2::new(self.start.x, self.start.y),
            goal: Point2::new(self.goal.x, self.goal.y),
        }
    }

    pub fn to_scenario(&self) -> Result<Scenario> {
        self.validate()?;
        let n_arm = self.robots.dh.len().saturating_sub(1);
        let scenario = Scenario {
            environment: self.environment(),
            formation: self.formation(),
            start_yaw: self.start.yaw.unwrap_or(0.0),
            goal_yaw: self.goal.yaw,
            arms: self.robots.arms.clone().unwrap_or_else(|| vec![vec![0.0; n_arm]; self.robots.count]),
            obstacles: self
                .dynamic_obstacles
                .iter()
                .map(|o| DynamicObstacle { p0: o.p0, v: o.v, r: o.r, active_window: [o.t_start, o.t_end.unwrap_or(f64::INFINITY)] })
                .collect(),
            config: self.planner.clone(),
            perturb_velocities: self.perturb_velocities,
            seed: self.seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Output of the offline planner, bound to the scenario it was made for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanArtifact {
    pub scenario_hash: String,
    pub plan: GlobalPlan,
    /// Reference sampled at `v_op · T_c`.
    pub sampled_reference: Vec<Point2<f64>>,
}

impl PlanArtifact {
    pub fn new(scenario_hash: String, plan: GlobalPlan, config: &PlannerConfig) -> Result<Self> {
        let sampled_reference = discretize_reference(&plan.reference, config.v_op, config.t_c)?;
        Ok(Self { scenario_hash, plan, sampled_reference })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Header of the trajectory CSV for `n` robots with `n_arm` joints each.
pub fn trajectory_header(n: usize, n_arm: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for i in 0..n {
        h.extend(["x", "y", "phi"].map(|c| format!("r{i}_{c}")));
        h.extend((1..=n_arm).map(|j| format!("r{i}_q{j}")));
        h.extend(["v", "omega"].map(|c| format!("r{i}_{c}")));
        h.extend((1..=n_arm).map(|j| format!("r{i}_dq{j}")));
    }
    h.extend(["obj_x", "obj_y", "obj_z", "obj_psi"].map(String::from));
    h
}

/// One row per executed state. Control columns hold the input applied from
/// that state on and are empty on the final row.
pub fn write_trajectory_csv<W: Write>(out: W, drive: &DriveResult) -> Result<()> {
    let first = &drive.states[0];
    let n_arm = first.robots.first().map_or(0, |r| r.arm.len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header(first.robots.len(), n_arm))?;
    for (s, state) in drive.states.iter().enumerate() {
        let mut row = vec![fmt(s as f64 * drive.t_c)];
        for (i, r) in state.robots.iter().enumerate() {
            row.extend([r.base.x, r.base.y, r.phi].map(fmt));
            row.extend(r.arm.iter().map(|q| fmt(*q)));
            match drive.controls.get(s) {
                Some(u) => row.extend(u[i].to_vec().into_iter().map(fmt)),
                None => row.extend(std::iter::repeat_n(String::new(), 2 + n_arm)),
            }
        }
        row.extend([state.p[0], state.p[1], state.p[2], state.psi].map(fmt));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

/// Summary statistics of per-horizon solve times (population deviation).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub count: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub std: f64,
}

impl SolveStats {
    pub fn from_times(times: &[f64]) -> Option<Self> {
        if times.is_empty() {
            return None;
        }
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            count: times.len(),
            min: times.iter().copied().fold(f64::INFINITY, f64::min),
            mean,
            max: times.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub completed: bool,
    pub duration: f64,
    /// `None` when nothing was sampled.
    pub min_static_margin: Option<f64>,
    pub min_dynamic_margin: Option<f64>,
    pub min_static_clearance: Option<f64>,
    pub max_tracking_error: f64,
    pub ee_distance_deviation: f64,
    pub max_grasp_residual: f64,
    pub solve_time: Option<SolveStats>,
}

impl MetricsSummary {
    pub fn of(m: &RunMetrics) -> Self {
        let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        Self {
            completed: m.completed,
            duration: m.duration,
            min_static_margin: m.d_static.iter().copied().reduce(f64::min),
            min_dynamic_margin: m.min_dynamic(),
            min_static_clearance: m.clearance_static.iter().copied().reduce(f64::min),
            max_tracking_error: max(&m.tracking_error),
            ee_distance_deviation: m.ee_distance_deviation(),
            max_grasp_residual: max(&m.grasp_residual),
            solve_time: SolveStats::from_times(&m.solve_times),
        }
    }
}

/// Metrics JSON: summary plus the full traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub scenario_hash: String,
    pub seed: u64,
    pub summary: MetricsSummary,
    pub metrics: RunMetrics,
}

impl MetricsFile {
    pub fn new(scenario_hash: String, seed: u64, metrics: RunMetrics) -> Self {
        Self { scenario_hash, seed, summary: MetricsSummary::of(&metrics), metrics }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn write_solver_log<W: Write>(mut out: W, records: &[HorizonRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_solver_log(s: &str) -> Result<Vec<HorizonRecord>> {
    s.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

// ---------------------------------------------------------------- SVG

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn points_attr(pts: impl IntoIterator<Item = (f64, f64)>) -> String {
    pts.into_iter().map(|(x, y)| format!("{x:.4},{y:.4}")).collect::<Vec<_>>().join(" ")
}

/// Top view: boundary, obstacles, corridors, path, reference and optionally
/// the executed object track. World y points up.
pub fn plan_svg(env: &Environment, plan: &GlobalPlan, track: Option<&[Point2<f64>]>) -> String {
    let v = env.boundary.vertices();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in v {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let pad = 0.05 * (x1 - x0).max(y1 - y0);
    let (w, h) = (x1 - x0 + 2.0 * pad, y1 - y0 + 2.0 * pad);
    let stroke = 0.004 * w.max(h);
    let poly = |p: &[Point2<f64>]| points_attr(p.iter().map(|q| (q.x, q.y)));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="{:.0}" viewBox="{} {} {} {}">"#,
        800.0 * h / w,
        x0 - pad,
        -(y1 + pad),
        w,
        h
    );
    let _ = writeln!(s, r#"<g transform="scale(1,-1)" stroke-width="{stroke}">"#);
    let _ = writeln!(s, r#"<polygon points="{}" fill="white" stroke="black"/>"#, poly(v));
    for o in &env.obstacles {
        let _ = writeln!(s, r##"<polygon points="{}" fill="#888" stroke="black"/>"##, poly(o.vertices()));
    }
    for (i, seg) in plan.segments.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<polygon points="{}" fill="{c}" fill-opacity="0.15" stroke="{c}"/>"#, poly(&seg.convex.vertices));
    }
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="black" stroke-dasharray="{}"/>"#, poly(&plan.path), 3.0 * stroke);
    let reference = plan.reference.sample(plan.reference.pieces.len() * 16 + 1);
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#d62728"/>"##, poly(&reference));
    for p in &plan.control_points {
        let _ = writeln!(s, r#"<circle cx="{:.4}" cy="{:.4}" r="{}" fill="black"/>"#, p.x, p.y, 2.0 * stroke);
    }
    if let Some(t) = track {
        let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#2ca02c" stroke-width="{}"/>"##, poly(t), 2.0 * stroke);
    }
    s.push_str("</g>\n</svg>\n");
    s
}

/// One named series of `(x, y)` samples.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Simple line chart with axes, tick labels, legend and dashed horizontal
/// guide lines.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], guides: &[f64]) -> String {
    let (w, h, ml, mr, mt, mb) = (720.0, 360.0, 70.0, 150.0, 30.0, 45.0);
    let finite = |v: f64| v.is_finite();
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).filter(|v| finite(*v));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).chain(guides.iter().copied()).filter(|v| finite(*v));
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !(x0 < x1) {
        (x0, x1) = if x0.is_finite() { (x0 - 1.0, x0 + 1.0) } else { (0.0, 1.0) };
    }
    if !(y0 < y1) {
        (y0, y1) = if y0.is_finite() { (y0 - 1.0, y0 + 1.0) } else { (0.0, 1.0) };
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, ml + pw / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for k in 0..=5 {
        let fx = x0 + (x1 - x0) * k as f64 / 5.0;
        let fy = y0 + (y1 - y0) * k as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(fx), mt + ph + 15.0, tick(fx));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, ml - 5.0, sy(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, ml + pw / 2.0, h - 8.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{0}" text-anchor="middle" transform="rotate(-90 15 {0})">{1}</text>"#,
        mt + ph / 2.0,
        escape(y_label)
    );
    for g in guides.iter().filter(|g| finite(**g)) {
        let _ = writeln!(s, r##"<line x1="{ml}" x2="{0}" y1="{1:.1}" y2="{1:.1}" stroke="#666" stroke-dasharray="4 3"/>"##, ml + pw, sy(*g));
    }
    for (i, ser) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        // Break the line at non-finite samples.
        for run in ser.points.split(|p| !finite(p.0) || !finite(p.1)).filter(|r| !r.is_empty()) {
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, points_attr(run.iter().map(|p| (sx(p.0), sy(p.1)))));
        }
        let ly = mt + 12.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{0}" x2="{1}" y1="{ly}" y2="{ly}" stroke="{c}" stroke-width="2"/>"#, w - mr + 10.0, w - mr + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - mr + 35.0, ly + 4.0, escape(ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Static and dynamic safety margins against time.
pub fn margins_svg(m: &RunMetrics, d_safe: f64, d_safe_dyn: f64) -> String {
    let stat = Series { name: "static", points: m.t.iter().copied().zip(m.d_static.iter().copied()).collect() };
    let dynamic = Series {
        name: "dynamic",
        points: m.t.iter().zip(&m.d_dynamic).map(|(t, d)| (*t, d.unwrap_or(f64::NAN))).collect(),
    };
    line_plot_svg("Safety margin", "t [s]", "d_margin [m]", &[stat, dynamic], &[0.0, d_safe, d_safe_dyn])
}

/// Object x, y and yaw against time.
pub fn object_pose_svg(drive: &DriveResult) -> String {
    let t = |s: usize| s as f64 * drive.t_c;
    let series: Vec<Series> = [("x [m]", 0usize), ("y [m]", 1), ("psi [rad]", 3)]
        .iter()
        .map(|&(name, k)| Series {
            name,
            points: drive.states.iter().enumerate().map(|(s, c)| (t(s), if k == 3 { c.psi } else { c.p[k] })).collect(),
        })
        .collect();
    line_plot_svg("Object pose", "t [s]", "value", &series, &[])
}

/// Every end-effector pair distance against time.
pub fn ee_distance_svg(m: &RunMetrics) -> String {
    let pairs = m.ee_distance.first().map_or(0, Vec::len);
    let names: Vec<String> = pair_names(pairs);
    let series: Vec<Series> = (0..pairs)
        .map(|k| Series { name: &names[k], points: m.t.iter().zip(&m.ee_distance).map(|(t, d)| (*t, d[k])).collect() })
        .collect();
    line_plot_svg("End-effector distance", "t [s]", "distance [m]", &series, &[])
}

fn pair_names(count: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut n = 1;
    while n * (n - 1) / 2 < count {
        n += 1;
    }
    for i in 0..n {
        for j in i + 1..n {
            out.push(format!("EE{i}-EE{j}"));
        }
    }
    out.truncate(count);
    out
}
