use std::path::PathBuf;

use mmr_planner::geom2d::Point2;
use mmr_planner::global_planner::plan_global;
use mmr_planner::io::*;
use mmr_planner::nmpc::{DriveResult, HorizonRecord, PlannerConfig};
use mmr_planner::robot_model::{step_rk4, ControlInput};
use mmr_planner::sim::RunMetrics;
use proptest::prelude::*;

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn straight() -> ScenarioFile {
    ScenarioFile::load(&scenario_path("straight_2robot.json")).unwrap()
}

const MINIMAL: &str = r#"{
  "environment": {"boundary": [{"x": 0, "y": 0}, {"x": 4, "y": 0}, {"x": 4, "y": 4}, {"x": 0, "y": 4}]},
  "robots": {"count": 2, "grasps": [{"offset": [0.2, 0.0, 0.0], "yaw": 3.141592653589793}, {"offset": [-0.2, 0.0, 0.0]}]},
  "object": {"shape": {"kind": "circle", "radius": 0.2}},
  "start": {"x": 1, "y": 1},
  "goal": {"x": 3, "y": 3}
}"#;

#[test]
fn shipped_scenarios_round_trip() {
    for name in ["straight_2robot.json", "corridor_2robot.json", "formation_5robot.json"] {
        let a = ScenarioFile::load(&scenario_path(name)).unwrap();
        let b = ScenarioFile::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, b, "{name}");
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        a.to_scenario().unwrap().initial_config().unwrap();
    }
}

#[test]
fn defaults_are_the_reference_parameters() {
    let s = ScenarioFile::from_json(MINIMAL).unwrap();
    let p = &s.planner;
    assert_eq!((p.t_h, p.t_e, p.t_c, p.v_op), (9.0, 3.0, 0.25, 0.15));
    assert_eq!((p.safety.d_safe, p.safety.d_safe_dyn), (0.05, 0.1));
    assert_eq!(p.weights.w_e, [0.01, 0.01]);
    assert_eq!(p.weights.w_n, [1e5, 1e5]);
    assert_eq!(p.sensing_radius, 3.0);
    assert_eq!(p.goal_tol, 0.05);
    assert_eq!(p.yaw_tol, 0.15);
    let sc = s.to_scenario().unwrap();
    assert_eq!(sc.arms, vec![vec![0.0; 5]; 2]);
    assert_eq!(sc.formation.z_h, f64::INFINITY);
    assert_eq!(sc.goal_yaw, None);
    assert!(sc.obstacles.is_empty());
}

#[test]
fn malformed_scenarios_are_rejected() {
    assert!(ScenarioFile::from_json(&MINIMAL.replace("\"goal\"", "\"gaol\"")).is_err());
    assert!(ScenarioFile::from_json(&MINIMAL.replace("\"count\": 2", "\"count\": 3")).unwrap().validate().is_err());
    let bad_planner = MINIMAL.replace("\"goal\": {\"x\": 3, \"y\": 3}", "\"goal\": {\"x\": 3, \"y\": 3}, \"planner\": {\"t_e\": 10.0}");
    assert!(ScenarioFile::from_json(&bad_planner).unwrap().validate().is_err());
}

#[test]
fn overrides_edit_nested_keys() {
    let s = straight();
    let o = s.with_overrides(&["planner.t_h=6", "seed=11", "planner.weights.w_n=[10, 20]", "planner.safety.d_safe=0.07"]).unwrap();
    assert_eq!(o.planner.t_h, 6.0);
    assert_eq!(o.seed, 11);
    assert_eq!(o.planner.weights.w_n, [10.0, 20.0]);
    assert_eq!(o.planner.safety.d_safe, 0.07);
    assert_eq!(o.planner.t_e, s.planner.t_e);
    assert!(s.with_overrides(&["planner.t_hh=6"]).is_err());
    assert!(s.with_overrides(&["planner.t_h"]).is_err());
    assert!(s.with_overrides(&["seed.x=1"]).is_err());
}

#[test]
fn hashes_track_content() {
    let s = straight();
    let h = s.hash().unwrap();
    assert_eq!(h.len(), 64);
    assert_eq!(h, ScenarioFile::from_json(&s.to_json().unwrap()).unwrap().hash().unwrap());
    let reseeded = s.with_overrides(&["seed=99"]).unwrap();
    assert_ne!(reseeded.hash().unwrap(), h);
    // The plan does not depend on the seed or moving obstacles.
    assert_eq!(reseeded.plan_hash().unwrap(), s.plan_hash().unwrap());
    let with_obstacle = s.with_overrides(&[r#"dynamic_obstacles=[{"p0": {"x": 1, "y": 1}, "v": {"x": 0, "y": 0}, "r": 0.2}]"#]).unwrap();
    assert_eq!(with_obstacle.plan_hash().unwrap(), s.plan_hash().unwrap());
    assert_ne!(s.with_overrides(&["goal.x=4.5"]).unwrap().plan_hash().unwrap(), s.plan_hash().unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_scenarios_round_trip(
        t_h in 1.0..20.0f64,
        v_op in 0.01..1.0f64,
        seed in any::<u64>(),
        obs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64, -1.0..1.0f64, 0.01..1.0f64, prop::option::of(0.0..100.0f64)), 0..4),
        yaw in prop::option::of(-3.0..3.0f64),
    ) {
        let mut s = straight();
        s.planner.t_h = t_h;
        s.planner.v_op = v_op;
        s.seed = seed;
        s.goal.yaw = yaw;
        s.dynamic_obstacles = obs
            .into_iter()
            .map(|(x, y, v, r, end)| ObstacleSpec { p0: Point2::new(x, y), v: Point2::new(v, -v), r, t_start: 0.0, t_end: end })
            .collect();
        let back = ScenarioFile::from_json(&s.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.hash().unwrap(), s.hash().unwrap());
    }
}

#[test]
fn plan_artifact_round_trips_through_a_file() {
    let s = straight();
    let sc = s.to_scenario().unwrap();
    let plan = plan_global(&sc.environment, sc.formation.enclosing_radius()).unwrap();
    let a = PlanArtifact::new(s.plan_hash().unwrap(), plan, &s.planner).unwrap();
    assert!(a.sampled_reference.windows(2).all(|w| (w[1] - w[0]).norm() <= 0.0375 + 1e-9));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plan.json");
    a.save(&path).unwrap();
    let b = PlanArtifact::load(&path).unwrap();
    assert_eq!(a, b);
}

/// Two robots driving straight with constant inputs; no solver involved.
fn synthetic_drive(steps: usize) -> DriveResult {
    let s = straight().to_scenario().unwrap();
    let init = s.initial_config().unwrap();
    let mut states = vec![init.clone()];
    let mut controls = vec![];
    for k in 0..steps {
        let u: Vec<ControlInput<f64>> = (0..2)
            .map(|i| {
                let mut u = ControlInput::zero(5);
                u.v = 0.1 + 0.01 * i as f64;
                u.omega = 0.05 * (k as f64).sin();
                u.arm_rates[0] = 1e-3 * k as f64;
                u
            })
            .collect();
        let prev = states.last().unwrap();
        let mut next = prev.clone();
        for i in 0..2 {
            next.robots[i] = step_rk4(&prev.robots[i], &u[i], 0.25);
        }
        next.p[0] += 0.025;
        next.psi += 1e-3;
        controls.push(u);
        states.push(next);
    }
    DriveResult {
        t_c: 0.25,
        corridor_index: vec![0; states.len()],
        states,
        controls,
        horizons: vec![],
        steps_per_cycle: 12,
        completed: true,
        diagnostic: None,
    }
}

#[test]
fn trajectory_csv_has_constant_width_and_exact_values() {
    let d = synthetic_drive(20);
    let mut buf = Vec::new();
    write_trajectory_csv(&mut buf, &d).unwrap();
    let mut r = csv::ReaderBuilder::new().from_reader(buf.as_slice());
    let header = r.headers().unwrap().clone();
    assert_eq!(header.len(), 1 + 2 * (3 + 5 + 2 + 5) + 4);
    assert_eq!(header.iter().collect::<Vec<_>>(), trajectory_header(2, 5));
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 21);
    let num = |s: &str| s.parse::<f64>().unwrap();
    for (s, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), header.len());
        let st = &d.states[s];
        assert_eq!(num(&row[0]), 0.25 * s as f64);
        assert_eq!(num(&row[1]), st.robots[0].base.x);
        assert_eq!(num(&row[3]), st.robots[0].phi);
        assert_eq!(num(&row[4]), st.robots[0].arm[0]);
        let col = |name: &str| header.iter().position(|h| h == name).unwrap();
        assert_eq!(num(&row[col("r1_y")]), st.robots[1].base.y);
        assert_eq!(num(&row[col("obj_psi")]), st.psi);
        assert_eq!(num(&row[col("obj_z")]), st.p[2]);
        if s < 20 {
            assert_eq!(num(&row[col("r1_v")]), d.controls[s][1].v);
            assert_eq!(num(&row[col("r0_dq1")]), d.controls[s][0].arm_rates[0]);
        } else {
            assert!(row[col("r0_v")].is_empty());
        }
    }
}

fn sample_metrics() -> RunMetrics {
    RunMetrics {
        t: vec![0.0, 0.25, 0.5],
        d_static: vec![0.3, 0.2, 0.25],
        d_dynamic: vec![None, Some(0.4), Some(0.1)],
        clearance_static: vec![0.5, 0.4, 0.45],
        tracking_error: vec![0.0, 0.01, 0.02],
        object_yaw: vec![0.0, 0.1, 0.2],
        ee_distance: vec![vec![0.9], vec![0.9005], vec![0.899]],
        grasp_residual: vec![0.0, 1e-9, 2e-9],
        solve_times: vec![0.2, 0.4],
        completed: false,
        duration: 0.5,
        diagnostic: Some("no progress".into()),
    }
}

#[test]
fn metrics_file_round_trips_and_summarizes() {
    let m = MetricsFile::new("abc".into(), 3, sample_metrics());
    let s = &m.summary;
    assert_eq!(s.min_static_margin, Some(0.2));
    assert_eq!(s.min_dynamic_margin, Some(0.1));
    assert_eq!(s.min_static_clearance, Some(0.4));
    assert_eq!(s.max_tracking_error, 0.02);
    assert!((s.ee_distance_deviation - 1e-3).abs() < 1e-12);
    assert!(!s.completed);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.json");
    m.save(&path).unwrap();
    assert_eq!(MetricsFile::load(&path).unwrap(), m);
}

#[test]
fn solve_stats_examples() {
    let s = SolveStats::from_times(&[0.2, 0.4]).unwrap();
    assert_eq!(s.count, 2);
    assert_eq!(s.min, 0.2);
    assert_eq!(s.max, 0.4);
    assert!((s.mean - 0.3).abs() < 1e-15);
    assert!((s.std - 0.1).abs() < 1e-15);
    assert_eq!(SolveStats::from_times(&[]), None);
    let one = SolveStats::from_times(&[1.5]).unwrap();
    assert_eq!((one.min, one.mean, one.max, one.std), (1.5, 1.5, 1.5, 0.0));
}

proptest! {
    #[test]
    fn solve_stats_match_sorted_oracle(times in prop::collection::vec(0.0..10.0f64, 1..50)) {
        let s = SolveStats::from_times(&times).unwrap();
        let mut sorted = times.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(s.min, sorted[0]);
        prop_assert_eq!(s.max, *sorted.last().unwrap());
        let n = times.len() as f64;
        let mean: f64 = sorted.iter().sum::<f64>() / n;
        prop_assert!((s.mean - mean).abs() <= 1e-12 * (1.0 + mean));
        // E[x²] − mean², the textbook identity.
        let var = (sorted.iter().map(|x| x * x).sum::<f64>() / n - mean * mean).max(0.0);
        prop_assert!((s.std - var.sqrt()).abs() <= 1e-6);
    }
}

#[test]
fn solver_log_is_one_record_per_line() {
    let rec = |t: f64, status: &str| HorizonRecord {
        t,
        lambda: 3,
        obstacles: 1,
        objective: Some(1.5),
        kkt_residual: None,
        max_constraint_violation: Some(1e-9),
        solve_time: 0.3,
        iterations: 7,
        status: status.into(),
        active_constraints: 12,
        warnings: vec!["pinned state".into()],
    };
    let records = vec![rec(0.0, "Optimal"), rec(3.0, "SolverFailure")];
    let mut buf = Vec::new();
    write_solver_log(&mut buf, &records).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 2);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("solve_time").is_some());
    }
    let back = read_solver_log(&text).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[1].status, "SolverFailure");
    assert_eq!(back[0].objective, Some(1.5));
}

#[test]
fn plots_are_svg_and_leave_metrics_alone() {
    let m = sample_metrics();
    let before = serde_json::to_vec(&m).unwrap();
    let d = synthetic_drive(8);
    let s = straight();
    let sc = s.to_scenario().unwrap();
    let plan = plan_global(&sc.environment, sc.formation.enclosing_radius()).unwrap();
    let track: Vec<Point2<f64>> = d.states.iter().map(|c| Point2::new(c.p[0], c.p[1])).collect();
    for svg in [
        margins_svg(&m, 0.05, 0.1),
        ee_distance_svg(&m),
        object_pose_svg(&d),
        plan_svg(&sc.environment, &plan, Some(&track)),
        line_plot_svg("empty", "x", "y", &[], &[]),
    ] {
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        assert_eq!(svg.matches("<svg").count(), 1);
    }
    assert_eq!(serde_json::to_vec(&m).unwrap(), before);
    let _ = PlannerConfig::default();
}
