use std::f64::consts::{FRAC_PI_2, PI};

use approx::assert_abs_diff_eq;
use mmr_planner::geom2d::{Point2, Polygon};
use mmr_planner::global_planner::{plan_global, ConvexRegion, Environment};
use mmr_planner::nmpc::*;
use mmr_planner::robot_model::*;
use proptest::prelude::*;

fn pt(x: f64, y: f64) -> Point2<f64> {
    Point2::new(x, y)
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> ConvexRegion {
    ConvexRegion::from_polygon(&Polygon::rectangle(pt(x0, y0), pt(x1, y1)).unwrap())
}

fn pair() -> Formation {
    Formation {
        robots: vec![RobotModel::with_square_base(0.3), RobotModel::with_square_base(0.3)],
        grasps: vec![Grasp { offset: [0.2, 0.0, 0.0], yaw: PI }, Grasp { offset: [-0.2, 0.0, 0.0], yaw: 0.0 }],
        object: ObjectShape::Circle { radius: 0.2 },
        z_h: f64::INFINITY,
    }
}

fn pair_arms() -> Vec<Vec<f64>> {
    vec![vec![FRAC_PI_2, FRAC_PI_2, 0.0, 0.0, 0.0], vec![0.0; 5]]
}

/// One robot pushing a disc ahead of it, arm locked by zero rate limits.
fn single() -> Formation {
    let mut r = RobotModel::with_square_base(0.3);
    for j in 2..r.limits.u_max.len() {
        r.limits.u_min[j] = 0.0;
        r.limits.u_max[j] = 0.0;
    }
    Formation {
        robots: vec![r],
        grasps: vec![Grasp { offset: [-0.2, 0.0, 0.0], yaw: 0.0 }],
        object: ObjectShape::Circle { radius: 0.2 },
        z_h: f64::INFINITY,
    }
}

fn problem(formation: Formation, initial: FormationConfig<f64>, reference: Vec<Point2<f64>>, corridor: ConvexRegion) -> HorizonProblem {
    let n_h = reference.len() - 1;
    HorizonProblem {
        formation,
        n_h,
        t_c: 0.25,
        initial,
        reference,
        corridors: vec![corridor; n_h + 1],
        obstacles: vec![],
        weights: Weights::default(),
        safety: Safety::default(),
    }
}

fn line(from: Point2<f64>, step: f64, n: usize) -> Vec<Point2<f64>> {
    (0..=n).map(|k| from + pt(step * k as f64, 0.0)).collect()
}

/// Cost of a trajectory summed from the per-step terms.
fn total_cost(p: &HorizonProblem, states: &[FormationConfig<f64>], controls: &[Vec<ControlInput<f64>>], w: &Weights) -> f64 {
    let run: f64 = (0..p.n_h).map(|k| stage_cost(&states[k], &controls[k], p.reference[k], w)).sum();
    run + terminal_cost(&states[p.n_h], p.reference[p.n_h], w.w_n)
}

fn hold(p: &HorizonProblem) -> (Vec<FormationConfig<f64>>, Vec<Vec<ControlInput<f64>>>) {
    let zero: Vec<_> = p.initial.robots.iter().map(|r| ControlInput::zero(r.arm.len())).collect();
    (vec![p.initial.clone(); p.n_h + 1], vec![zero; p.n_h])
}

fn cfg_at(p: [f64; 2]) -> FormationConfig<f64> {
    FormationConfig { p: [p[0], p[1], 0.3], psi: 0.0, robots: vec![] }
}

// ---------------------------------------------------------------- costs

#[test]
fn stage_cost_on_reference_with_zero_input_is_zero() {
    let u = vec![ControlInput::zero(5)];
    assert_eq!(stage_cost(&cfg_at([1.0, 2.0]), &u, pt(1.0, 2.0), &Weights::default()), 0.0);
}

#[test]
fn stage_cost_tracking_term() {
    let u = vec![ControlInput::zero(5)];
    let j = stage_cost(&cfg_at([1.1, 2.0]), &u, pt(1.0, 2.0), &Weights::default());
    assert_abs_diff_eq!(j, 1e-4, epsilon = 1e-15);
}

#[test]
fn stage_cost_velocity_term() {
    let mut u = ControlInput::zero(5);
    u.v = 0.1;
    let j = stage_cost(&cfg_at([1.0, 2.0]), &[u], pt(1.0, 2.0), &Weights::default());
    assert_abs_diff_eq!(j, 5e-4, epsilon = 1e-15);
}

#[test]
fn terminal_cost_examples() {
    let w = Weights::default().w_n;
    assert_eq!(terminal_cost(&cfg_at([3.0, 4.0]), pt(3.0, 4.0), w), 0.0);
    assert_abs_diff_eq!(terminal_cost(&cfg_at([3.01, 4.0]), pt(3.0, 4.0), w), 10.0, epsilon = 1e-9);
}

proptest! {
    #[test]
    fn terminal_cost_is_homogeneous_in_weight(ex in -1.0..1.0f64, ey in -1.0..1.0f64, c in 0.01..100.0f64) {
        let s = cfg_at([ex, ey]);
        let base = terminal_cost(&s, pt(0.0, 0.0), [1e5, 1e5]);
        let scaled = terminal_cost(&s, pt(0.0, 0.0), [c * 1e5, c * 1e5]);
        prop_assert!((scaled - c * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
    }

    #[test]
    fn stage_cost_matches_weighted_sum(
        u in prop::collection::vec(-1.0..1.0f64, 14),
        ex in -1.0..1.0f64,
        ey in -1.0..1.0f64,
    ) {
        let w = Weights::default();
        let controls = [ControlInput::from_slice(&u[..7]), ControlInput::from_slice(&u[7..])];
        let want: f64 = u.iter().enumerate().map(|(j, x)| w.w_u[j % 7] * x * x).sum::<f64>() + 0.01 * (ex * ex + ey * ey);
        let got = stage_cost(&cfg_at([ex, ey]), &controls, pt(0.0, 0.0), &w);
        prop_assert!((got - want).abs() <= 1e-12);
    }
}

// ---------------------------------------------------------------- constraint assembly

fn pair_problem(n_h: usize, obstacles: usize) -> HorizonProblem {
    let f = pair();
    let init = inverse_placement(&f, pt(0.0, 0.0), 0.0, &pair_arms()).unwrap();
    let mut p = problem(f, init, line(pt(0.0, 0.0), 0.0375, n_h), rect(-1.0, -2.0, 10.0, 2.0));
    p.obstacles = (0..obstacles).map(|i| ObstacleSnapshot { p: pt(5.0, 5.0 + i as f64), v: pt(0.0, 0.0), r: 0.2 }).collect();
    p
}

#[test]
fn separation_rows_cover_every_body_and_step() {
    let p = pair_problem(36, 1);
    let set = build_constraints(&p).unwrap();
    // Base and arm per robot plus the object, every step.
    assert_eq!(set.count(ConstraintKind::DynamicObstacle), 36 * (2 * 2 + 1));
    let p3 = pair_problem(36, 3);
    assert_eq!(build_constraints(&p3).unwrap().count(ConstraintKind::DynamicObstacle), 3 * 180);
}

#[test]
fn no_obstacles_no_separation_rows() {
    let p = pair_problem(36, 0);
    let set = build_constraints(&p).unwrap();
    assert_eq!(set.count(ConstraintKind::DynamicObstacle), 0);
    assert_eq!(set.count(ConstraintKind::Dynamics), 36 * 2 * 8);
    assert_eq!(set.count(ConstraintKind::Grasp), 36 * 2 * 4);
    // Four rectangle rows for each of five bodies.
    assert_eq!(set.count(ConstraintKind::Corridor), 36 * 5 * 4);
    // Two robots share a half-plane boundary: one row per body.
    assert_eq!(set.count(ConstraintKind::Wedge), 36 * 2 * 2);
    assert!(set.rows().iter().all(|r| (1..=36).contains(&r.step)));
}

#[test]
fn corridor_rows_equal_edge_distance_minus_margin() {
    let f = pair();
    let init = inverse_placement(&f, pt(0.0, 0.0), 0.0, &pair_arms()).unwrap();
    let (w, h) = (2.0, 1.5);
    let p = problem(f.clone(), init.clone(), line(pt(0.0, 0.0), 0.0, 4), rect(-w, -h, w, h));
    let set = build_constraints(&p).unwrap();
    let (states, controls) = hold(&p);
    let vals = set.evaluate(&states, &controls).unwrap();
    let d = p.safety.d_safe;

    // Distances to the four edges of the rectangle.
    let edges = |c: Point2<f64>| {
        let mut e = vec![w - c.x, c.x + w, h - c.y, c.y + h];
        e.sort_by(f64::total_cmp);
        e
    };
    let arm = bounding_circles(&f, &init).arms;
    let r_base = 0.15 * 2f64.sqrt();
    let mut bodies = vec![];
    for i in 0..2 {
        bodies.push((Some(i), Body::Base, init.robots[i].base, r_base));
        bodies.push((Some(i), Body::Arm, arm[i].c, arm[i].r));
    }
    bodies.push((None, Body::Object, pt(init.p[0], init.p[1]), 0.2));

    for step in 1..=4 {
        for &(robot, body, c, r) in &bodies {
            let mut got: Vec<f64> = set
                .rows()
                .iter()
                .zip(&vals)
                .filter(|(row, _)| row.step == step && row.kind == ConstraintKind::Corridor && row.robot == robot && row.body == Some(body))
                .map(|(_, v)| -v)
                .collect();
            got.sort_by(f64::total_cmp);
            let want: Vec<f64> = edges(c).iter().map(|e| e - d - r).collect();
            assert_eq!(got.len(), 4);
            for (g, w) in got.iter().zip(&want) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-12);
                assert!(*g > 0.0);
            }
        }
    }
    // Holding still with zero input satisfies dynamics and grasps exactly.
    for (row, v) in set.rows().iter().zip(&vals) {
        if row.equality {
            assert!(v.abs() < 1e-12, "{row:?} = {v}");
        }
    }
}

#[test]
fn invalid_problem_is_rejected() {
    let mut p = pair_problem(6, 0);
    p.corridors.pop();
    assert!(build_constraints(&p).is_err());
    let mut p = pair_problem(6, 0);
    p.obstacles.push(ObstacleSnapshot { p: pt(1.0, 1.0), v: pt(0.0, 0.0), r: 0.0 });
    assert!(build_constraints(&p).is_err());
}

// ---------------------------------------------------------------- solves

fn single_problem(n_h: usize, step: f64) -> HorizonProblem {
    let f = single();
    let init = inverse_placement(&f, pt(0.0, 0.0), 0.0, &[vec![0.0; 5]]).unwrap();
    problem(f, init, line(pt(0.0, 0.0), step, n_h), rect(-1.0, -3.0, 4.0, 3.0))
}

/// Exact dynamic programme over straight-line motion: heading fixed, `ω = 0`,
/// `v` on a grid whose one-step displacement is a multiple of `dx`.
fn straight_line_dp(p: &HorizonProblem, dx: f64) -> f64 {
    let w = &p.weights;
    let v_max = p.formation.robots[0].limits.u_max[0];
    let max_cells = (v_max * p.t_c / dx).round() as i64;
    let span = max_cells * p.n_h as i64;
    let n = (2 * span + 1) as usize;
    let x_of = |i: usize| (i as i64 - span) as f64 * dx;
    let x0 = p.initial.p[0];
    // cost-to-go at the final step
    let mut next: Vec<f64> = (0..n)
        .map(|i| {
            let e = x0 + x_of(i) - p.reference[p.n_h].x;
            w.w_n[0] * e * e
        })
        .collect();
    for k in (0..p.n_h).rev() {
        let mut cur = vec![f64::INFINITY; n];
        for (i, c) in cur.iter_mut().enumerate() {
            let e = x0 + x_of(i) - p.reference[k].x;
            let track = w.w_e[0] * e * e;
            for m in -max_cells..=max_cells {
                let j = i as i64 + m;
                if j < 0 || j >= n as i64 {
                    continue;
                }
                let v = m as f64 * dx / p.t_c;
                *c = c.min(track + w.w_u[0] * v * v + next[j as usize]);
            }
        }
        next = cur;
    }
    next[span as usize]
}

#[test]
fn stationary_problem_stays_put() {
    let p = single_problem(12, 0.0);
    let sol = solve_horizon(&p, None, &PlannerConfig::default()).unwrap();
    assert!(sol.objective.abs() < 1e-8, "objective {}", sol.objective);
    for u in sol.controls.iter().flatten() {
        assert!(u.to_vec().iter().all(|x| x.abs() < 1e-4), "{u:?}");
    }
    assert_eq!(sol.states[0], p.initial);
}

#[test]
fn straight_reference_is_tracked() {
    // 0.9 m over 36 steps.
    let p = single_problem(36, 0.025);
    let sol = solve_horizon(&p, None, &PlannerConfig::default()).unwrap();
    let end = sol.states.last().unwrap();
    let goal = p.reference[36];
    let err = (pt(end.p[0], end.p[1]) - goal).norm();
    assert!(err <= 0.05, "terminal error {err}");
}

#[test]
fn short_horizon_cost_not_worse_than_grid_search() {
    let p = single_problem(12, 0.0375);
    let sol = solve_horizon(&p, None, &PlannerConfig::default()).unwrap();
    let dp = straight_line_dp(&p, 0.0025);
    assert!(sol.objective <= dp * (1.0 + 1e-3) + 1e-6, "sqp {} vs grid {}", sol.objective, dp);
    // The grid only loses what discretization costs.
    assert!(sol.objective >= 0.9 * dp, "sqp {} vs grid {}", sol.objective, dp);
    let end = sol.states.last().unwrap();
    assert!((pt(end.p[0], end.p[1]) - p.reference[12]).norm() <= 0.05);
}

#[test]
fn objective_matches_summed_costs() {
    let p = single_problem(12, 0.0375);
    let sol = solve_horizon(&p, None, &PlannerConfig::default()).unwrap();
    let j = total_cost(&p, &sol.states, &sol.controls, &p.weights);
    assert_abs_diff_eq!(sol.objective, j, epsilon = 1e-9 * (1.0 + j));
}

#[test]
fn crossing_obstacle_keeps_its_distance() {
    let mut p = single_problem(36, 0.025);
    // Crosses the reference around x = 0.6 m after ~4 s.
    p.obstacles = vec![ObstacleSnapshot { p: pt(0.6, -1.0), v: pt(0.0, 0.25), r: 0.15 }];
    let sol = solve_horizon(&p, None, &PlannerConfig::default()).unwrap();
    let d = p.safety.d_safe_dyn;
    let o = p.obstacles[0];
    let r_base = p.formation.robots[0].base_radius();
    for (k, s) in sol.states.iter().enumerate().skip(1) {
        let c = o.at(k as f64 * p.t_c);
        let base = s.robots[0].base;
        assert!((base - c).norm() >= o.r + r_base + d - 1e-6, "step {k}: base at {:?}", base);
        let obj = pt(s.p[0], s.p[1]);
        assert!((obj - c).norm() >= o.r + 0.2 + d - 1e-6, "step {k}: object at {:?}", obj);
        let arm = bounding_circles(&p.formation, s).arms[0];
        assert!((arm.c - c).norm() >= o.r + arm.r + d - 1e-6, "step {k}");
    }
}

fn pair_solution() -> (HorizonProblem, HorizonSolution) {
    let mut p = pair_problem(36, 0);
    p.reference = (0..=36).map(|k| pt(0.0375 * k as f64, 0.3 * k as f64 / 36.0)).collect();
    let sol = solve_horizon(&p, None, &PlannerConfig::default()).unwrap();
    (p, sol)
}

#[test]
fn pair_solution_is_consistent_and_admissible() {
    let (p, sol) = pair_solution();
    assert_eq!(sol.states.len(), 37);
    assert_eq!(sol.controls.len(), 36);
    assert_eq!(sol.states[0], p.initial);

    // Re-simulate from the pinned state.
    let mut robots = p.initial.robots.clone();
    for k in 0..36 {
        for (i, m) in p.formation.robots.iter().enumerate() {
            let u = &sol.controls[k][i];
            assert!(m.limits.contains_control(u), "step {k} robot {i}: {u:?}");
            robots[i] = step_rk4(&robots[i], u, p.t_c);
            let planned = &sol.states[k + 1].robots[i];
            assert!((robots[i].base - planned.base).norm() <= 1e-6, "step {k}");
            assert!((robots[i].phi - planned.phi).abs() <= 1e-6);
            for (a, b) in robots[i].arm.iter().zip(&planned.arm) {
                assert!((a - b).abs() <= 1e-6);
            }
            assert!(m.limits.contains_arm(&planned.arm));
        }
        for i in 0..2 {
            let g = grasp_residual(&p.formation, &sol.states[k + 1], i).unwrap();
            assert!(g.iter().all(|x| x.abs() <= 1e-6), "grasp {g:?}");
        }
    }
    assert!(sol.max_constraint_violation <= 1e-6);
}

#[test]
fn identical_inputs_give_identical_controls() {
    let (p, a) = pair_solution();
    let b = solve_horizon(&p, None, &PlannerConfig::default()).unwrap();
    let bits = |s: &HorizonSolution| -> Vec<u64> { s.controls.iter().flatten().flat_map(|u| u.to_vec()).map(f64::to_bits).collect() };
    assert_eq!(bits(&a), bits(&b));
    // Same again from a shifted warm start.
    let ws = shift_solution(&a, 12);
    let c = solve_horizon(&p, Some(&ws), &PlannerConfig::default()).unwrap();
    let d = solve_horizon(&p, Some(&ws), &PlannerConfig::default()).unwrap();
    assert_eq!(bits(&c), bits(&d));
}

#[test]
fn heavier_input_weights_trade_against_the_old_optimum() {
    let p = single_problem(12, 0.0375);
    let old = solve_horizon(&p, None, &PlannerConfig::default()).unwrap();
    let mut q = p.clone();
    q.weights.w_u = p.weights.w_u.iter().map(|w| 4.0 * w).collect();
    let new = solve_horizon(&q, None, &PlannerConfig::default()).unwrap();
    let tol = 1e-6 * (1.0 + old.objective);
    // The old trajectory is feasible for the new weights, so it bounds the new optimum.
    let old_under_new = total_cost(&q, &old.states, &old.controls, &q.weights);
    assert!(new.objective <= old_under_new + tol, "{} vs {}", new.objective, old_under_new);
    // Every term only grew.
    assert!(new.objective >= old.objective - tol, "{} vs {}", new.objective, old.objective);
}

#[test]
fn shifted_solution_keeps_length_and_holds_the_tail() {
    let (_, sol) = pair_solution();
    let s = shift_solution(&sol, 12);
    assert_eq!(s.states.len(), 37);
    assert_eq!(s.controls.len(), 36);
    assert_eq!(s.states[0], sol.states[12]);
    assert_eq!(s.states[24], sol.states[36]);
    for k in 24..36 {
        assert_eq!(s.states[k + 1], sol.states[36]);
        assert!(s.controls[k].iter().all(|u| u.to_vec().iter().all(|x| *x == 0.0)));
    }
}

// ---------------------------------------------------------------- corridor assignment

#[test]
fn corridors_advance_once_the_formation_fits() {
    let f = single();
    let corridors = vec![rect(-1.0, -1.0, 3.0, 1.0), rect(2.0, -1.0, 6.0, 1.0)];
    let guesses: Vec<_> = (0..=10)
        .map(|k| inverse_placement(&f, pt(0.5 * k as f64, 0.0), 0.0, &[vec![0.0; 5]]).unwrap())
        .collect();
    let idx = assign_corridors(&f, &corridors, &guesses, 0, 0.05);
    assert_eq!(idx.len(), guesses.len());
    assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    for (g, &i) in guesses.iter().zip(&idx) {
        let fits = |c: &ConvexRegion| bounding_circles(&f, g).all().iter().all(|b| c.slack(b.c) >= b.r + 0.05);
        if fits(&corridors[1]) {
            assert_eq!(i, 1);
        }
        if i == 0 {
            assert!(corridors[0].slack(pt(g.p[0], g.p[1])) >= 0.0);
        }
    }
    assert_eq!(idx[0], 0);
    assert_eq!(*idx.last().unwrap(), 1);
    // Never moves backwards from the start index.
    assert!(assign_corridors(&f, &corridors, &guesses[..2], 1, 0.05).iter().all(|&i| i == 1));
}

// ---------------------------------------------------------------- receding horizon

fn open_env(start: Point2<f64>, goal: Point2<f64>) -> Environment {
    Environment {
        boundary: Polygon::rectangle(pt(0.0, 0.0), pt(6.0, 6.0)).unwrap(),
        obstacles: vec![],
        start,
        goal,
    }
}

#[test]
fn drive_from_goal_does_nothing() {
    let f = pair();
    let env = open_env(pt(3.0, 3.0), pt(3.02, 3.0));
    let plan = plan_global(&env, f.enclosing_radius()).unwrap();
    let init = inverse_placement(&f, env.start, 0.0, &pair_arms()).unwrap();
    let mut feed = |_: f64, _: Point2<f64>| Vec::new();
    let out = receding_horizon_drive(&plan, &f, init, &PlannerConfig::default(), None, &mut feed).unwrap();
    assert!(out.completed);
    assert!(out.controls.is_empty());
    assert!(out.horizons.is_empty());
    assert_eq!(out.states.len(), 1);
}

#[test]
fn drive_executes_twelve_steps_per_cycle() {
    let f = pair();
    let env = open_env(pt(2.0, 3.0), pt(4.0, 3.0));
    let plan = plan_global(&env, f.enclosing_radius()).unwrap();
    let init = inverse_placement(&f, env.start, 0.0, &pair_arms()).unwrap();
    let config = PlannerConfig::default();
    let mut calls = Vec::new();
    let mut feed = |t: f64, _: Point2<f64>| {
        calls.push(t);
        Vec::new()
    };
    let out = receding_horizon_drive(&plan, &f, init, &config, None, &mut feed).unwrap();
    assert!(out.completed, "{:?}", out.diagnostic);
    assert_eq!(out.steps_per_cycle, 12);
    assert_eq!(out.states.len(), out.controls.len() + 1);
    assert_eq!(out.corridor_index.len(), out.states.len());
    assert!(out.horizons.len() >= 2);
    for (c, h) in out.horizons.iter().enumerate() {
        assert_abs_diff_eq!(h.t, 3.0 * c as f64, epsilon = 1e-12);
    }
    assert_eq!(calls.len(), out.horizons.len());
    // Every cycle but the last runs its full execution window.
    assert!(out.controls.len() > 12 * (out.horizons.len() - 1) && out.controls.len() <= 12 * out.horizons.len());
    let end = out.states.last().unwrap();
    assert!((pt(end.p[0], end.p[1]) - env.goal).norm() <= config.goal_tol);
}
