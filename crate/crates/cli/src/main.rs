use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use mmr_planner::geom2d::{Point2, Polygon, Region};
use mmr_planner::global_planner::{convexify, plan_global};
use mmr_planner::io::{
    ee_distance_svg, margins_svg, object_pose_svg, plan_svg, write_solver_log, write_trajectory_csv, MetricsFile, PlanArtifact,
    ScenarioFile, SolveStats,
};
use mmr_planner::sim::run_with_plan;
use mmr_planner::Error;
use serde::Deserialize;

const EXIT_NO_PATH: u8 = 2;
const EXIT_STALE_PLAN: u8 = 3;
const EXIT_NO_INPUT: u8 = 4;

#[derive(Parser)]
#[command(name = "mmr-plan", version, about = "Formation transport planning: global corridors, NMPC simulation and reports")]
struct Cli {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (plan-global, convexify) or directory (simulate).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Scenario parameter override, `key=value` with a dotted key (repeatable).
    #[arg(long = "params-override", global = true, value_name = "KEY=VALUE")]
    params_override: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Visibility-graph path, convex corridors and reference curve.
    PlanGlobal { scenario: PathBuf },
    /// Closed-loop NMPC run; plans globally first when no plan is given.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Solve-time statistics over metrics files.
    Report {
        /// Files or glob patterns.
        #[arg(required = true)]
        metrics: Vec<String>,
    },
    /// Convexify one free-space polygon around a segment.
    Convexify {
        /// JSON vertex list or `{"outer": [...], "holes": [...]}`.
        polygon: PathBuf,
        /// Segment as `x0,y0,x1,y1`.
        #[arg(long, allow_hyphen_values = true)]
        segment: String,
        #[arg(long = "r-f")]
        r_f: f64,
    },
}

/// Failure with a dedicated exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Exit>() {
                Some(Exit(code, _)) => ExitCode::from(*code),
                None => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.cmd {
        Cmd::PlanGlobal { scenario } => plan_cmd(&cli, scenario),
        Cmd::Simulate { scenario, plan } => simulate_cmd(&cli, scenario, plan.as_deref()),
        Cmd::Report { metrics } => report_cmd(metrics),
        Cmd::Convexify { polygon, segment, r_f } => convexify_cmd(&cli, polygon, segment, *r_f),
    }
}

fn load_scenario(cli: &Cli, path: &Path) -> anyhow::Result<ScenarioFile> {
    if !path.is_file() {
        return Err(Exit(EXIT_NO_INPUT, format!("scenario {} not found", path.display())).into());
    }
    let mut s = ScenarioFile::load(path).with_context(|| format!("reading {}", path.display()))?;
    if !cli.params_override.is_empty() {
        s = s.with_overrides(&cli.params_override)?;
    }
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    s.validate()?;
    Ok(s)
}

fn global_plan(file: &ScenarioFile) -> anyhow::Result<PlanArtifact> {
    let scenario = file.to_scenario()?;
    let plan = match plan_global(&scenario.environment, scenario.formation.enclosing_radius()) {
        Ok(p) => p,
        Err(e @ (Error::NoPath | Error::InfeasibleEndpoint(_))) => return Err(Exit(EXIT_NO_PATH, format!("no path: {e}")).into()),
        Err(e) => return Err(e.into()),
    };
    Ok(PlanArtifact::new(file.plan_hash()?, plan, &file.planner)?)
}

fn plan_cmd(cli: &Cli, scenario: &Path) -> anyhow::Result<()> {
    let file = load_scenario(cli, scenario)?;
    let artifact = global_plan(&file)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("plan.json"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    artifact.save(&out)?;
    fs::write(out.with_extension("svg"), plan_svg(&file.environment(), &artifact.plan, None))?;
    println!(
        "path: {} vertices, {} corridors, {} reference points -> {}",
        artifact.plan.path.len(),
        artifact.plan.segments.len(),
        artifact.sampled_reference.len(),
        out.display()
    );
    Ok(())
}

fn simulate_cmd(cli: &Cli, scenario: &Path, plan: Option<&Path>) -> anyhow::Result<()> {
    let file = load_scenario(cli, scenario)?;
    let hash = file.plan_hash()?;
    let artifact = match plan {
        Some(p) => {
            if !p.is_file() {
                return Err(Exit(EXIT_NO_INPUT, format!("plan {} not found", p.display())).into());
            }
            let a = PlanArtifact::load(p).with_context(|| format!("reading {}", p.display()))?;
            if a.scenario_hash != hash {
                return Err(Exit(EXIT_STALE_PLAN, format!("plan {} was made for a different scenario", p.display())).into());
            }
            a
        }
        None => global_plan(&file)?,
    };
    let scenario = file.to_scenario()?;
    let out = run_with_plan(&scenario, artifact.plan.clone())?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    fs::create_dir_all(&dir)?;

    write_trajectory_csv(fs::File::create(dir.join("trajectory.csv"))?, &out.drive)?;
    write_solver_log(fs::File::create(dir.join("solver_log.jsonl"))?, &out.drive.horizons)?;
    let metrics = MetricsFile::new(file.hash()?, scenario.seed, out.metrics);
    metrics.save(&dir.join("metrics.json"))?;

    let safety = scenario.config.safety;
    fs::write(dir.join("margins.svg"), margins_svg(&metrics.metrics, safety.d_safe, safety.d_safe_dyn))?;
    fs::write(dir.join("object_pose.svg"), object_pose_svg(&out.drive))?;
    fs::write(dir.join("ee_distance.svg"), ee_distance_svg(&metrics.metrics))?;
    let track: Vec<Point2<f64>> = out.drive.states.iter().map(|s| Point2::new(s.p[0], s.p[1])).collect();
    fs::write(dir.join("trajectory.svg"), plan_svg(&scenario.environment, &artifact.plan, Some(&track)))?;

    let s = &metrics.summary;
    println!("completed: {}", s.completed);
    if let Some(d) = &metrics.metrics.diagnostic {
        println!("diagnostic: {d}");
    }
    println!("duration: {:.2} s", s.duration);
    match s.min_static_margin {
        Some(d) => println!("min static margin: {d:.4} m"),
        None => println!("min static margin: none"),
    }
    match s.min_dynamic_margin {
        Some(d) => println!("min dynamic margin: {d:.4} m"),
        None => println!("min dynamic margin: none"),
    }
    println!("EE distance deviation: {:.2e} m", s.ee_distance_deviation);
    if let Some(t) = s.solve_time {
        println!("solve time: min {:.3} / mean {:.3} / max {:.3} s over {} horizons", t.min, t.mean, t.max, t.count);
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn report_cmd(patterns: &[String]) -> anyhow::Result<()> {
    let mut files: Vec<PathBuf> = Vec::new();
    for p in patterns {
        for entry in glob::glob(p).with_context(|| format!("bad pattern {p}"))? {
            files.push(entry?);
        }
    }
    files.sort();
    files.dedup();
    if files.is_empty() {
        return Err(Exit(EXIT_NO_INPUT, format!("no metrics files match {}", patterns.join(" "))).into());
    }
    let mut all = Vec::new();
    println!("{:<40} {:>8} {:>8} {:>8} {:>8}", "run", "min", "mean", "max", "std");
    for f in &files {
        let m = MetricsFile::load(f).with_context(|| format!("reading {}", f.display()))?;
        print_row(&f.display().to_string(), SolveStats::from_times(&m.metrics.solve_times));
        all.extend(m.metrics.solve_times);
    }
    if files.len() > 1 {
        print_row("all", SolveStats::from_times(&all));
    }
    Ok(())
}

fn print_row(name: &str, s: Option<SolveStats>) {
    match s {
        Some(s) => println!("{name:<40} {:>8.3} {:>8.3} {:>8.3} {:>8.3}", s.min, s.mean, s.max, s.std),
        None => println!("{name:<40} {:>8} {:>8} {:>8} {:>8}", "-", "-", "-", "-"),
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PolygonFile {
    Region(Region<f64>),
    Ring(Polygon<f64>),
}

fn convexify_cmd(cli: &Cli, polygon: &Path, segment: &str, r_f: f64) -> anyhow::Result<()> {
    if !polygon.is_file() {
        return Err(Exit(EXIT_NO_INPUT, format!("polygon {} not found", polygon.display())).into());
    }
    let region = match serde_json::from_str::<PolygonFile>(&fs::read_to_string(polygon)?)
        .with_context(|| format!("reading {}", polygon.display()))?
    {
        PolygonFile::Region(r) => r,
        PolygonFile::Ring(p) => Region { outer: p, holes: vec![] },
    };
    let c: Vec<f64> = segment.split(',').map(|x| x.trim().parse::<f64>()).collect::<Result<_, _>>()?;
    if c.len() != 4 {
        return Err(anyhow!("segment needs four numbers, got {}", c.len()));
    }
    let corridor = convexify(&region, (Point2::new(c[0], c[1]), Point2::new(c[2], c[3])), r_f)?;
    let json = serde_json::to_string_pretty(&corridor)?;
    match &cli.out {
        Some(out) => fs::write(out, json)?,
        None => println!("{json}"),
    }
    Ok(())
}
