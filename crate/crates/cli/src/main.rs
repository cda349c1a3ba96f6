//! Command-line front end.
//!
//! Three subcommands: `simulate` runs one scenario closed loop, `plan`
//! produces an obstacle-aware trajectory through a saved world and prints
//! it as a plot-ready CSV table, `benchmark` runs a named suite of seeded
//! experiment groups. Exit codes: 0 on success, 1 when a run fails, 2 on
//! configuration errors.

use clap::{Parser, Subcommand};
use nalgebra::Vector3;
use rotorsafe::traj::{BoundaryState, TrajProblem};
use rotorsafe::{
    run_scenario, run_suite, Error, GridWorld, PlannerLimits, Scenario, VehicleParams,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rotorsafe", version, about = "Rotor-failure-tolerant flight stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario closed loop and write logs and metrics.
    Simulate {
        /// Scenario file (TOML).
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the seed in the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for log.csv, metrics.csv and solver_stats.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan a trajectory through a saved world and print it as CSV.
    Plan {
        /// Saved world file.
        #[arg(long)]
        world: PathBuf,
        /// Start position as x,y,z.
        #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
        start: [f64; 3],
        /// Goal position as x,y,z.
        #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
        goal: [f64; 3],
        /// Plan under the post-failure acceleration budget.
        #[arg(long)]
        fault: bool,
        /// Vehicle parameter file (key = value); defaults are used otherwise.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Run a benchmark suite and aggregate the results.
    Benchmark {
        /// Suite id: tests1-4, nav-indoor or nav-forest.
        #[arg(long)]
        suite: String,
        /// Runs per experiment group.
        #[arg(long, default_value_t = 20)]
        reps: usize,
        /// Base seed; run k uses seed + k.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for per-run logs and the aggregate files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_triple(text: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected x,y,z but got '{text}'"));
    }
    let mut out = [0.0; 3];
    for (k, part) in parts.iter().enumerate() {
        out[k] = part
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("bad coordinate '{part}' in '{text}'"))?;
    }
    Ok(out)
}

/// A file the user named on the command line that cannot be read is a
/// configuration problem, not a run failure.
fn load_as_config<T>(result: rotorsafe::Result<T>, path: &Path) -> rotorsafe::Result<T> {
    result.map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> rotorsafe::Result<()> {
    match cli.command {
        Command::Simulate { scenario, seed, out } => simulate(&scenario, seed, out.as_deref()),
        Command::Plan { world, start, goal, fault, params } => {
            plan(&world, start, goal, fault, params.as_deref())
        }
        Command::Benchmark { suite, reps, seed, out } => {
            let report = run_suite(&suite, reps, seed, out.as_deref())?;
            print!("{}", report.to_summary());
            Ok(())
        }
    }
}

fn simulate(path: &Path, seed: Option<u64>, out: Option<&Path>) -> rotorsafe::Result<()> {
    let scenario = load_as_config(Scenario::load(path), path)?;
    let output = run_scenario(&scenario, seed, out)?;
    let m = &output.metrics;
    println!("scenario '{}' seed {}", output.log.name, output.log.seed);
    println!(
        "  {} | rmse {:.3} m | min altitude {:.2} m | max yaw rate {:.2} rad/s",
        if m.success { "success" } else { "FAILED" },
        m.rmse,
        m.min_altitude,
        m.max_yaw_rate
    );
    match m.fdd_latency {
        Some(latency) => println!(
            "  failure detected on rotor {} after {:.0} ms",
            m.detected_rotor.unwrap(),
            latency * 1.0e3
        ),
        None => println!("  no failure report"),
    }
    println!(
        "  controller mean {:.2} ms, max {:.2} ms over {} solves (informational)",
        output.compute.nmpc_mean_ms, output.compute.nmpc_max_ms, output.compute.nmpc_solves
    );
    if let Some(diag) = &output.diagnostic {
        eprintln!("note: {diag}");
    }
    if m.success {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "run unsuccessful{}",
            output.diagnostic.map(|d| format!(": {d}")).unwrap_or_default()
        )))
    }
}

fn plan(
    world_path: &Path,
    start: [f64; 3],
    goal: [f64; 3],
    fault: bool,
    params_path: Option<&Path>,
) -> rotorsafe::Result<()> {
    let mut world = load_as_config(GridWorld::load(world_path), world_path)?;
    world.reveal_all();
    world.ensure_field();
    let params = match params_path {
        Some(p) => load_as_config(VehicleParams::from_file(p), p)?,
        None => VehicleParams::default(),
    };
    let mut limits = PlannerLimits::default();
    if fault {
        limits = limits.with_failure_budget(&params)?;
    }
    let start = Vector3::from_row_slice(&start);
    let goal = Vector3::from_row_slice(&goal);

    let path = world.plan(&start, &goal, limits.safe_distance)?;
    let problem = TrajProblem {
        world: Some(&world),
        limits,
        fault,
        start: BoundaryState::rest(start),
        end: BoundaryState::rest(goal),
    };
    let (traj, report) = problem.optimize(&path)?;

    // Plot-ready table at 100 Hz on stdout; diagnostics on stderr.
    println!("t,px,py,pz,vx,vy,vz,ax,ay,az");
    let total = traj.total_time();
    let steps = (total * 100.0).ceil() as usize;
    for k in 0..=steps {
        let t = (k as f64 * 0.01).min(total);
        let (p, _) = traj.eval(t, 0);
        let (v, _) = traj.eval(t, 1);
        let (a, _) = traj.eval(t, 2);
        println!(
            "{t},{},{},{},{},{},{},{},{},{}",
            p.x, p.y, p.z, v.x, v.y, v.z, a.x, a.y, a.z
        );
    }
    eprintln!(
        "planned {} segments over {:.2} s in {} iterations (cost {:.3}{})",
        traj.segment_count(),
        total,
        report.iterations,
        report.cost,
        if fault { ", failure budget" } else { "" }
    );
    Ok(())
}
