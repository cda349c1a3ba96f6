//! End-to-end tests of the installed binary: exit codes, file outputs and
//! the stdout table contract.

use nalgebra::Vector3;
use rotorsafe::{GridWorld, WorldKind};
use std::path::Path;
use std::process::Command;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rotorsafe"))
}

fn write_hover_scenario(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("hover.toml");
    std::fs::write(
        &path,
        r#"
name = "hover"
duration = 1.0
seed = 5

[world]
kind = "empty"
min = [-5.0, -5.0, 0.0]
max = [5.0, 5.0, 3.0]

[mission]
type = "hover"
position = [0.0, 0.0, 1.5]
"#,
    )
    .unwrap();
    path
}

#[test]
fn simulate_writes_logs_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_hover_scenario(dir.path());
    let out_dir = dir.path().join("out");

    let output = binary()
        .args(["simulate", "--scenario"])
        .arg(&scenario)
        .args(["--seed", "9", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&output.stderr));

    let log = std::fs::read_to_string(out_dir.join("log.csv")).unwrap();
    assert!(log.starts_with("# scenario = hover"));
    assert!(log.contains("# seed = 9"));
    assert!(out_dir.join("metrics.csv").exists());
    assert!(out_dir.join("solver_stats.csv").exists());

    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("success"), "stdout: {stdout}");
}

#[test]
fn simulate_rejects_bad_configs_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown key.
    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        "duration = 1.0\nsneed = 1\n[world]\nkind = \"empty\"\nmin = [0,0,0]\nmax = [1,1,1]\n[mission]\ntype = \"hover\"\nposition = [0.5,0.5,0.5]\n",
    )
    .unwrap();
    let status = binary().args(["simulate", "--scenario"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));

    // Missing file.
    let status = binary()
        .args(["simulate", "--scenario"])
        .arg(dir.path().join("nope.toml"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn plan_prints_a_sampled_trajectory_table() {
    let dir = tempfile::tempdir().unwrap();
    let world = GridWorld::generate(
        WorldKind::Forest,
        Vector3::new(-6.0, -4.0, 0.0),
        Vector3::new(6.0, 4.0, 3.0),
        0.1,
        13,
    )
    .unwrap();
    let world_path = dir.path().join("forest.world");
    world.save(&world_path).unwrap();

    let output = binary()
        .args(["plan", "--world"])
        .arg(&world_path)
        .args(["--start", "-4.5,0,1.5", "--goal", "4.5,0.5,1.5", "--fault"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&output.stderr));

    let stdout = String::from_utf8_lossy(&output.stdout);
    let mut lines = stdout.lines();
    assert_eq!(lines.next().unwrap(), "t,px,py,pz,vx,vy,vz,ax,ay,az");
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() > 100, "only {} samples", rows.len());
    for row in [rows[0], rows[rows.len() / 2], rows[rows.len() - 1]] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 10);
        for field in fields {
            field.parse::<f64>().unwrap();
        }
    }
    // Endpoints must match the request.
    let first: Vec<f64> = rows[0].split(',').map(|v| v.parse().unwrap()).collect();
    let last: Vec<f64> = rows[rows.len() - 1].split(',').map(|v| v.parse().unwrap()).collect();
    assert!((first[1] - (-4.5)).abs() < 1e-6 && (first[3] - 1.5).abs() < 1e-6);
    assert!((last[1] - 4.5).abs() < 1e-6 && (last[2] - 0.5).abs() < 1e-6);
}

#[test]
fn plan_with_unreachable_goal_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // A corridor world: everything off the free channel is solid, so a
    // goal buried in the wall has no passable cell nearby.
    let world = GridWorld::generate(
        WorldKind::Corridor,
        Vector3::new(-4.0, -4.0, 0.0),
        Vector3::new(4.0, 4.0, 2.0),
        0.1,
        1,
    )
    .unwrap();
    let world_path = dir.path().join("corridor.world");
    world.save(&world_path).unwrap();

    let output = binary()
        .args(["plan", "--world"])
        .arg(&world_path)
        .args(["--start", "-3,0,1", "--goal", "3,3.5,1"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1), "stderr: {}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn benchmark_rejects_unknown_suites() {
    let output = binary().args(["benchmark", "--suite", "bogus"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("bogus"), "stderr: {stderr}");
}

#[test]
fn benchmark_runs_a_suite_and_writes_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("bench");
    let output = binary()
        .args(["benchmark", "--suite", "tests1-4", "--reps", "1", "--seed", "3", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&output.stderr));

    let aggregate = std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    assert!(aggregate.lines().count() >= 5, "aggregate: {aggregate}");
    for group in
        ["test1-prop-tracking", "test2-motor-tracking", "test3-prop-takeoff", "test4-motor-takeoff"]
    {
        assert!(aggregate.contains(group));
        assert!(out_dir.join(group).join("run00/log.csv").exists());
    }
    assert!(out_dir.join("summary.txt").exists());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("suite tests1-4"), "stdout: {stdout}");
}
