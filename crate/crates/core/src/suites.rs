//! Benchmark suites: named groups of seeded scenarios, run back to back
//! and aggregated.
//!
//! Three suites are built in. `tests1-4` reproduces the four failure
//! experiment groups (propeller loss and motor stop, each injected during
//! tracking and during takeoff). `nav-indoor` and `nav-forest` fly
//! waypoint missions through procedurally generated maps with a mid-flight
//! propeller loss. Run `k` of a group uses seed `base_seed + k`, so a
//! suite is as reproducible as a single run.

use crate::error::{Error, Result};
use crate::fdd::FddConfig;
use crate::nmpc::NmpcConfig;
use crate::runner::run_scenario;
use crate::scenario::{FailureSpec, MissionSpec, Scenario, WorldSpec};
use crate::sim::{FailureMode, NoiseProfile};
use crate::traj::PlannerLimits;
use crate::world::WorldKind;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Suite identifiers accepted by `run_suite`.
pub const SUITE_IDS: [&str; 3] = ["tests1-4", "nav-indoor", "nav-forest"];

/// One experiment group inside a suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    PropLossTracking,
    MotorStopTracking,
    PropLossTakeoff,
    MotorStopTakeoff,
    NavIndoor,
    NavForest,
}

fn base_scenario(name: &str, duration: f64, world: WorldSpec, mission: MissionSpec) -> Scenario {
    Scenario {
        name: name.into(),
        duration,
        seed: 0,
        params: None,
        world,
        mission,
        failure: Vec::new(),
        noise: NoiseProfile::default(),
        fdd: FddConfig::default(),
        controller: NmpcConfig::default(),
        limits: PlannerLimits::default(),
        base_dir: PathBuf::new(),
    }
}

fn empty_world(min: [f64; 3], max: [f64; 3]) -> WorldSpec {
    WorldSpec { kind: WorldKind::Empty, min, max, resolution: 0.1, seed: 0, file: None }
}

/// Hover at 1.5 m over an empty world.
pub fn hover_scenario(duration: f64, failure: Option<FailureSpec>) -> Scenario {
    let mut s = base_scenario(
        "hover",
        duration,
        empty_world([-5.0, -5.0, 0.0], [5.0, 5.0, 3.0]),
        MissionSpec::Hover { position: [0.0, 0.0, 1.5] },
    );
    s.failure.extend(failure);
    s
}

/// Climb 1 m off the pad at 1 m/s.
pub fn takeoff_scenario(duration: f64, failure: Option<FailureSpec>) -> Scenario {
    let mut s = base_scenario(
        "takeoff",
        duration,
        empty_world([-3.0, -3.0, 0.0], [3.0, 3.0, 3.0]),
        MissionSpec::Takeoff { position: [0.0, 0.0, 0.0], height: 1.0, speed: 1.0 },
    );
    s.failure.extend(failure);
    s
}

/// 6 x 3 x 1 m figure-eight at 1 m/s, centered at 1.5 m altitude.
pub fn lemniscate_scenario(duration: f64, failure: Option<FailureSpec>) -> Scenario {
    let mut s = base_scenario(
        "lemniscate",
        duration,
        empty_world([-4.0, -3.0, 0.0], [4.0, 3.0, 3.0]),
        MissionSpec::Lemniscate {
            center: [0.0, 0.0, 1.5],
            dimensions: [6.0, 3.0, 1.0],
            speed: 1.0,
        },
    );
    s.failure.extend(failure);
    s
}

/// Waypoint run through a generated map; start and goal are sampled from
/// the map's clear end bands, so the scenario depends on `world_seed`.
pub fn nav_scenario(
    kind: WorldKind,
    world_seed: u64,
    duration: f64,
    failure: Option<FailureSpec>,
) -> Result<Scenario> {
    let (name, min, max) = match kind {
        WorldKind::Room => ("nav-indoor", [-4.0, -4.0, 0.0], [4.0, 4.0, 3.0]),
        _ => ("nav-forest", [-6.0, -4.0, 0.0], [6.0, 4.0, 3.0]),
    };
    let world = WorldSpec { kind, min, max, resolution: 0.1, seed: world_seed, file: None };
    let grid = world.build(Path::new("."))?;
    let (start, goal) = grid.sample_start_goal(world_seed, 0.45)?;
    let mut s = base_scenario(
        name,
        duration,
        world,
        MissionSpec::Waypoints {
            points: vec![[start.x, start.y, start.z], [goal.x, goal.y, goal.z]],
        },
    );
    s.limits.safe_distance = 0.4;
    if kind == WorldKind::Forest {
        s.limits.v_max = 0.8;
    }
    s.failure.extend(failure);
    Ok(s)
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::PropLossTracking => "test1-prop-tracking",
            Group::MotorStopTracking => "test2-motor-tracking",
            Group::PropLossTakeoff => "test3-prop-takeoff",
            Group::MotorStopTakeoff => "test4-motor-takeoff",
            Group::NavIndoor => "nav-indoor",
            Group::NavForest => "nav-forest",
        }
    }

    /// Builds the scenario of run `rep`; the rotor and injection time walk
    /// through a small pattern so one group covers all rotors.
    pub fn scenario(self, rep: usize, seed: u64) -> Result<Scenario> {
        let rotor = rep % 4;
        let mut s = match self {
            Group::PropLossTracking => lemniscate_scenario(
                12.0,
                Some(FailureSpec {
                    time: 6.0 + 0.1 * (rep % 5) as f64,
                    rotor,
                    kind: FailureMode::PropellerLoss,
                    severity: 1.0,
                }),
            ),
            Group::MotorStopTracking => lemniscate_scenario(
                12.0,
                Some(FailureSpec {
                    time: 6.0 + 0.1 * (rep % 5) as f64,
                    rotor,
                    kind: FailureMode::MotorStop,
                    severity: 1.0,
                }),
            ),
            Group::PropLossTakeoff => takeoff_scenario(
                3.0,
                Some(FailureSpec {
                    time: 0.9,
                    rotor,
                    kind: FailureMode::PropellerLoss,
                    severity: 1.0,
                }),
            ),
            Group::MotorStopTakeoff => takeoff_scenario(
                3.0,
                Some(FailureSpec {
                    time: 0.9,
                    rotor,
                    kind: FailureMode::MotorStop,
                    severity: 1.0,
                }),
            ),
            Group::NavIndoor => nav_scenario(
                WorldKind::Room,
                seed,
                16.0,
                Some(FailureSpec {
                    time: 2.0,
                    rotor,
                    kind: FailureMode::PropellerLoss,
                    severity: 1.0,
                }),
            )?,
            Group::NavForest => nav_scenario(
                WorldKind::Forest,
                seed,
                20.0,
                Some(FailureSpec {
                    time: 2.0,
                    rotor,
                    kind: FailureMode::PropellerLoss,
                    severity: 1.0,
                }),
            )?,
        };
        s.seed = seed;
        s.name = format!("{}-run{rep:02}", self.name());
        Ok(s)
    }
}

/// Groups belonging to a suite id.
pub fn suite_groups(id: &str) -> Result<Vec<Group>> {
    match id {
        "tests1-4" => Ok(vec![
            Group::PropLossTracking,
            Group::MotorStopTracking,
            Group::PropLossTakeoff,
            Group::MotorStopTakeoff,
        ]),
        "nav-indoor" => Ok(vec![Group::NavIndoor]),
        "nav-forest" => Ok(vec![Group::NavForest]),
        _ => Err(Error::Config(format!(
            "unknown suite '{id}'; available: {}",
            SUITE_IDS.join(", ")
        ))),
    }
}

/// Aggregated results of one group. All fields except the solve time are
/// derived from deterministic run metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAggregate {
    pub group: String,
    pub runs: usize,
    pub successes: usize,
    pub missed_detections: usize,
    pub false_alarms: usize,
    pub collisions: usize,
    /// Mean detection latency over the runs that produced one [s].
    pub mean_fdd_latency: Option<f64>,
    pub mean_rmse: f64,
    pub worst_min_altitude: f64,
    /// Informational wall-clock mean; excluded from the aggregate file.
    pub mean_solve_ms: f64,
}

/// Full suite outcome.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub id: String,
    pub base_seed: u64,
    pub reps: usize,
    pub groups: Vec<GroupAggregate>,
}

impl SuiteReport {
    /// Deterministic per-group aggregate table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "group,runs,successes,missed_detections,false_alarms,collisions,\
             mean_fdd_latency,mean_rmse,worst_min_altitude\n",
        );
        for g in &self.groups {
            let latency = match g.mean_fdd_latency {
                Some(v) => format!("{v}"),
                None => "none".into(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                g.group,
                g.runs,
                g.successes,
                g.missed_detections,
                g.false_alarms,
                g.collisions,
                latency,
                g.mean_rmse,
                g.worst_min_altitude
            );
        }
        out
    }

    /// Human-readable summary.
    pub fn to_summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "suite {} | {} runs per group | seeds {}..{}",
            self.id,
            self.reps,
            self.base_seed,
            self.base_seed + self.reps as u64 - 1
        );
        for g in &self.groups {
            let rate = 100.0 * g.successes as f64 / g.runs.max(1) as f64;
            let latency = match g.mean_fdd_latency {
                Some(v) => format!("{:.0} ms", v * 1.0e3),
                None => "n/a".into(),
            };
            let _ = writeln!(
                out,
                "  {:22} success {rate:5.1}%  detection {latency:>7}  missed {}  \
                 false alarms {}  collisions {}  rmse {:.3} m  solve {:.2} ms (informational)",
                g.group,
                g.missed_detections,
                g.false_alarms,
                g.collisions,
                g.mean_rmse,
                g.mean_solve_ms
            );
        }
        out
    }
}

/// Runs every group of a suite `reps` times and aggregates.
///
/// When `out_dir` is given, each run writes its logs under
/// `<out>/<group>/run<k>/` and the suite writes `aggregate.csv` and
/// `summary.txt` at the top. A configuration error in any run aborts the
/// whole suite with the failing run named.
pub fn run_suite(
    id: &str,
    reps: usize,
    base_seed: u64,
    out_dir: Option<&Path>,
) -> Result<SuiteReport> {
    if reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    let groups = suite_groups(id)?;
    let mut aggregates = Vec::with_capacity(groups.len());

    for group in groups {
        let mut agg = GroupAggregate {
            group: group.name().into(),
            runs: reps,
            successes: 0,
            missed_detections: 0,
            false_alarms: 0,
            collisions: 0,
            mean_fdd_latency: None,
            mean_rmse: 0.0,
            worst_min_altitude: f64::INFINITY,
            mean_solve_ms: 0.0,
        };
        let mut latency_sum = 0.0;
        let mut latency_count = 0usize;

        for rep in 0..reps {
            let seed = base_seed + rep as u64;
            let scenario = group.scenario(rep, seed).map_err(|e| {
                Error::Config(format!("{} run {rep}: {e}", group.name()))
            })?;
            let run_dir = out_dir.map(|d| d.join(group.name()).join(format!("run{rep:02}")));
            let output = run_scenario(&scenario, None, run_dir.as_deref())?;
            let m = &output.metrics;
            agg.successes += usize::from(m.success);
            agg.missed_detections += usize::from(m.missed_detection);
            agg.false_alarms += usize::from(m.false_alarm);
            agg.collisions += usize::from(m.collided);
            if let Some(latency) = m.fdd_latency {
                latency_sum += latency;
                latency_count += 1;
            }
            agg.mean_rmse += m.rmse;
            agg.worst_min_altitude = agg.worst_min_altitude.min(m.min_altitude);
            agg.mean_solve_ms += output.compute.nmpc_mean_ms;
        }
        agg.mean_rmse /= reps as f64;
        agg.mean_solve_ms /= reps as f64;
        if latency_count > 0 {
            agg.mean_fdd_latency = Some(latency_sum / latency_count as f64);
        }
        aggregates.push(agg);
    }

    let report =
        SuiteReport { id: id.into(), base_seed, reps, groups: aggregates };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("aggregate.csv"), report.to_csv())?;
        std::fs::write(dir.join("summary.txt"), report.to_summary())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_a_config_error() {
        match run_suite("bogus", 1, 0, None) {
            Err(Error::Config(msg)) => assert!(msg.contains("bogus")),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(matches!(run_suite("tests1-4", 0, 0, None), Err(Error::Config(_))));
    }

    #[test]
    fn every_group_builds_valid_scenarios() {
        for group in [
            Group::PropLossTracking,
            Group::MotorStopTracking,
            Group::PropLossTakeoff,
            Group::MotorStopTakeoff,
            Group::NavIndoor,
            Group::NavForest,
        ] {
            for rep in 0..3 {
                let s = group.scenario(rep, 40 + rep as u64).unwrap();
                s.validate().unwrap_or_else(|e| panic!("{} rep {rep}: {e}", group.name()));
                assert_eq!(s.failure.len(), 1);
                assert_eq!(s.failure[0].rotor, rep % 4);
            }
        }
    }

    #[test]
    fn takeoff_groups_run_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        // One reduced suite pass: only the takeoff groups are cheap enough
        // for a unit test, so run them directly.
        for group in [Group::PropLossTakeoff, Group::MotorStopTakeoff] {
            let scenario = group.scenario(0, 33).unwrap();
            let out = run_scenario(&scenario, None, Some(&dir.path().join(group.name()))).unwrap();
            let m = &out.metrics;
            assert!(!m.missed_detection, "{}: {m:?}", group.name());
            assert!(m.fdd_latency.unwrap() <= 0.05, "{}: {m:?}", group.name());
            assert!(m.min_altitude >= -1e-9, "{}: {m:?}", group.name());
        }
        assert!(dir.path().join("test3-prop-takeoff/log.csv").exists());
    }

    #[test]
    fn aggregate_csv_lists_every_group() {
        let report = SuiteReport {
            id: "tests1-4".into(),
            base_seed: 0,
            reps: 2,
            groups: vec![GroupAggregate {
                group: "test1-prop-tracking".into(),
                runs: 2,
                successes: 2,
                missed_detections: 0,
                false_alarms: 0,
                collisions: 0,
                mean_fdd_latency: Some(0.105),
                mean_rmse: 0.12,
                worst_min_altitude: 1.1,
                mean_solve_ms: 2.5,
            }],
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("group,runs,"));
        assert!(csv.contains("test1-prop-tracking,2,2,0,0,0,0.105,0.12,1.1"));
        assert!(report.to_summary().contains("105 ms"));
    }
}
