//! Closed-loop scenario execution.
//!
//! One runner tick is: sense, filter, fault detection, guidance reference,
//! controller solve, log, physics. The simulator is stepped with two
//! substeps per control tick. All randomness flows from the scenario seed
//! through the simulator's noise stream, so a run is a pure function of
//! (scenario, seed): logs and metrics reproduce bit for bit. Wall-clock
//! solve times are collected on the side and never enter the log.

use crate::dynamics::{Mixer, StateVector};
use crate::error::{Error, Result};
use crate::fdd::{Detector, FaultReport, FilterBank, Stage};
use crate::metrics::{compute_metrics, ComputeStats, LogRow, RunLog, RunMeta, RunMetrics};
use crate::mission::{Mission, Track};
use crate::nmpc::{Nmpc, StageRef};
use crate::scenario::Scenario;
use crate::sim::{SensorFrame, Simulator};
use crate::traj::{BoundaryState, PiecewiseTrajectory, PlannerLimits, TrajProblem};
use crate::world::{GridWorld, Knowledge};
use nalgebra::{Vector3, Vector4};
use std::path::Path;
use std::time::Instant;

/// Control tick period [s] (200 Hz).
pub const CONTROL_DT: f64 = 0.005;
/// Physics substeps per control tick.
pub const PHYSICS_SUBSTEPS: usize = 2;
/// Replanning period for map-guided missions [s].
const REPLAN_PERIOD: f64 = 0.5;
/// Sensing range of the progressive map reveal [m].
const REVEAL_RADIUS: f64 = 8.0;
/// A waypoint counts as reached inside this radius [m].
const GOAL_CAPTURE: f64 = 0.4;

/// Per-tick solver timing; wall-clock derived, kept out of the run log.
#[derive(Debug, Clone)]
pub struct SolverRow {
    pub t: f64,
    pub iterations: usize,
    pub qp_iterations: usize,
    pub kkt: f64,
    pub cost: f64,
    pub solve_ms: f64,
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: RunLog,
    pub metrics: RunMetrics,
    pub compute: ComputeStats,
    pub solver_rows: Vec<SolverRow>,
    /// Present when the run was cut short; says why.
    pub diagnostic: Option<String>,
}

impl RunOutput {
    /// Writes log.csv, metrics.csv and solver_stats.csv into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.log.save(&dir.join("log.csv"))?;
        std::fs::write(dir.join("metrics.csv"), self.metrics.to_csv())?;
        let mut s = String::from("t,iterations,qp_iterations,kkt,cost,solve_ms\n");
        for row in &self.solver_rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.t, row.iterations, row.qp_iterations, row.kkt, row.cost, row.solve_ms
            ));
        }
        std::fs::write(dir.join("solver_stats.csv"), s)?;
        Ok(())
    }
}

/// Map-guided flight bookkeeping for waypoint missions.
struct NavState {
    belief: GridWorld,
    goals: Vec<Vector3<f64>>,
    goal_idx: usize,
    /// Active trajectory and the absolute time its clock started.
    active: Option<(PiecewiseTrajectory, f64)>,
    last_plan: f64,
    fault: bool,
    limits: PlannerLimits,
}

impl NavState {
    /// Reference sample at absolute time `t`; hold `fallback` until the
    /// first plan lands.
    fn sample(&self, t: f64, fallback: &Vector3<f64>) -> StageRef {
        match &self.active {
            Some((traj, t0)) => {
                let tau = t - t0;
                let (pos, _) = traj.eval(tau, 0);
                let (vel, clamped) = traj.eval(tau, 1);
                let (acc, _) = traj.eval(tau, 2);
                if clamped && tau > 0.0 {
                    StageRef::hold(pos)
                } else {
                    StageRef { pos, vel, acc }
                }
            }
            None => StageRef::hold(*fallback),
        }
    }

    /// Re-observes the map around the vehicle and replaces the active
    /// trajectory with a fresh plan toward the current goal. Keeps the old
    /// trajectory whenever planning fails.
    fn replan(&mut self, now: f64, est_pos: &Vector3<f64>, est_vel: &Vector3<f64>) {
        self.last_plan = now;
        self.belief.reveal(est_pos, REVEAL_RADIUS);
        self.belief.ensure_field();

        let start = match &self.active {
            Some((traj, t0)) => {
                let tau = now - t0;
                BoundaryState {
                    pos: traj.eval(tau, 0).0,
                    vel: traj.eval(tau, 1).0,
                    acc: traj.eval(tau, 2).0,
                }
            }
            None => BoundaryState { pos: *est_pos, vel: *est_vel, acc: Vector3::zeros() },
        };

        let goal = self.goals[self.goal_idx];
        let clearance = self.limits.safe_distance;
        let target = if self.reachable(&goal, clearance) {
            goal
        } else {
            // The goal is still unseen or blocked in the belief map: aim
            // for the nearest known-free point on the goal-to-vehicle line.
            self.frontier_target(&start.pos, &goal, clearance)
        };

        let path = match self.belief.plan(&start.pos, &target, clearance) {
            Ok(p) => p,
            Err(_) => return,
        };
        let problem = TrajProblem {
            world: Some(&self.belief),
            limits: self.limits.clone(),
            fault: self.fault,
            start,
            end: BoundaryState::rest(target),
        };
        if let Ok((traj, _)) = problem.optimize(&path) {
            self.active = Some((traj, now));
        }
    }

    fn reachable(&self, p: &Vector3<f64>, clearance: f64) -> bool {
        self.belief.knowledge_at(p) == Knowledge::Free
            && self
                .belief
                .distance_query(p)
                .map(|q| q.distance >= clearance)
                .unwrap_or(false)
    }

    fn frontier_target(
        &self,
        cur: &Vector3<f64>,
        goal: &Vector3<f64>,
        clearance: f64,
    ) -> Vector3<f64> {
        let dir = cur - goal;
        let len = dir.norm();
        if len < 1e-9 {
            return *goal;
        }
        let step = 0.5 * self.belief.resolution();
        let steps = (len / step).ceil() as usize;
        for k in 1..=steps {
            let p = goal + dir * (k as f64 / steps as f64);
            if self.reachable(&p, clearance) {
                return p;
            }
        }
        *cur
    }
}

/// Guidance source: an analytic track or map-guided waypoints.
enum Guidance {
    Track(Track),
    Nav(NavState),
}

/// Packs the controller's state estimate from odometry, the gyro and the
/// internal rotor thrust model.
fn pack_estimate(frame: &SensorFrame, t_est: &Vector4<f64>) -> StateVector {
    let mut x = StateVector::zeros();
    x.fixed_rows_mut::<3>(0).copy_from(&frame.odom_pos);
    let q = frame.odom_att.quaternion();
    x[3] = q.w;
    x[4] = q.i;
    x[5] = q.j;
    x[6] = q.k;
    x.fixed_rows_mut::<3>(7).copy_from(&frame.odom_vel);
    x.fixed_rows_mut::<3>(10).copy_from(&frame.gyro);
    x.fixed_rows_mut::<4>(13).copy_from(t_est);
    x
}

fn state_is_sane(x: &StateVector) -> bool {
    x.iter().all(|v| v.is_finite()) && x.fixed_rows::<3>(0).norm() < 1.0e3
}

/// Runs one scenario closed loop.
///
/// `seed_override` replaces the scenario's seed when given. `out_dir`, when
/// given, receives log.csv, metrics.csv and solver_stats.csv. Divergence is
/// not an error: the run is truncated, flagged and scored unsuccessful.
pub fn run_scenario(
    scenario: &Scenario,
    seed_override: Option<u64>,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    scenario.validate()?;
    let seed = seed_override.unwrap_or(scenario.seed);
    let params = scenario.vehicle_params()?;
    let mixer = Mixer::new(&params)?;
    let mission = scenario.mission();

    // Truth map for clearance logging and collision checks.
    let mut truth = scenario.build_world()?;
    truth.reveal_all();
    truth.ensure_field();

    let mut guidance = match mission.track() {
        Some(track) => Guidance::Track(track),
        None => {
            let Mission::Waypoints { points } = &mission else {
                return Err(Error::Config("mission without track must be waypoints".into()));
            };
            let mut belief = scenario.build_world()?;
            belief.reveal(&points[0], REVEAL_RADIUS);
            belief.ensure_field();
            let limits = scenario.limits.clone();
            limits.validate()?;
            Guidance::Nav(NavState {
                belief,
                goals: points[1..].to_vec(),
                goal_idx: 0,
                active: None,
                last_plan: f64::NEG_INFINITY,
                fault: false,
                limits,
            })
        }
    };

    let initial = mission.start_state(&params);
    let mut t_est = initial.thrusts;
    let mut u_prev = initial.thrusts;
    let mut sim =
        Simulator::new(params.clone(), initial, scenario.schedule(), scenario.noise.clone(), seed)?;
    if matches!(mission, Mission::Takeoff { .. }) {
        sim.start_on_ground();
    }

    let mut nmpc = Nmpc::new(scenario.controller.clone(), params.clone())?;
    let mut detector = Detector::new(scenario.fdd.clone(), &mixer)?;
    let mut filters = FilterBank::default();

    let horizon = scenario.controller.horizon;
    let stage_dt = scenario.controller.stage_dt;
    let ticks = (scenario.duration / CONTROL_DT).round() as usize;
    let takeoff_end = match &guidance {
        Guidance::Track(track) => track.takeoff_end(),
        Guidance::Nav(_) => 0.0,
    };

    let mut rows: Vec<LogRow> = Vec::with_capacity(ticks);
    let mut solver_rows: Vec<SolverRow> = Vec::with_capacity(ticks);
    let mut latched: Option<FaultReport> = None;
    let mut diverged = false;
    let mut diagnostic = None;
    let mut plan_total_ms = 0.0;
    let mut plan_count = 0usize;
    let mut refs: Vec<StageRef> = Vec::with_capacity(horizon + 1);

    for _ in 0..ticks {
        let t = sim.time();
        let frame = sim.sense();
        let sig = filters.update(&frame, CONTROL_DT);

        let stage = match &guidance {
            Guidance::Track(track) => track.stage_at(t),
            Guidance::Nav(_) => Stage::Tracking,
        };

        // The detector arms at liftoff, like a weight-on-wheels interlock.
        let mut ratio = Vector4::repeat(1.0);
        let mut p_index = Vector4::zeros();
        if sim.airborne() {
            let tick = detector.tick(t, stage, &params, &mixer, &frame, &sig, &u_prev);
            ratio = tick.motor_ratio;
            p_index = tick.p_index;
            // Innovation feedback: once a rotor's residual-implied shortfall
            // clears the degradation floor it is evidence rather than noise,
            // so bleed it into the thrust estimate. The controller then sees
            // the measured force balance well before any fault confirms,
            // which keeps it from trimming against thrust that is not there.
            // The gain makes a persistent shortfall transfer one-to-one
            // through the command-model decay below.
            if latched.is_none() {
                let obs_gain = (CONTROL_DT / params.sigma).exp_m1();
                for r in 0..4 {
                    if p_index[r] >= detector.config.degradation_floor {
                        t_est[r] =
                            (t_est[r] - obs_gain * tick.t_star[r]).clamp(0.0, params.t_bar);
                    }
                }
            }
            if let Some(report) = tick.report {
                if latched.is_none() {
                    latched = Some(report);
                    t_est[report.rotor] = 0.0;
                    if let Guidance::Nav(nav) = &mut guidance {
                        nav.fault = true;
                        if let Ok(lim) = nav.limits.clone().with_failure_budget(&params) {
                            nav.limits = lim;
                        }
                        nav.last_plan = f64::NEG_INFINITY;
                    }
                }
            }
        }

        // Map maintenance and replanning for waypoint missions.
        if let Guidance::Nav(nav) = &mut guidance {
            let goal = nav.goals[nav.goal_idx];
            if (frame.odom_pos - goal).norm() < GOAL_CAPTURE && nav.goal_idx + 1 < nav.goals.len()
            {
                nav.goal_idx += 1;
                nav.last_plan = f64::NEG_INFINITY;
            }
            if t - nav.last_plan >= REPLAN_PERIOD {
                let t0 = Instant::now();
                nav.replan(t, &frame.odom_pos, &frame.odom_vel);
                plan_total_ms += t0.elapsed().as_secs_f64() * 1.0e3;
                plan_count += 1;
            }
        }

        refs.clear();
        match &guidance {
            Guidance::Track(track) => {
                for i in 0..=horizon {
                    refs.push(track.sample(t + i as f64 * stage_dt));
                }
            }
            Guidance::Nav(nav) => {
                for i in 0..=horizon {
                    refs.push(nav.sample(t + i as f64 * stage_dt, &frame.odom_pos));
                }
            }
        }

        let x0 = pack_estimate(&frame, &t_est);
        let solve_start = Instant::now();
        let solved = nmpc.control(&x0, &refs, latched.as_ref().map(|r| r.rotor));
        let solve_ms = solve_start.elapsed().as_secs_f64() * 1.0e3;
        let (u, stats) = match solved {
            Ok(pair) => pair,
            Err(err) => {
                diverged = true;
                diagnostic = Some(format!("controller failed at t = {t}: {err}"));
                break;
            }
        };

        let pos = Vector3::new(sim.packed_state()[0], sim.packed_state()[1], sim.packed_state()[2]);
        let clearance = truth.distance_query(&pos).map(|q| q.distance).unwrap_or(f64::NAN);
        rows.push(LogRow {
            t,
            state: *sim.packed_state(),
            ref_pos: refs[0].pos,
            cmd: u,
            rpm: frame.rpm,
            stage: match stage {
                Stage::Takeoff => 0,
                Stage::Tracking => 1,
            },
            fault_rotor: latched.as_ref().map(|r| r.rotor as i64).unwrap_or(-1),
            fault_class: LogRow::class_code(latched.as_ref().map(|r| r.class)),
            fault_time: latched.as_ref().map(|r| r.time).unwrap_or(-1.0),
            clearance,
            collision: u8::from(truth.truth_occupied(&pos)),
            ratio,
            p_index,
            kkt: stats.kkt,
            cost: stats.cost,
        });
        solver_rows.push(SolverRow {
            t,
            iterations: stats.iterations,
            qp_iterations: stats.qp_iterations,
            kkt: stats.kkt,
            cost: stats.cost,
            solve_ms,
        });

        // Controller-side rotor thrust model: exact first-order response.
        let decay = (-CONTROL_DT / params.sigma).exp();
        t_est = u + (t_est - u) * decay;
        if let Some(report) = &latched {
            t_est[report.rotor] = 0.0;
        }

        let sub_dt = CONTROL_DT / PHYSICS_SUBSTEPS as f64;
        let mut step_failed = None;
        for _ in 0..PHYSICS_SUBSTEPS {
            if let Err(err) = sim.advance(&u, sub_dt) {
                step_failed = Some(err);
                break;
            }
        }
        if let Some(err) = step_failed {
            diverged = true;
            diagnostic = Some(format!("simulation failed at t = {t}: {err}"));
            break;
        }
        u_prev = u;

        if !state_is_sane(sim.packed_state()) {
            diverged = true;
            diagnostic = Some(format!("state diverged at t = {}", sim.time()));
            break;
        }
    }

    let injection = scenario.failure.first().map(|f| (f.time, f.rotor));
    let log = RunLog {
        name: scenario.name.clone(),
        seed,
        meta: RunMeta { injection, takeoff_end, duration: scenario.duration, diverged },
        rows,
    };
    let metrics = compute_metrics(&log)?;

    let mut compute = ComputeStats {
        nmpc_mean_ms: 0.0,
        nmpc_max_ms: 0.0,
        nmpc_solves: solver_rows.len(),
        plan_total_ms,
        plan_count,
    };
    if !solver_rows.is_empty() {
        let total: f64 = solver_rows.iter().map(|r| r.solve_ms).sum();
        compute.nmpc_mean_ms = total / solver_rows.len() as f64;
        compute.nmpc_max_ms =
            solver_rows.iter().map(|r| r.solve_ms).fold(0.0, f64::max);
    }

    let output = RunOutput { log, metrics, compute, solver_rows, diagnostic };
    if let Some(dir) = out_dir {
        output.write(dir)?;
    }
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scenario;

    fn hover_scenario(extra: &str) -> Scenario {
        let text = format!(
            r#"
duration = 1.5
seed = 11

[world]
kind = "empty"
min = [-5.0, -5.0, 0.0]
max = [5.0, 5.0, 3.0]

[mission]
type = "hover"
position = [0.0, 0.0, 1.5]
{extra}
"#
        );
        Scenario::from_str(&text).unwrap()
    }

    #[test]
    fn hover_run_is_quiet_and_reproducible() {
        let scenario = hover_scenario("");
        let a = run_scenario(&scenario, None, None).unwrap();
        let b = run_scenario(&scenario, None, None).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.metrics, b.metrics);
        assert!(a.metrics.success, "{:?}", a.metrics);
        assert!(!a.metrics.false_alarm);
        assert!(a.metrics.fdd_latency.is_none());
        assert!(a.metrics.rmse < 0.1, "rmse {}", a.metrics.rmse);
        // A different seed must change the noise stream, hence the log.
        let c = run_scenario(&scenario, Some(99), None).unwrap();
        assert_ne!(a.log.to_csv(), c.log.to_csv());
    }

    #[test]
    fn motor_failure_is_detected_and_survived() {
        let scenario = hover_scenario(
            "[[failure]]\ntime = 0.5\nrotor = 1\nkind = \"motor_stop\"\n",
        );
        let out = run_scenario(&scenario, None, None).unwrap();
        let m = &out.metrics;
        assert!(!m.missed_detection && !m.false_alarm, "{m:?}");
        assert_eq!(m.detected_rotor, Some(1));
        let latency = m.fdd_latency.unwrap();
        assert!(latency <= 0.05, "latency {latency}");
        assert!(m.min_altitude > 0.5, "sank to {}", m.min_altitude);
        assert!(m.success, "{m:?}");
        // The latch must appear in the log columns.
        assert!(out.log.rows.iter().any(|r| r.fault_rotor == 1 && r.fault_class == 1));
    }

    #[test]
    fn ground_takeoff_reaches_the_hover_point() {
        let text = r#"
duration = 3.0
seed = 4

[world]
kind = "empty"
min = [-3.0, -3.0, 0.0]
max = [3.0, 3.0, 3.0]

[mission]
type = "takeoff"
position = [0.0, 0.0, 0.0]
height = 1.0
speed = 1.0
"#;
        let scenario = Scenario::from_str(text).unwrap();
        let out = run_scenario(&scenario, None, None).unwrap();
        let m = &out.metrics;
        assert!(m.success, "{m:?}");
        assert!(m.min_altitude >= -1e-9);
        let last = out.log.rows.last().unwrap();
        assert!((last.state[2] - 1.0).abs() < 0.1, "ended at z = {}", last.state[2]);
        // The stage column must switch from takeoff to tracking.
        assert!(out.log.rows.iter().any(|r| r.stage == 0));
        assert!(out.log.rows.iter().any(|r| r.stage == 1));
    }

    #[test]
    fn waypoint_mission_replans_to_the_goal() {
        let text = r#"
duration = 8.0
seed = 21

[world]
kind = "empty"
min = [-1.0, -4.0, 0.0]
max = [6.0, 4.0, 3.0]

[mission]
type = "waypoints"
points = [[0.0, 0.0, 1.2], [4.0, 0.5, 1.2]]
"#;
        let scenario = Scenario::from_str(text).unwrap();
        let out = run_scenario(&scenario, None, None).unwrap();
        let m = &out.metrics;
        assert!(m.success, "{m:?} diag {:?}", out.diagnostic);
        assert!(!m.collided);
        let last = out.log.rows.last().unwrap();
        let goal = Vector3::new(4.0, 0.5, 1.2);
        let final_pos = Vector3::new(last.state[0], last.state[1], last.state[2]);
        assert!(
            (final_pos - goal).norm() < GOAL_CAPTURE,
            "ended {} m from the goal",
            (final_pos - goal).norm()
        );
        assert!(out.compute.plan_count >= 2);
    }
}
