//! Rotor-failure-tolerant quadrotor flight stack.
//!
//! The crate simulates a quadrotor with injectable rotor failures and closes
//! the loop around three cooperating pieces:
//! - a composite fault detector that combines rotor-speed ratios, a
//!   thrust-loss observer and a takeoff response monitor,
//! - a nonlinear model-predictive controller that keeps flying on three
//!   rotors by giving up the yaw degree of freedom,
//! - a failure-aware trajectory planner that re-budgets acceleration once a
//!   rotor is gone and keeps a safety distance to mapped obstacles.
//!
//! A scenario harness runs seeded, bit-reproducible closed-loop experiments
//! and aggregates benchmark suites.

pub mod dynamics;
pub mod error;
pub mod fdd;
pub mod lbfgs;
pub mod metrics;
pub mod mission;
pub mod nmpc;
pub mod params;
pub mod runner;
pub mod scenario;
pub mod sim;
pub mod suites;
pub mod traj;
pub mod world;

pub use dynamics::{
    deriv_packed, rk4_step, state_derivative, yaw_equilibrium_rate, ControlCommand, Mixer,
    StateVector, VehicleState, Wrench, STATE_DIM,
};
pub use error::{Error, Result};
pub use metrics::{compute_metrics, ComputeStats, LogRow, RunLog, RunMeta, RunMetrics};
pub use mission::{Mission, Track};
pub use fdd::{
    Detector, FaultClass, FaultReport, FddConfig, FddTick, FilterBank, FilteredSignals, Stage,
};
pub use nmpc::{attitude_error, tilt_angle, AttitudeError, Nmpc, NmpcConfig, SolverStats, StageRef};
pub use params::VehicleParams;
pub use runner::{run_scenario, RunOutput, SolverRow, CONTROL_DT, PHYSICS_SUBSTEPS};
pub use scenario::{FailureSpec, MissionSpec, Scenario, WorldSpec};
pub use sim::{
    Effectiveness, FailureEvent, FailureMode, FailureSchedule, LowPass, LowPass3, NoiseProfile,
    SensorFrame, Simulator,
};
pub use suites::{run_suite, Group, GroupAggregate, SuiteReport, SUITE_IDS};
pub use traj::{
    failure_accel_limit, BoundaryState, OptimizeReport, PiecewiseTrajectory, PlannerLimits,
    TrajProblem,
};
pub use world::{BoxObstacle, Cylinder, DistanceQuery, GridWorld, Knowledge, WorldKind};
