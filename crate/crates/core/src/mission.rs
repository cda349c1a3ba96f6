//! Flight missions and their reference tracks.
//!
//! A mission describes what the vehicle is asked to do; the first three
//! kinds carry an analytic position/velocity/acceleration track that the
//! controller samples directly. Waypoint missions have no closed form:
//! their references come from the online planner in the run loop.

use crate::dynamics::VehicleState;
use crate::error::{Error, Result};
use crate::fdd::Stage;
use crate::nmpc::StageRef;
use crate::params::VehicleParams;
use nalgebra::Vector3;

/// Settling time added after the climb before the takeoff flight stage
/// hands over to tracking [s].
pub const TAKEOFF_SETTLE: f64 = 0.5;

/// What the vehicle is asked to fly.
#[derive(Debug, Clone, PartialEq)]
pub enum Mission {
    /// Hold a fixed position.
    Hover { position: Vector3<f64> },
    /// Climb from the ground pad straight up to a hover height.
    Takeoff { position: Vector3<f64>, height: f64, speed: f64 },
    /// Figure-eight through `center` covering the full extents in
    /// `dimensions`, flown at a peak speed of `speed` after holding the
    /// center for `hold` seconds.
    Lemniscate { center: Vector3<f64>, dimensions: Vector3<f64>, speed: f64, hold: f64 },
    /// Fly through a list of waypoints in a partially unknown world.
    Waypoints { points: Vec<Vector3<f64>> },
}

impl Mission {
    pub fn validate(&self) -> Result<()> {
        let finite3 = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        match self {
            Mission::Hover { position } => {
                if !finite3(position) {
                    return Err(Error::Config("mission.position: must be finite".into()));
                }
            }
            Mission::Takeoff { position, height, speed } => {
                if !finite3(position) {
                    return Err(Error::Config("mission.position: must be finite".into()));
                }
                if !(*height > 0.0) || !height.is_finite() {
                    return Err(Error::Config("mission.height: must be > 0".into()));
                }
                if !(*speed > 0.0) || !speed.is_finite() {
                    return Err(Error::Config("mission.speed: must be > 0".into()));
                }
            }
            Mission::Lemniscate { center, dimensions, speed } => {
                if !finite3(center) {
                    return Err(Error::Config("mission.center: must be finite".into()));
                }
                if !finite3(dimensions) || dimensions.iter().any(|d| *d < 0.0) {
                    return Err(Error::Config("mission.dimensions: must be >= 0".into()));
                }
                if dimensions.max() <= 0.0 {
                    return Err(Error::Config(
                        "mission.dimensions: at least one extent must be > 0".into(),
                    ));
                }
                if !(*speed > 0.0) || !speed.is_finite() {
                    return Err(Error::Config("mission.speed: must be > 0".into()));
                }
            }
            Mission::Waypoints { points } => {
                if points.len() < 2 {
                    return Err(Error::Config(
                        "mission.points: need at least a start and one goal".into(),
                    ));
                }
                if points.iter().any(|p| !finite3(p)) {
                    return Err(Error::Config("mission.points: must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Where the vehicle is at mission start.
    pub fn start_position(&self) -> Vector3<f64> {
        match self {
            Mission::Hover { position } | Mission::Takeoff { position, .. } => *position,
            Mission::Lemniscate { center, .. } => *center,
            Mission::Waypoints { points } => points[0],
        }
    }

    /// Initial simulator state: grounded for takeoff, hovering otherwise.
    pub fn start_state(&self, params: &VehicleParams) -> VehicleState {
        match self {
            Mission::Takeoff { position, .. } => VehicleState::grounded_at(*position),
            _ => VehicleState::hover_at(self.start_position(), params),
        }
    }

    /// Analytic reference track; `None` for waypoint missions.
    pub fn track(&self) -> Option<Track> {
        match self {
            Mission::Hover { position } => Some(Track::hover(*position)),
            Mission::Takeoff { position, height, speed } => {
                Some(Track::takeoff(*position, *height, *speed))
            }
            Mission::Lemniscate { center, dimensions, speed } => {
                Some(Track::lemniscate(*center, *dimensions, *speed))
            }
            Mission::Waypoints { .. } => None,
        }
    }
}

/// Analytic reference trajectory for the non-planning missions.
#[derive(Debug, Clone)]
pub struct Track {
    kind: TrackKind,
}

#[derive(Debug, Clone)]
enum TrackKind {
    Hover {
        position: Vector3<f64>,
    },
    Takeoff {
        base: Vector3<f64>,
        height: f64,
        duration: f64,
    },
    Lemniscate {
        center: Vector3<f64>,
        /// Half extents (x) and quarter-wave amplitudes (y, z).
        amp: Vector3<f64>,
        /// Steady parameter rate [rad/s].
        omega: f64,
        /// Spin-up time over which the parameter rate ramps in [s].
        ramp: f64,
    },
}

/// Rest-to-rest smoothing polynomial and its first two derivatives.
fn quintic_blend(tau: f64) -> (f64, f64, f64) {
    let t2 = tau * tau;
    let t3 = t2 * tau;
    let s = t3 * (10.0 - 15.0 * tau + 6.0 * t2);
    let ds = t2 * (30.0 - 60.0 * tau + 30.0 * t2);
    let dds = tau * (60.0 - 180.0 * tau + 120.0 * t2);
    (s, ds, dds)
}

impl Track {
    pub fn hover(position: Vector3<f64>) -> Self {
        Self { kind: TrackKind::Hover { position } }
    }

    /// Vertical climb with a rest-to-rest quintic profile whose peak climb
    /// rate equals `speed`.
    pub fn takeoff(base: Vector3<f64>, height: f64, speed: f64) -> Self {
        // Peak rate of the quintic blend is 15/8 of the average rate.
        let duration = 15.0 * height / (8.0 * speed);
        Self { kind: TrackKind::Takeoff { base, height, duration } }
    }

    /// Gerono-style figure-eight: x sweeps a full sine, y and z the
    /// double-frequency crossover. `speed` is the peak path speed once the
    /// parameter rate has ramped in.
    pub fn lemniscate(center: Vector3<f64>, dimensions: Vector3<f64>, speed: f64) -> Self {
        let amp = dimensions / 2.0;
        // Path speed peaks at the crossing: |dp/dtheta| there is
        // sqrt(ax^2 + 4 ay^2 + 4 az^2).
        let peak = (amp.x * amp.x + 4.0 * (amp.y * amp.y + amp.z * amp.z)).sqrt();
        let omega = speed / peak;
        Self { kind: TrackKind::Lemniscate { center, amp, omega, ramp: 3.0 } }
    }

    /// Time at which the takeoff climb (plus settling) hands over to the
    /// tracking stage. Zero for missions that start airborne.
    pub fn takeoff_end(&self) -> f64 {
        match &self.kind {
            TrackKind::Takeoff { duration, .. } => duration + TAKEOFF_SETTLE,
            _ => 0.0,
        }
    }

    /// Detector stage to use at time `t`.
    pub fn stage_at(&self, t: f64) -> Stage {
        if t < self.takeoff_end() {
            Stage::Takeoff
        } else {
            Stage::Tracking
        }
    }

    /// Reference sample at time `t` (clamped into the mission's domain).
    pub fn sample(&self, t: f64) -> StageRef {
        match &self.kind {
            TrackKind::Hover { position } => StageRef::hold(*position),
            TrackKind::Takeoff { base, height, duration } => {
                let tau = (t / duration).clamp(0.0, 1.0);
                let (s, ds, dds) = quintic_blend(tau);
                StageRef {
                    pos: base + Vector3::new(0.0, 0.0, height * s),
                    vel: Vector3::new(0.0, 0.0, height * ds / duration),
                    acc: Vector3::new(0.0, 0.0, height * dds / (duration * duration)),
                }
            }
            TrackKind::Lemniscate { center, amp, omega, ramp } => {
                let t = t.max(0.0);
                // Parameter angle with a smoothstep spin-up of its rate.
                let (theta, theta_dot, theta_ddot) = if t < *ramp {
                    let u = t / ramp;
                    let blend = u * u * (3.0 - 2.0 * u);
                    let integral = u * u * u - u * u * u * u / 2.0;
                    (
                        omega * ramp * integral,
                        omega * blend,
                        omega * (6.0 * u - 6.0 * u * u) / ramp,
                    )
                } else {
                    (omega * (ramp / 2.0 + (t - ramp)), *omega, 0.0)
                };
                let (s1, c1) = theta.sin_cos();
                let (s2, c2) = (2.0 * theta).sin_cos();
                let p = Vector3::new(amp.x * s1, amp.y * s2, amp.z * s2);
                let dp = Vector3::new(amp.x * c1, 2.0 * amp.y * c2, 2.0 * amp.z * c2);
                let ddp = Vector3::new(-amp.x * s1, -4.0 * amp.y * s2, -4.0 * amp.z * s2);
                StageRef {
                    pos: center + p,
                    vel: dp * theta_dot,
                    acc: ddp * theta_dot * theta_dot + dp * theta_ddot,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn takeoff_profile_is_rest_to_rest_with_peak_speed() {
        let track = Track::takeoff(Vector3::new(0.5, -0.2, 0.0), 1.0, 1.0);
        let duration = 15.0 / 8.0;
        assert_relative_eq!(track.takeoff_end(), duration + TAKEOFF_SETTLE, epsilon = 1e-12);

        let start = track.sample(0.0);
        assert_relative_eq!(start.pos, Vector3::new(0.5, -0.2, 0.0), epsilon = 1e-12);
        assert_relative_eq!(start.vel.norm(), 0.0, epsilon = 1e-12);

        let top = track.sample(duration);
        assert_relative_eq!(top.pos.z, 1.0, epsilon = 1e-12);
        assert_relative_eq!(top.vel.norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(top.acc.norm(), 0.0, epsilon = 1e-12);

        // Peak climb rate at mid-climb equals the commanded speed.
        let mid = track.sample(duration / 2.0);
        assert_relative_eq!(mid.vel.z, 1.0, epsilon = 1e-12);
        // Holds the top after the climb.
        let later = track.sample(10.0);
        assert_relative_eq!(later.pos.z, 1.0, epsilon = 1e-12);

        assert_eq!(track.stage_at(duration + 0.4), Stage::Takeoff);
        assert_eq!(track.stage_at(duration + 0.6), Stage::Tracking);
    }

    #[test]
    fn lemniscate_covers_the_box_at_the_requested_speed() {
        let center = Vector3::new(0.0, 0.0, 1.5);
        let dims = Vector3::new(6.0, 3.0, 1.0);
        let track = Track::lemniscate(center, dims, 1.0);

        let mut max_dev: Vector3<f64> = Vector3::zeros();
        let mut max_speed: f64 = 0.0;
        for k in 0..40_000 {
            let t = 3.0 + k as f64 * 0.005;
            let s = track.sample(t);
            for a in 0..3 {
                max_dev[a] = max_dev[a].max((s.pos[a] - center[a]).abs());
            }
            max_speed = max_speed.max(s.vel.norm());
        }
        assert_relative_eq!(2.0 * max_dev.x, 6.0, epsilon = 1e-3);
        assert_relative_eq!(2.0 * max_dev.y, 3.0, epsilon = 1e-3);
        assert_relative_eq!(2.0 * max_dev.z, 1.0, epsilon = 1e-3);
        assert_relative_eq!(max_speed, 1.0, epsilon = 1e-3);

        // Starts at the crossing, at rest.
        let s0 = track.sample(0.0);
        assert_relative_eq!(s0.pos, center, epsilon = 1e-12);
        assert_relative_eq!(s0.vel.norm(), 0.0, epsilon = 1e-12);
        assert_eq!(track.stage_at(0.0), Stage::Tracking);
    }

    #[test]
    fn lemniscate_derivatives_are_consistent() {
        let track =
            Track::lemniscate(Vector3::new(1.0, -2.0, 2.0), Vector3::new(6.0, 3.0, 1.0), 1.2);
        let h = 1e-5;
        for &t in &[0.5, 1.7, 2.9, 3.1, 8.0, 20.0] {
            let c = track.sample(t);
            let p = track.sample(t + h);
            let m = track.sample(t - h);
            let vel_fd = (p.pos - m.pos) / (2.0 * h);
            let acc_fd = (p.vel - m.vel) / (2.0 * h);
            assert_relative_eq!(c.vel, vel_fd, epsilon = 1e-6);
            assert_relative_eq!(c.acc, acc_fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn mission_validation_catches_degenerate_inputs() {
        assert!(Mission::Hover { position: Vector3::new(0.0, 0.0, f64::NAN) }
            .validate()
            .is_err());
        assert!(Mission::Takeoff {
            position: Vector3::zeros(),
            height: 0.0,
            speed: 1.0
        }
        .validate()
        .is_err());
        assert!(Mission::Waypoints { points: vec![Vector3::zeros()] }.validate().is_err());
        let ok = Mission::Lemniscate {
            center: Vector3::new(0.0, 0.0, 1.5),
            dimensions: Vector3::new(6.0, 3.0, 1.0),
            speed: 1.0,
        };
        assert!(ok.validate().is_ok());
        assert!(ok.track().is_some());
        let grounded = Mission::Takeoff {
            position: Vector3::new(1.0, 1.0, 0.0),
            height: 1.0,
            speed: 1.0,
        };
        let st = grounded.start_state(&VehicleParams::default());
        assert_eq!(st.pos, Vector3::new(1.0, 1.0, 0.0));
        assert_eq!(st.thrusts.sum(), 0.0);
    }
}
