//! Scenario configuration: a structured-text description of one flight.
//!
//! Scenarios are TOML files with a world block, a mission block, optional
//! failure injections and optional config overrides for noise, detection,
//! control and planning. Unknown keys are rejected, and validation errors
//! carry the offending field path.

use crate::error::{Error, Result};
use crate::fdd::FddConfig;
use crate::mission::Mission;
use crate::nmpc::NmpcConfig;
use crate::params::VehicleParams;
use crate::sim::{FailureEvent, FailureMode, FailureSchedule, NoiseProfile};
use crate::traj::PlannerLimits;
use crate::world::{GridWorld, WorldKind};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn default_resolution() -> f64 {
    0.1
}

fn default_name() -> String {
    "scenario".into()
}

fn default_severity() -> f64 {
    1.0
}

/// World block: either generate procedurally or load a saved grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub kind: WorldKind,
    pub min: [f64; 3],
    pub max: [f64; 3],
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default)]
    pub seed: u64,
    /// Load this saved world file instead of generating one.
    #[serde(default)]
    pub file: Option<String>,
}

impl WorldSpec {
    pub fn min_v(&self) -> Vector3<f64> {
        Vector3::from_row_slice(&self.min)
    }

    pub fn max_v(&self) -> Vector3<f64> {
        Vector3::from_row_slice(&self.max)
    }

    pub fn build(&self, base_dir: &Path) -> Result<GridWorld> {
        match &self.file {
            Some(rel) => GridWorld::load(&base_dir.join(rel)),
            None => GridWorld::generate(self.kind, self.min_v(), self.max_v(), self.resolution, self.seed),
        }
    }
}

/// Mission block, tagged by `type`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MissionSpec {
    Hover {
        position: [f64; 3],
    },
    Takeoff {
        #[serde(default)]
        position: [f64; 3],
        #[serde(default = "default_height")]
        height: f64,
        #[serde(default = "default_climb_speed")]
        speed: f64,
    },
    Lemniscate {
        center: [f64; 3],
        #[serde(default = "default_dimensions")]
        dimensions: [f64; 3],
        #[serde(default = "default_track_speed")]
        speed: f64,
    },
    Waypoints {
        points: Vec<[f64; 3]>,
    },
}

fn default_height() -> f64 {
    1.0
}

fn default_climb_speed() -> f64 {
    1.0
}

fn default_dimensions() -> [f64; 3] {
    [6.0, 3.0, 1.0]
}

fn default_track_speed() -> f64 {
    1.0
}

impl MissionSpec {
    pub fn to_mission(&self) -> Mission {
        let v = |a: &[f64; 3]| Vector3::from_row_slice(a);
        match self {
            MissionSpec::Hover { position } => Mission::Hover { position: v(position) },
            MissionSpec::Takeoff { position, height, speed } => {
                Mission::Takeoff { position: v(position), height: *height, speed: *speed }
            }
            MissionSpec::Lemniscate { center, dimensions, speed } => Mission::Lemniscate {
                center: v(center),
                dimensions: v(dimensions),
                speed: *speed,
            },
            MissionSpec::Waypoints { points } => {
                Mission::Waypoints { points: points.iter().map(v).collect() }
            }
        }
    }
}

/// One failure injection line.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    pub time: f64,
    pub rotor: usize,
    pub kind: FailureMode,
    #[serde(default = "default_severity")]
    pub severity: f64,
}

/// Full scenario file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    /// Total simulated time [s].
    pub duration: f64,
    /// Run seed; a command-line seed overrides it.
    #[serde(default)]
    pub seed: u64,
    /// Optional vehicle parameter file (key = value), relative to the
    /// scenario file.
    #[serde(default)]
    pub params: Option<String>,
    pub world: WorldSpec,
    pub mission: MissionSpec,
    #[serde(default)]
    pub failure: Vec<FailureSpec>,
    #[serde(default)]
    pub noise: NoiseProfile,
    #[serde(default)]
    pub fdd: FddConfig,
    #[serde(default)]
    pub controller: NmpcConfig,
    #[serde(default)]
    pub limits: PlannerLimits,
    /// Directory the scenario file was loaded from; resolves relative
    /// paths. Not part of the file schema.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn from_str(text: &str) -> Result<Self> {
        let sc: Scenario =
            toml::from_str(text).map_err(|e| Error::Config(format!("scenario: {}", e.message())))?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("scenario {}: {e}", path.display())))?;
        let mut sc = Self::from_str(&text)?;
        sc.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(sc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("scenario serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn mission(&self) -> Mission {
        self.mission.to_mission()
    }

    pub fn schedule(&self) -> FailureSchedule {
        FailureSchedule {
            events: self
                .failure
                .iter()
                .map(|f| FailureEvent {
                    time: f.time,
                    rotor: f.rotor,
                    mode: f.kind,
                    severity: f.severity,
                })
                .collect(),
        }
    }

    /// Vehicle parameters, loading the referenced file if one is set.
    pub fn vehicle_params(&self) -> Result<VehicleParams> {
        match &self.params {
            Some(rel) => VehicleParams::from_file(&self.base_dir.join(rel)),
            None => Ok(VehicleParams::default()),
        }
    }

    /// Builds the world this scenario flies in.
    pub fn build_world(&self) -> Result<GridWorld> {
        self.world.build(&self.base_dir)
    }

    /// Full validation with field paths in every error.
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::Config("duration: must be > 0".into()));
        }
        let min = self.world.min_v();
        let max = self.world.max_v();
        if !(min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(Error::Config("world.min/max: min must be strictly below max".into()));
        }
        if !(self.world.resolution > 0.0) {
            return Err(Error::Config("world.resolution: must be > 0".into()));
        }

        let mission = self.mission();
        mission.validate()?;
        let inside = |p: &Vector3<f64>, margin: f64| {
            (0..3).all(|a| p[a] >= min[a] + margin && p[a] <= max[a] - margin)
        };
        match &mission {
            Mission::Hover { position } => {
                if !inside(position, 0.05) {
                    return Err(Error::Config("mission.position: outside world bounds".into()));
                }
            }
            Mission::Takeoff { position, height, .. } => {
                let top = position + Vector3::new(0.0, 0.0, *height);
                if position.z < min.z - 1e-9 || !inside(&top, 0.05) {
                    return Err(Error::Config(
                        "mission.height: climb leaves the world bounds".into(),
                    ));
                }
            }
            Mission::Lemniscate { center, dimensions, .. } => {
                let half = dimensions / 2.0;
                for a in 0..3 {
                    if center[a] - half[a] < min[a] + 0.05 || center[a] + half[a] > max[a] - 0.05 {
                        return Err(Error::Config(
                            "mission.dimensions: sweep leaves the world bounds".into(),
                        ));
                    }
                }
            }
            Mission::Waypoints { points } => {
                for (i, p) in points.iter().enumerate() {
                    if !inside(p, 0.05) {
                        return Err(Error::Config(format!(
                            "mission.points[{i}]: outside world bounds"
                        )));
                    }
                }
            }
        }

        for (i, f) in self.failure.iter().enumerate() {
            if f.rotor > 3 {
                return Err(Error::Config(format!("failure[{i}].rotor: must be 0..3")));
            }
            if !(f.time >= 0.0 && f.time < self.duration) {
                return Err(Error::Config(format!(
                    "failure[{i}].time: must lie inside the run duration"
                )));
            }
            if !(f.severity > 0.0 && f.severity <= 1.0) {
                return Err(Error::Config(format!("failure[{i}].severity: must be in (0, 1]")));
            }
        }

        self.noise.validate().map_err(prefix("noise"))?;
        self.fdd.validate().map_err(prefix("fdd"))?;
        self.controller.validate().map_err(prefix("controller"))?;
        self.limits.validate().map_err(prefix("limits"))?;
        Ok(())
    }
}

fn prefix(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(msg) => Error::Config(format!("{section}: {msg}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HOVER_TOML: &str = r#"
name = "hover-check"
duration = 5.0
seed = 3

[world]
kind = "empty"
min = [-5.0, -5.0, 0.0]
max = [5.0, 5.0, 3.0]

[mission]
type = "hover"
position = [0.0, 0.0, 1.5]

[[failure]]
time = 2.0
rotor = 0
kind = "motor_stop"
"#;

    #[test]
    fn parses_and_validates_a_hover_scenario() {
        let sc = Scenario::from_str(HOVER_TOML).unwrap();
        sc.validate().unwrap();
        assert_eq!(sc.name, "hover-check");
        assert_eq!(sc.seed, 3);
        let sched = sc.schedule();
        assert_eq!(sched.events.len(), 1);
        assert_eq!(sched.events[0].mode, FailureMode::MotorStop);
        assert_eq!(sched.events[0].severity, 1.0);
        assert_eq!(sc.mission().start_position(), Vector3::new(0.0, 0.0, 1.5));
        // Defaults fill the optional sections.
        assert_eq!(sc.controller.horizon, 20);
        assert!(sc.noise.accel_std > 0.0);
    }

    #[test]
    fn rejects_unknown_fields_with_a_config_error() {
        let bad = HOVER_TOML.replace("seed = 3", "sneed = 3");
        match Scenario::from_str(&bad) {
            Err(Error::Config(msg)) => assert!(msg.contains("sneed"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn validation_errors_carry_field_paths() {
        let mut sc = Scenario::from_str(HOVER_TOML).unwrap();
        sc.failure[0].time = 99.0;
        match sc.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains("failure[0].time"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }

        let mut sc = Scenario::from_str(HOVER_TOML).unwrap();
        sc.mission = MissionSpec::Hover { position: [0.0, 0.0, 9.0] };
        match sc.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains("mission.position"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }

        let mut sc = Scenario::from_str(HOVER_TOML).unwrap();
        sc.controller.horizon = 0;
        match sc.validate() {
            Err(Error::Config(msg)) => assert!(msg.starts_with("controller:"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sc.toml");
        let sc = Scenario::from_str(HOVER_TOML).unwrap();
        sc.save(&path).unwrap();
        let back = Scenario::load(&path).unwrap();
        back.validate().unwrap();
        assert_eq!(back.name, sc.name);
        assert_eq!(back.failure.len(), 1);
        assert_eq!(back.base_dir, dir.path());
        let world = back.build_world().unwrap();
        assert_eq!(world.kind(), WorldKind::Empty);
    }

    #[test]
    fn lemniscate_must_fit_the_world() {
        let toml = r#"
duration = 10.0

[world]
kind = "empty"
min = [-2.0, -2.0, 0.0]
max = [2.0, 2.0, 3.0]

[mission]
type = "lemniscate"
center = [0.0, 0.0, 1.5]
"#;
        let sc = Scenario::from_str(toml).unwrap();
        match sc.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains("mission.dimensions"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
