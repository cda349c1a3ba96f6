//! Fixed-step simulation engine with rotor-failure injection and synthetic
//! sensing.
//!
//! Physics integrates at a fast fixed rate with classical Runge-Kutta;
//! sensing and control run at a slower fixed rate. Failures latch at their
//! scheduled times:
//! - `MotorStop` zeroes the rotor's thrust and its telemetry speed
//!   immediately and permanently.
//! - `PropellerLoss` scales the rotor's thrust coefficient by
//!   (1 - severity) at the event instant. The motor itself keeps tracking
//!   its command, so speed telemetry still follows the reference while the
//!   delivered thrust drops. That asymmetry is what separates the two
//!   detection paths downstream.

use crate::dynamics::{rk4_step, Mixer, StateVector, VehicleState};
use crate::error::{Error, Result};
use crate::params::VehicleParams;
use nalgebra::{UnitQuaternion, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// How a rotor fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// The motor stops driving; thrust and rotor speed collapse.
    MotorStop,
    /// The propeller loses part or all of its thrust coefficient while the
    /// motor keeps spinning.
    PropellerLoss,
}

/// One scheduled failure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    /// Simulation time of the event [s].
    pub time: f64,
    /// Affected rotor index (0..3).
    pub rotor: usize,
    pub mode: FailureMode,
    /// Fraction of thrust capability lost, in (0, 1]. Motor stops always
    /// lose everything.
    pub severity: f64,
}

/// Ordered failure schedule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureSchedule {
    pub events: Vec<FailureEvent>,
}

impl FailureSchedule {
    pub fn none() -> Self {
        Self { events: Vec::new() }
    }

    pub fn single(event: FailureEvent) -> Self {
        Self { events: vec![event] }
    }

    pub fn validate(&self) -> Result<()> {
        let mut last = -1.0;
        for ev in &self.events {
            if !ev.time.is_finite() || ev.time < 0.0 {
                return Err(Error::Config(format!("failure time {} invalid", ev.time)));
            }
            if ev.time <= last {
                return Err(Error::Config("failure times must be strictly increasing".into()));
            }
            last = ev.time;
            if ev.rotor > 3 {
                return Err(Error::Config(format!("failure rotor {} out of range", ev.rotor)));
            }
            if !(0.0..=1.0).contains(&ev.severity) || ev.severity == 0.0 {
                return Err(Error::Config(format!("failure severity {} not in (0, 1]", ev.severity)));
            }
            if ev.mode == FailureMode::MotorStop && ev.severity != 1.0 {
                return Err(Error::Config("motor stop always has severity 1".into()));
            }
        }
        Ok(())
    }

    /// Time of the first event, if any.
    pub fn first_time(&self) -> Option<f64> {
        self.events.first().map(|e| e.time)
    }
}

/// Standard deviations of the synthetic sensor noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProfile {
    /// Accelerometer noise per sample [m/s^2].
    pub accel_std: f64,
    /// Gyro noise per sample [rad/s].
    pub gyro_std: f64,
    /// Rotor speed telemetry noise [rev/min].
    pub rpm_std: f64,
    /// Odometry position noise [m].
    pub odom_pos_std: f64,
    /// Odometry velocity noise [m/s].
    pub odom_vel_std: f64,
    /// Odometry attitude noise, small-angle [rad].
    pub odom_att_std: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self {
            accel_std: 0.05,
            gyro_std: 0.005,
            rpm_std: 30.0,
            odom_pos_std: 0.005,
            odom_vel_std: 0.01,
            odom_att_std: 0.001,
        }
    }
}

impl NoiseProfile {
    pub fn zero() -> Self {
        Self {
            accel_std: 0.0,
            gyro_std: 0.0,
            rpm_std: 0.0,
            odom_pos_std: 0.0,
            odom_vel_std: 0.0,
            odom_att_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stds = [
            self.accel_std,
            self.gyro_std,
            self.rpm_std,
            self.odom_pos_std,
            self.odom_vel_std,
            self.odom_att_std,
        ];
        if stds.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("noise deviations must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One synthetic measurement set, produced at the sensor rate.
#[derive(Debug, Clone)]
pub struct SensorFrame {
    /// Sample time [s].
    pub stamp: f64,
    /// Body-frame specific force [m/s^2].
    pub accel: Vector3<f64>,
    /// Body rates [rad/s].
    pub gyro: Vector3<f64>,
    /// Rotor speed telemetry [rev/min].
    pub rpm: Vector4<f64>,
    /// Odometry position [m].
    pub odom_pos: Vector3<f64>,
    /// Odometry velocity [m/s].
    pub odom_vel: Vector3<f64>,
    /// Odometry attitude (body to world).
    pub odom_att: UnitQuaternion<f64>,
}

/// First-order low-pass filter, y += alpha (x - y) with
/// alpha = dt / (dt + 1 / (2 pi f_c)).
///
/// The first sample initializes the state, so there is no startup transient
/// from zero.
#[derive(Debug, Clone)]
pub struct LowPass {
    cutoff_hz: f64,
    state: Option<f64>,
}

impl LowPass {
    pub fn new(cutoff_hz: f64) -> Self {
        Self { cutoff_hz, state: None }
    }

    pub fn alpha(&self, dt: f64) -> f64 {
        dt / (dt + 1.0 / (2.0 * std::f64::consts::PI * self.cutoff_hz))
    }

    pub fn update(&mut self, x: f64, dt: f64) -> f64 {
        let y = match self.state {
            None => x,
            Some(prev) => prev + self.alpha(dt) * (x - prev),
        };
        self.state = Some(y);
        y
    }

    pub fn value(&self) -> Option<f64> {
        self.state
    }

    pub fn reset(&mut self) {
        self.state = None;
    }
}

/// Component-wise low-pass of a 3-vector.
#[derive(Debug, Clone)]
pub struct LowPass3 {
    ch: [LowPass; 3],
}

impl LowPass3 {
    pub fn new(cutoff_hz: f64) -> Self {
        Self {
            ch: [LowPass::new(cutoff_hz), LowPass::new(cutoff_hz), LowPass::new(cutoff_hz)],
        }
    }

    pub fn update(&mut self, x: &Vector3<f64>, dt: f64) -> Vector3<f64> {
        Vector3::new(
            self.ch[0].update(x.x, dt),
            self.ch[1].update(x.y, dt),
            self.ch[2].update(x.z, dt),
        )
    }
}

/// Per-rotor effectiveness under the currently latched failures.
/// 1 means healthy, 0 means no thrust capability.
pub type Effectiveness = Vector4<f64>;

/// One physics step under a command and per-rotor effectiveness.
///
/// The command is scaled by effectiveness before entering the motor lag,
/// and the integrated thrust state is clamped into
/// [0, effectiveness * T_bar], which realizes both the instant collapse of
/// a stopped motor and the coefficient drop of a damaged propeller.
pub fn step(
    params: &VehicleParams,
    mixer: &Mixer,
    z: &StateVector,
    u: &Vector4<f64>,
    effectiveness: &Effectiveness,
    dt: f64,
) -> Result<StateVector> {
    if !(dt > 0.0 && dt <= 0.01) {
        return Err(Error::InvalidInput(format!("physics dt {dt} outside (0, 0.01]")));
    }
    let u_eff = u.component_mul(effectiveness);
    let mut out = rk4_step(params, mixer, z, &u_eff, dt);
    for i in 0..4 {
        let hi = effectiveness[i] * params.t_bar;
        out[13 + i] = out[13 + i].clamp(0.0, hi);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("state became non-finite".into()));
    }
    Ok(out)
}

/// Stateful simulator: truth state, failure latches, motor telemetry and
/// seeded sensor noise.
pub struct Simulator {
    pub params: VehicleParams,
    pub mixer: Mixer,
    z: StateVector,
    /// Healthy-coefficient thrust equivalent of each motor's speed [N].
    /// Tracks the command through the motor lag even when the propeller is
    /// damaged; this is what speed telemetry reports.
    motor_state: Vector4<f64>,
    prop_factor: Vector4<f64>,
    motor_stopped: [bool; 4],
    schedule: FailureSchedule,
    next_event: usize,
    noise: NoiseProfile,
    rng: ChaCha8Rng,
    time: f64,
    /// Ground support: while set, the pose is pinned to the pad until net
    /// thrust lifts the vehicle.
    on_ground: bool,
    ground_pose: Option<StateVector>,
}

impl Simulator {
    pub fn new(
        params: VehicleParams,
        initial: VehicleState,
        schedule: FailureSchedule,
        noise: NoiseProfile,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        schedule.validate()?;
        let mixer = Mixer::new(&params)?;
        let z = initial.pack();
        Ok(Self {
            params,
            mixer,
            z,
            motor_state: initial.thrusts,
            prop_factor: Vector4::repeat(1.0),
            motor_stopped: [false; 4],
            schedule,
            next_event: 0,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
            time: 0.0,
            on_ground: false,
            ground_pose: None,
        })
    }

    /// Enables ground support at the current pose (takeoff missions).
    pub fn start_on_ground(&mut self) {
        self.on_ground = true;
        self.ground_pose = Some(self.z);
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn state(&self) -> VehicleState {
        VehicleState::unpack(&self.z)
    }

    pub fn packed_state(&self) -> &StateVector {
        &self.z
    }

    pub fn effectiveness(&self) -> Effectiveness {
        Vector4::from_fn(|i, _| {
            if self.motor_stopped[i] {
                0.0
            } else {
                self.prop_factor[i]
            }
        })
    }

    pub fn airborne(&self) -> bool {
        !self.on_ground
    }

    fn apply_due_events(&mut self) {
        while self.next_event < self.schedule.events.len()
            && self.schedule.events[self.next_event].time <= self.time + 1e-12
        {
            let ev = self.schedule.events[self.next_event];
            self.next_event += 1;
            match ev.mode {
                FailureMode::MotorStop => {
                    self.motor_stopped[ev.rotor] = true;
                    self.motor_state[ev.rotor] = 0.0;
                    self.z[13 + ev.rotor] = 0.0;
                }
                FailureMode::PropellerLoss => {
                    let factor = (1.0 - ev.severity).max(0.0);
                    self.prop_factor[ev.rotor] *= factor;
                    // Coefficient drop scales whatever thrust the rotor was
                    // producing at the event instant.
                    self.z[13 + ev.rotor] *= factor;
                }
            }
        }
    }

    /// Advances physics by one step under the zero-order-held command.
    pub fn advance(&mut self, u: &Vector4<f64>, dt: f64) -> Result<()> {
        self.apply_due_events();
        let eff = self.effectiveness();
        let next = step(&self.params, &self.mixer, &self.z, u, &eff, dt)?;

        // Motor telemetry integrates the unscaled command; a stopped motor
        // reads zero.
        for i in 0..4 {
            if self.motor_stopped[i] {
                self.motor_state[i] = 0.0;
            } else {
                let du = (u[i].clamp(0.0, self.params.t_bar) - self.motor_state[i])
                    / self.params.sigma;
                self.motor_state[i] = (self.motor_state[i] + du * dt).clamp(0.0, self.params.t_bar);
            }
        }

        if self.on_ground {
            let pad = self.ground_pose.expect("ground pose set with on_ground");
            if next[2] > pad[2] {
                self.on_ground = false;
                self.z = next;
            } else {
                // Pinned: pose and motion hold, rotors keep spooling.
                self.z = pad;
                for i in 0..4 {
                    self.z[13 + i] = next[13 + i];
                }
            }
        } else {
            self.z = next;
        }
        self.time += dt;
        Ok(())
    }

    /// Produces one measurement set from the current truth.
    pub fn sense(&mut self) -> SensorFrame {
        let st = self.state();
        let r = st.att.to_rotation_matrix();

        // Specific force: thrust and drag only; gravity cancels in the
        // accelerometer.
        let v_body = r.transpose() * st.vel;
        let drag_body = self.params.d.component_mul(&v_body);
        let specific_body =
            (Vector3::new(0.0, 0.0, st.thrusts.sum()) - drag_body) / self.params.m;
        // Ground support is an external contact force; while pinned the
        // accelerometer sees exactly the weight reaction.
        let specific_body = if self.on_ground {
            r.transpose() * Vector3::new(0.0, 0.0, self.params.g)
        } else {
            specific_body
        };

        fn draw3(rng: &mut ChaCha8Rng, std: f64) -> Vector3<f64> {
            if std <= 0.0 {
                return Vector3::zeros();
            }
            let n = Normal::new(0.0, std).expect("finite std");
            Vector3::from_fn(|_, _| n.sample(rng))
        }
        let accel = specific_body + draw3(&mut self.rng, self.noise.accel_std);
        let gyro = st.rates + draw3(&mut self.rng, self.noise.gyro_std);

        let mut rpm = Vector4::zeros();
        for i in 0..4 {
            let clean = self.params.rpm_for_thrust(self.motor_state[i]);
            let n = if self.noise.rpm_std > 0.0 {
                Normal::new(0.0, self.noise.rpm_std).unwrap().sample(&mut self.rng)
            } else {
                0.0
            };
            rpm[i] = (clean + n).max(0.0);
        }

        let odom_pos = st.pos + draw3(&mut self.rng, self.noise.odom_pos_std);
        let odom_vel = st.vel + draw3(&mut self.rng, self.noise.odom_vel_std);
        let odom_att = st.att
            * UnitQuaternion::from_scaled_axis(draw3(&mut self.rng, self.noise.odom_att_std));

        SensorFrame {
            stamp: self.time,
            accel,
            gyro,
            rpm,
            odom_pos,
            odom_vel,
            odom_att,
        }
    }
}
