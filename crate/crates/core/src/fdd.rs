//! Composite rotor fault detection and diagnosis.
//!
//! Three mechanisms cover the failure space:
//! - The motor index compares measured rotor speed against the speed the
//!   current command should produce. A stopped motor collapses the ratio
//!   within a few samples. A damaged propeller does not move it at all,
//!   because the speed loop still tracks.
//! - The thrust-loss observer reconstructs, from filtered inertial data and
//!   the rigid-body model, how much thrust each rotor actually delivered
//!   versus what its measured speed implies. The per-rotor loss normalized
//!   by the thrust limit is the propeller index; it crosses its threshold
//!   once the controller has wound the dead rotor's command toward
//!   saturation.
//! - The takeoff monitor is model-free. Near the ground, inertial data is
//!   barely excited, so it watches for the lateral and angular acceleration
//!   sign pattern that losing one specific rotor must produce.
//!
//! Every mechanism is debounced over consecutive ticks and the first
//! confirmed report latches. Motor evidence outranks takeoff evidence,
//! which outranks propeller evidence.

use crate::dynamics::Mixer;
use crate::error::{Error, Result};
use crate::params::VehicleParams;
use crate::sim::{LowPass3, SensorFrame};
use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

/// Detection thresholds and debounce policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FddConfig {
    /// Motor index threshold: fault when rpm_meas / rpm_ref <= gamma_m.
    pub gamma_m: f64,
    /// Propeller index threshold: fault when t_star_i / T_bar >= gamma_p.
    pub gamma_p: f64,
    /// Takeoff thresholds: lateral accelerations [m/s^2] and angular
    /// accelerations [rad/s^2].
    pub gamma_q: [f64; 4],
    /// Consecutive ticks a condition must hold before it latches.
    pub debounce: usize,
    /// Motor index is evaluated only when the reference speed exceeds this
    /// fraction of hover speed.
    pub rpm_floor_frac: f64,
    /// Propeller losses in [degradation_floor, gamma_p) raise a warning
    /// without reconfiguration.
    pub degradation_floor: f64,
}

impl Default for FddConfig {
    fn default() -> Self {
        Self {
            gamma_m: 0.2,
            gamma_p: 0.8,
            gamma_q: [0.005, 0.005, 0.2, 0.2],
            debounce: 3,
            rpm_floor_frac: 0.1,
            degradation_floor: 0.2,
        }
    }
}

impl FddConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.gamma_m && self.gamma_m < 1.0) {
            return Err(Error::Config(format!("fdd.gamma_m: {} not in (0, 1)", self.gamma_m)));
        }
        if !(0.0 < self.gamma_p && self.gamma_p <= 1.0) {
            return Err(Error::Config(format!("fdd.gamma_p: {} not in (0, 1]", self.gamma_p)));
        }
        if self.gamma_q.iter().any(|g| *g <= 0.0) {
            return Err(Error::Config("fdd.gamma_q: thresholds must be > 0".into()));
        }
        if self.debounce == 0 {
            return Err(Error::Config("fdd.debounce: must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which mechanism identified the failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultClass {
    Motor,
    Propeller,
    Takeoff,
}

/// A latched detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultReport {
    /// Rotor believed dead (0..3).
    pub rotor: usize,
    pub class: FaultClass,
    /// Simulation time the report latched [s].
    pub time: f64,
}

/// Flight stage, which selects the active mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Takeoff monitor plus motor index.
    Takeoff,
    /// Motor index plus propeller index.
    Tracking,
}

/// Filtered signals consumed by the detector and controller.
#[derive(Debug, Clone, Copy)]
pub struct FilteredSignals {
    /// Body-frame specific force, low-passed [m/s^2].
    pub accel_body: Vector3<f64>,
    /// Body rates, low-passed [rad/s].
    pub gyro: Vector3<f64>,
    /// Body angular acceleration, differentiated then low-passed [rad/s^2].
    pub ang_accel: Vector3<f64>,
}

/// Low-pass bank feeding [`FilteredSignals`] from raw sensor frames.
#[derive(Debug, Clone)]
pub struct FilterBank {
    accel: LowPass3,
    gyro: LowPass3,
    ang_accel: LowPass3,
    prev_gyro_f: Option<Vector3<f64>>,
}

impl Default for FilterBank {
    fn default() -> Self {
        Self::new(20.0, 10.0)
    }
}

impl FilterBank {
    pub fn new(imu_cutoff_hz: f64, ang_accel_cutoff_hz: f64) -> Self {
        Self {
            accel: LowPass3::new(imu_cutoff_hz),
            gyro: LowPass3::new(imu_cutoff_hz),
            ang_accel: LowPass3::new(ang_accel_cutoff_hz),
            prev_gyro_f: None,
        }
    }

    pub fn update(&mut self, frame: &SensorFrame, dt: f64) -> FilteredSignals {
        let accel_body = self.accel.update(&frame.accel, dt);
        let gyro = self.gyro.update(&frame.gyro, dt);
        let raw_ang = match self.prev_gyro_f {
            Some(prev) => (gyro - prev) / dt,
            None => Vector3::zeros(),
        };
        self.prev_gyro_f = Some(gyro);
        let ang_accel = self.ang_accel.update(&raw_ang, dt);
        FilteredSignals { accel_body, gyro, ang_accel }
    }
}

/// Per-rotor speed ratio rpm_meas / rpm_ref. Channels below the evaluation
/// floor report 1 (healthy).
pub fn motor_index(
    rpm_meas: &Vector4<f64>,
    rpm_ref: &Vector4<f64>,
    rpm_floor: f64,
) -> Vector4<f64> {
    Vector4::from_fn(|i, _| {
        if rpm_ref[i] >= rpm_floor {
            (rpm_meas[i] / rpm_ref[i]).max(0.0)
        } else {
            1.0
        }
    })
}

/// Reconstructs the per-rotor thrust loss from filtered inertial data.
///
/// The rotor speeds imply a thrust vector; the rigid-body force and torque
/// balances say how much thrust was actually delivered. The gap, pushed
/// back through the inverse mixer, is the per-rotor loss in Newtons.
pub fn thrust_loss_estimate(
    params: &VehicleParams,
    mixer: &Mixer,
    rpm_meas: &Vector4<f64>,
    att: &UnitQuaternion<f64>,
    vel: &Vector3<f64>,
    sig: &FilteredSignals,
) -> Vector4<f64> {
    let t_implied = Vector4::from_fn(|i, _| params.thrust_for_rpm(rpm_meas[i]));
    let m = mixer.matrix();
    let implied_total = t_implied.sum();
    let implied_torque = Vector3::new(
        m.row(1).transpose().dot(&t_implied),
        m.row(2).transpose().dot(&t_implied),
        m.row(3).transpose().dot(&t_implied),
    );

    let r = att.to_rotation_matrix();
    let z_b = r * Vector3::z();
    // Specific force already excludes gravity, so the residual is the
    // implied thrust minus measured force minus drag, all in world frame.
    let v_body = r.transpose() * vel;
    let drag = r * params.d.component_mul(&v_body);
    let force_residual = z_b * implied_total - r * (sig.accel_body * params.m) - drag;

    let iv = params.i_v;
    let w = sig.gyro;
    let i_w = Vector3::new(iv.x * w.x, iv.y * w.y, iv.z * w.z);
    let actual_torque = Vector3::new(
        iv.x * sig.ang_accel.x,
        iv.y * sig.ang_accel.y,
        iv.z * sig.ang_accel.z,
    ) + w.cross(&i_w)
        + Vector3::new(0.0, 0.0, params.k_d_psi * w.z);
    let torque_residual = implied_torque - actual_torque;

    mixer.thrusts(&crate::dynamics::Wrench {
        thrust: force_residual.norm(),
        torque: torque_residual,
    })
}

/// Propeller index: per-rotor thrust loss normalized by the thrust limit.
pub fn propeller_index(t_star: &Vector4<f64>, params: &VehicleParams) -> Vector4<f64> {
    t_star / params.t_bar
}

/// Sign pattern each rotor's failure imprints on the filtered world-frame
/// lateral accelerations and body angular accelerations.
///
/// Entry order per rotor: [s_ax, s_ay, s_alpha_x, s_alpha_y]; the condition
/// is `s * signal >= threshold`.
pub fn takeoff_sign_table(mixer: &Mixer) -> [[f64; 4]; 4] {
    let m = mixer.matrix();
    let mut table = [[0.0; 4]; 4];
    for (i, row) in table.iter_mut().enumerate() {
        let roll = m[(1, i)];
        let pitch = m[(2, i)];
        // Losing thrust on rotor i creates torque (-roll, -pitch); positive
        // roll torque tips the thrust axis toward -y, positive pitch toward
        // +x.
        row[0] = -pitch.signum();
        row[1] = roll.signum();
        row[2] = -roll.signum();
        row[3] = -pitch.signum();
    }
    table
}

/// Per-tick takeoff monitor decision for every rotor. `accel_world` is the
/// filtered world-frame acceleration (gravity restored).
pub fn takeoff_monitor(
    signs: &[[f64; 4]; 4],
    accel_world: &Vector3<f64>,
    ang_accel: &Vector3<f64>,
    gamma_q: &[f64; 4],
) -> [bool; 4] {
    let mut out = [false; 4];
    for (i, s) in signs.iter().enumerate() {
        let accel_hit =
            s[0] * accel_world.x >= gamma_q[0] && s[1] * accel_world.y >= gamma_q[1];
        let ang_hit = s[2] * ang_accel.x >= gamma_q[2] && s[3] * ang_accel.y >= gamma_q[3];
        out[i] = accel_hit && ang_hit;
    }
    out
}

/// Diagnostics produced every detector tick.
#[derive(Debug, Clone, Copy)]
pub struct FddTick {
    pub report: Option<FaultReport>,
    /// Per-rotor speed ratio.
    pub motor_ratio: Vector4<f64>,
    /// Per-rotor estimated thrust loss [N].
    pub t_star: Vector4<f64>,
    /// Per-rotor propeller index.
    pub p_index: Vector4<f64>,
}

/// Stateful composite detector.
pub struct Detector {
    pub config: FddConfig,
    signs: [[f64; 4]; 4],
    motor_count: [usize; 4],
    prop_count: [usize; 4],
    takeoff_count: [usize; 4],
    degradation_count: [usize; 4],
    latched: Option<FaultReport>,
    degraded: [bool; 4],
}

impl Detector {
    pub fn new(config: FddConfig, mixer: &Mixer) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            signs: takeoff_sign_table(mixer),
            motor_count: [0; 4],
            prop_count: [0; 4],
            takeoff_count: [0; 4],
            degradation_count: [0; 4],
            latched: None,
            degraded: [false; 4],
        })
    }

    pub fn report(&self) -> Option<FaultReport> {
        self.latched
    }

    /// Rotors flagged as partially degraded (warning only).
    pub fn degraded(&self) -> [bool; 4] {
        self.degraded
    }

    /// Runs one detection tick. `u_prev` is the command currently holding.
    #[allow(clippy::too_many_arguments)]
    pub fn tick(
        &mut self,
        time: f64,
        stage: Stage,
        params: &VehicleParams,
        mixer: &Mixer,
        frame: &SensorFrame,
        sig: &FilteredSignals,
        u_prev: &Vector4<f64>,
    ) -> FddTick {
        let rpm_ref = Vector4::from_fn(|i, _| {
            params.rpm_for_thrust(u_prev[i].clamp(0.0, params.t_bar))
        });
        let rpm_floor = self.config.rpm_floor_frac * params.hover_rpm();
        let motor_ratio = motor_index(&frame.rpm, &rpm_ref, rpm_floor);
        let t_star =
            thrust_loss_estimate(params, mixer, &frame.rpm, &frame.odom_att, &frame.odom_vel, sig);
        let p_index = propeller_index(&t_star, params);

        if self.latched.is_some() {
            return FddTick { report: self.latched, motor_ratio, t_star, p_index };
        }

        let r = frame.odom_att.to_rotation_matrix();
        let accel_world = r * sig.accel_body + Vector3::new(0.0, 0.0, -params.g);
        let takeoff_hits =
            takeoff_monitor(&self.signs, &accel_world, &sig.ang_accel, &self.config.gamma_q);

        for i in 0..4 {
            let motor_hit = motor_ratio[i] <= self.config.gamma_m;
            bump(&mut self.motor_count[i], motor_hit);

            match stage {
                Stage::Takeoff => {
                    bump(&mut self.takeoff_count[i], takeoff_hits[i]);
                    self.prop_count[i] = 0;
                    self.degradation_count[i] = 0;
                }
                Stage::Tracking => {
                    bump(&mut self.prop_count[i], p_index[i] >= self.config.gamma_p);
                    bump(
                        &mut self.degradation_count[i],
                        p_index[i] >= self.config.degradation_floor
                            && p_index[i] < self.config.gamma_p,
                    );
                    self.takeoff_count[i] = 0;
                }
            }
            if self.degradation_count[i] >= self.config.debounce {
                self.degraded[i] = true;
            }
        }

        // Priority on simultaneous confirmation: motor, then takeoff, then
        // propeller; ties break toward the lower rotor index.
        let n = self.config.debounce;
        let candidate = (0..4)
            .find(|&i| self.motor_count[i] >= n)
            .map(|i| (i, FaultClass::Motor))
            .or_else(|| {
                (0..4).find(|&i| self.takeoff_count[i] >= n).map(|i| (i, FaultClass::Takeoff))
            })
            .or_else(|| {
                (0..4).find(|&i| self.prop_count[i] >= n).map(|i| (i, FaultClass::Propeller))
            });
        if let Some((rotor, class)) = candidate {
            self.latched = Some(FaultReport { rotor, class, time });
        }
        FddTick { report: self.latched, motor_ratio, t_star, p_index }
    }
}

fn bump(counter: &mut usize, hit: bool) {
    if hit {
        *counter += 1;
    } else {
        *counter = 0;
    }
}

/// Rotation matrix helper for tests and callers that need the world-frame
/// acceleration used by the takeoff monitor.
pub fn world_accel(
    att: &UnitQuaternion<f64>,
    accel_body: &Vector3<f64>,
    g: f64,
) -> Vector3<f64> {
    let r: Matrix3<f64> = *att.to_rotation_matrix().matrix();
    r * accel_body + Vector3::new(0.0, 0.0, -g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::VehicleState;
    use crate::sim::{FailureEvent, FailureMode, FailureSchedule, NoiseProfile, Simulator};
    use approx::assert_relative_eq;

    fn setup() -> (VehicleParams, Mixer) {
        let p = VehicleParams::default();
        let m = Mixer::new(&p).unwrap();
        (p, m)
    }

    fn hover_frame(params: &VehicleParams) -> SensorFrame {
        SensorFrame {
            stamp: 0.0,
            accel: Vector3::new(0.0, 0.0, params.g),
            gyro: Vector3::zeros(),
            rpm: Vector4::repeat(params.hover_rpm()),
            odom_pos: Vector3::new(0.0, 0.0, 1.0),
            odom_vel: Vector3::zeros(),
            odom_att: UnitQuaternion::identity(),
        }
    }

    #[test]
    fn motor_index_ratio_and_floor() {
        let meas = Vector4::new(100.0, 5000.0, 0.0, 900.0);
        let refs = Vector4::new(10_000.0, 10_000.0, 10_000.0, 500.0);
        let idx = motor_index(&meas, &refs, 1000.0);
        assert_relative_eq!(idx[0], 0.01);
        assert_relative_eq!(idx[1], 0.5);
        assert_relative_eq!(idx[2], 0.0);
        // Below the floor the channel reads healthy.
        assert_relative_eq!(idx[3], 1.0);
    }

    #[test]
    fn observer_zero_at_consistent_hover() {
        let (params, mixer) = setup();
        let frame = hover_frame(&params);
        let sig = FilteredSignals {
            accel_body: frame.accel,
            gyro: Vector3::zeros(),
            ang_accel: Vector3::zeros(),
        };
        let t_star =
            thrust_loss_estimate(&params, &mixer, &frame.rpm, &frame.odom_att, &frame.odom_vel, &sig);
        assert!(t_star.amax() < 1e-6 * params.t_bar, "t_star {t_star:?}");
    }

    #[test]
    fn observer_recovers_single_rotor_loss() {
        // Rotor 0 commanded to saturation but delivering nothing, the rest
        // at hover. The measured inertial response reflects the delivered
        // wrench; telemetry reflects the commanded speeds.
        let (params, mixer) = setup();
        let hover = params.hover_thrust_per_rotor();
        let delivered = Vector4::new(0.0, hover, hover, hover);
        let implied = Vector4::new(params.t_bar, hover, hover, hover);
        let att = UnitQuaternion::identity();

        let w = mixer.wrench(&delivered).unwrap();
        let accel_body = Vector3::new(0.0, 0.0, w.thrust / params.m);
        let ang_accel = w.torque.component_div(&params.i_v);
        let sig = FilteredSignals { accel_body, gyro: Vector3::zeros(), ang_accel };
        let rpm = Vector4::from_fn(|i, _| params.rpm_for_thrust(implied[i]));

        let t_star =
            thrust_loss_estimate(&params, &mixer, &rpm, &att, &Vector3::zeros(), &sig);
        assert_relative_eq!(t_star[0], params.t_bar, epsilon = 1e-9);
        for i in 1..4 {
            assert!(t_star[i].abs() < 1e-9);
        }
        let p = propeller_index(&t_star, &params);
        assert!(p[0] >= 0.999);
    }

    #[test]
    fn takeoff_signs_match_rotor_zero_pattern() {
        let (_, mixer) = setup();
        let signs = takeoff_sign_table(&mixer);
        assert_eq!(signs[0], [1.0, -1.0, 1.0, 1.0]);
        // Opposite rotor shows the mirrored pattern.
        assert_eq!(signs[1], [-1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn takeoff_monitor_needs_both_pairs() {
        let (_, mixer) = setup();
        let signs = takeoff_sign_table(&mixer);
        let gamma = [0.005, 0.005, 0.2, 0.2];
        // Rotor 0 pattern: +x accel, -y accel, +x and +y angular accel.
        let hits = takeoff_monitor(
            &signs,
            &Vector3::new(0.05, -0.05, -0.4),
            &Vector3::new(2.0, 2.0, 0.1),
            &gamma,
        );
        assert_eq!(hits, [true, false, false, false]);
        // Pure vertical acceleration with quiet lateral channels flags
        // nothing.
        let none = takeoff_monitor(
            &signs,
            &Vector3::new(0.001, -0.002, 1.5),
            &Vector3::new(2.0, 2.0, 0.0),
            &gamma,
        );
        assert_eq!(none, [false; 4]);
        // Angular pattern alone is not enough.
        let none2 = takeoff_monitor(
            &signs,
            &Vector3::new(0.0, 0.0, 0.0),
            &Vector3::new(2.0, 2.0, 0.0),
            &gamma,
        );
        assert_eq!(none2, [false; 4]);
    }

    #[test]
    fn detector_latches_motor_stop_quickly_under_noise() {
        let (params, mixer) = setup();
        let schedule = FailureSchedule::single(FailureEvent {
            time: 1.0,
            rotor: 2,
            mode: FailureMode::MotorStop,
            severity: 1.0,
        });
        let st = VehicleState::hover_at(Vector3::new(0.0, 0.0, 1.0), &params);
        let mut sim =
            Simulator::new(params.clone(), st, schedule, NoiseProfile::default(), 7).unwrap();
        let mut det = Detector::new(FddConfig::default(), &mixer).unwrap();
        let mut filters = FilterBank::default();
        let u = Vector4::repeat(params.hover_thrust_per_rotor());
        let dt = 0.005;
        let mut detected_at = None;
        for k in 0..400 {
            let t = k as f64 * dt;
            let frame = sim.sense();
            let sig = filters.update(&frame, dt);
            let tick = det.tick(t, Stage::Tracking, &params, &mixer, &frame, &sig, &u);
            if let Some(rep) = tick.report {
                assert!(t >= 1.0, "false alarm at t={t}");
                assert_eq!(rep.rotor, 2);
                assert_eq!(rep.class, FaultClass::Motor);
                detected_at = Some(t);
                break;
            }
            sim.advance(&u, 0.0025).unwrap();
            sim.advance(&u, 0.0025).unwrap();
        }
        let t_det = detected_at.expect("motor stop must be detected");
        assert!(t_det - 1.0 <= 0.05, "latency {} too high", t_det - 1.0);
    }

    #[test]
    fn detector_quiet_during_healthy_noisy_hover() {
        let (params, mixer) = setup();
        let st = VehicleState::hover_at(Vector3::new(0.0, 0.0, 1.0), &params);
        let mut sim = Simulator::new(
            params.clone(),
            st,
            FailureSchedule::none(),
            NoiseProfile::default(),
            11,
        )
        .unwrap();
        let mut det = Detector::new(FddConfig::default(), &mixer).unwrap();
        let mut filters = FilterBank::default();
        let u = Vector4::repeat(params.hover_thrust_per_rotor());
        for k in 0..2000 {
            let t = k as f64 * 0.005;
            let frame = sim.sense();
            let sig = filters.update(&frame, 0.005);
            let tick = det.tick(t, Stage::Tracking, &params, &mixer, &frame, &sig, &u);
            assert!(tick.report.is_none(), "false alarm at t={t}: {:?}", tick.report);
            sim.advance(&u, 0.0025).unwrap();
            sim.advance(&u, 0.0025).unwrap();
        }
    }

    #[test]
    fn degradation_warns_without_latching() {
        let (params, mixer) = setup();
        let mut det = Detector::new(FddConfig::default(), &mixer).unwrap();
        // Synthetic mid-band loss on rotor 1: speeds imply half the thrust
        // limit more than the hover wrench the vehicle actually shows.
        let hover = params.hover_thrust_per_rotor();
        let implied = Vector4::new(hover, hover + 0.5 * params.t_bar, hover, hover);
        let mut frame = hover_frame(&params);
        frame.rpm = Vector4::from_fn(|i, _| params.rpm_for_thrust(implied[i]));
        // Inertial response corresponds to an exact hover.
        let sig = FilteredSignals {
            accel_body: Vector3::new(0.0, 0.0, params.g),
            gyro: Vector3::zeros(),
            ang_accel: Vector3::zeros(),
        };
        let u = Vector4::repeat(hover);
        for k in 0..5 {
            let tick =
                det.tick(k as f64 * 0.005, Stage::Tracking, &params, &mixer, &frame, &sig, &u);
            assert!(tick.report.is_none());
        }
        assert!(det.degraded()[1]);
        assert!(!det.degraded()[0]);
    }

    #[test]
    fn config_validation() {
        let mut c = FddConfig::default();
        c.gamma_m = 0.0;
        assert!(c.validate().is_err());
        let mut c = FddConfig::default();
        c.debounce = 0;
        assert!(c.validate().is_err());
    }
}
