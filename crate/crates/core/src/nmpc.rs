//! Fault-tolerant nonlinear model-predictive control.
//!
//! The controller tracks position references through the full rigid-body
//! model with rotor lag, solving a condensed Gauss-Newton SQP over a
//! receding horizon at every control tick. Rotor thrust commands are the
//! decision variables, box-bounded between zero and the thrust limit.
//!
//! Attitude error is tilt-prioritized: the error quaternion is split into
//! a rotation about the body thrust axis (twist) and the remaining tilt
//! (swing). After a confirmed rotor failure the twist weight drops to
//! zero, the yaw-rate reference follows the measured spin, and the failed
//! rotor is pinned to zero both in the prediction model and in the bounds.
//! The vehicle then settles into a spinning three-rotor equilibrium
//! instead of fighting an unwinnable yaw battle.

use crate::dynamics::{rk4_step, rk4_step_with_jacobian, Mixer, StateVector};
use crate::error::{Error, Result};
use crate::params::VehicleParams;
use nalgebra::{
    DMatrix, DVector, Matrix3, Quaternion, SMatrix, SVector, UnitQuaternion, Vector3, Vector4,
};
use serde::{Deserialize, Serialize};

/// Residual rows per stage: 17 tracking terms plus 2 one-sided roll/pitch
/// rate penalties.
const STAGE_ROWS: usize = 19;

/// Body-rate ceiling of the prediction model [rad/s].
///
/// The gyroscopic coupling is quadratic in the body rate, and at the coarse
/// stage step the explicit integrator diverges once a candidate command
/// sequence spins the predicted vehicle far past anything the closed loop
/// reaches. Saturating the predicted rates keeps every rollout finite so the
/// solver stays live through violent recovery transients. The ceiling sits
/// well above the real flight envelope, so predictions in reachable regimes
/// are untouched. Sensitivities deliberately pass through the saturation:
/// zeroing the saturated rows would blind the solver to exactly the commands
/// that pull a wild prediction back, and the line search on the true
/// objective already absorbs the resulting model mismatch.
const PREDICT_RATE_CEILING: f64 = 60.0;

/// Command-sensitivity magnitude at which the condensed Hessian stops
/// accumulating further stages.
///
/// Single shooting chains the per-stage transition Jacobians, so near an
/// unstable regime (large tilt, fast spin) the sensitivities grow
/// exponentially along the horizon. Left unchecked they square into a
/// Hessian with entries far beyond f64 conditioning, the Newton step
/// underflows and the solver stalls exactly when a recovery demands strong
/// commands. Beyond this magnitude the linearization carries no usable
/// information, so later stages are dropped from that solve; the receding
/// horizon restores them as the transient decays. Healthy-flight
/// sensitivities stay orders of magnitude below the cutoff.
const SENSITIVITY_CUTOFF: f64 = 1e4;

/// Saturates the body-rate block of a predicted state at
/// [`PREDICT_RATE_CEILING`].
fn clamp_predicted_rates(z: &mut StateVector) {
    for k in 0..3 {
        let w = z[10 + k];
        if w.abs() > PREDICT_RATE_CEILING {
            z[10 + k] = w.signum() * PREDICT_RATE_CEILING;
        }
    }
}

/// Tilt/twist split of an attitude error.
#[derive(Debug, Clone, Copy)]
pub struct AttitudeError {
    /// Cost components: [tilt_x, tilt_y, tilt_sq, twist_z].
    pub components: Vector4<f64>,
    /// Tilt part; its z vector component is zero.
    pub swing: UnitQuaternion<f64>,
    /// Rotation about the body thrust axis.
    pub twist: UnitQuaternion<f64>,
    /// Set when the twist is undefined (180 degree tilt).
    pub degenerate: bool,
}

/// Splits the error between an attitude and its reference into twist about
/// the body thrust axis and the remaining tilt.
///
/// The error quaternion is e = q^-1 * q_ref with e = swing * twist, so
/// applying the swing alone aligns the thrust axes. Spinning the vehicle
/// about its thrust axis rotates the (tilt_x, tilt_y) pair in-plane and
/// leaves tilt_sq unchanged; rotating the reference heading leaves all
/// three tilt components unchanged. Equal weights on tilt_x and tilt_y
/// therefore make the tilt cost spin-invariant.
pub fn attitude_error(
    att: &UnitQuaternion<f64>,
    att_ref: &UnitQuaternion<f64>,
) -> AttitudeError {
    let mut e = att.inverse() * att_ref;
    // Canonical sign: the double cover would otherwise flip the error.
    if e.w < 0.0 {
        e = UnitQuaternion::new_unchecked(-e.into_inner());
    }
    let (w, x, y, z) = (e.w, e.i, e.j, e.k);
    let n_sq = w * w + z * z;
    if n_sq < 1e-24 {
        // Pure 180 degree tilt: the twist is undefined, the swing is the
        // error itself.
        return AttitudeError {
            components: Vector4::new(x, y, x * x + y * y, 0.0),
            swing: e,
            twist: UnitQuaternion::identity(),
            degenerate: true,
        };
    }
    let n = n_sq.sqrt();
    let twist = UnitQuaternion::new_unchecked(Quaternion::new(w / n, 0.0, 0.0, z / n));
    let swing = UnitQuaternion::new_unchecked(Quaternion::new(
        n,
        (w * x - y * z) / n,
        (w * y + x * z) / n,
        0.0,
    ));
    AttitudeError {
        components: Vector4::new(swing.i, swing.j, x * x + y * y, z / n),
        swing,
        twist,
        degenerate: false,
    }
}

/// Attitude-error cost components from a raw (possibly unnormalized)
/// quaternion block, used for finite-difference Jacobians.
fn att_err_components(q_raw: &Vector4<f64>, att_ref: &UnitQuaternion<f64>) -> Vector4<f64> {
    let q = UnitQuaternion::from_quaternion(Quaternion::new(
        q_raw[0], q_raw[1], q_raw[2], q_raw[3],
    ));
    attitude_error(&q, att_ref).components
}

/// Tilt of an attitude: angle between the body thrust axis and world up
/// [rad].
pub fn tilt_angle(att: &UnitQuaternion<f64>) -> f64 {
    let z_b = att * Vector3::z();
    z_b.z.clamp(-1.0, 1.0).acos()
}

/// One sample of the position reference consumed per horizon stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageRef {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub acc: Vector3<f64>,
}

impl StageRef {
    pub fn hold(pos: Vector3<f64>) -> Self {
        Self { pos, vel: Vector3::zeros(), acc: Vector3::zeros() }
    }
}

/// Horizon, weights and solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmpcConfig {
    /// Number of stages.
    pub horizon: usize,
    /// Stage duration [s].
    pub stage_dt: f64,
    /// Integrator substeps per stage.
    pub substeps: usize,
    /// Gauss-Newton iterations per control tick.
    pub sqp_iters: usize,
    /// Position error weights.
    pub q_pos: [f64; 3],
    /// Attitude error weights [tilt_x, tilt_y, tilt_sq, twist].
    pub q_att: [f64; 4],
    /// Velocity error weights.
    pub q_vel: [f64; 3],
    /// Body-rate error weights.
    pub q_rate: [f64; 3],
    /// Rotor thrust state error weights.
    pub q_thrust: [f64; 4],
    /// Absolute control penalty weights.
    pub r_u: [f64; 4],
    /// Soft roll/pitch rate bound [rad/s].
    pub rate_bound: f64,
    /// Weight of the one-sided rate penalty.
    pub rate_penalty: f64,
    /// Levenberg regularization added to the condensed Hessian diagonal.
    pub reg: f64,
    /// Projected-Newton iteration cap for the box QP.
    pub qp_iters: usize,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            stage_dt: 0.05,
            substeps: 2,
            sqp_iters: 3,
            q_pos: [100.0, 100.0, 600.0],
            q_att: [60.0, 60.0, 60.0, 60.0],
            q_vel: [5.0, 5.0, 5.0],
            q_rate: [5.0, 5.0, 5.0],
            q_thrust: [1.0, 1.0, 1.0, 1.0],
            r_u: [1.0, 1.0, 1.0, 1.0],
            rate_bound: 6.0,
            rate_penalty: 200.0,
            reg: 1e-8,
            qp_iters: 25,
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 || self.horizon > 200 {
            return Err(Error::Config(format!("nmpc.horizon: {} not in [2, 200]", self.horizon)));
        }
        if !(self.stage_dt > 0.0 && self.stage_dt <= 0.5) {
            return Err(Error::Config(format!(
                "nmpc.stage_dt: {} not in (0, 0.5]",
                self.stage_dt
            )));
        }
        if self.substeps == 0 || self.sqp_iters == 0 || self.qp_iters == 0 {
            return Err(Error::Config("nmpc: iteration counts must be >= 1".into()));
        }
        let nonneg = self
            .q_pos
            .iter()
            .chain(&self.q_att)
            .chain(&self.q_vel)
            .chain(&self.q_rate)
            .chain(&self.q_thrust)
            .chain(&self.r_u)
            .all(|w| *w >= 0.0 && w.is_finite());
        if !nonneg {
            return Err(Error::Config("nmpc: weights must be finite and >= 0".into()));
        }
        if !(self.rate_bound > 0.0) || self.rate_penalty < 0.0 {
            return Err(Error::Config("nmpc: rate bound must be > 0, penalty >= 0".into()));
        }
        if self.reg < 0.0 {
            return Err(Error::Config("nmpc: reg must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-solve diagnostics.
#[derive(Debug, Clone)]
pub struct SolverStats {
    /// Gauss-Newton iterations performed.
    pub iterations: usize,
    /// Total projected-Newton iterations across QP solves.
    pub qp_iterations: usize,
    /// Projected gradient infinity norm at the start of each iteration.
    pub kkt_trace: Vec<f64>,
    /// Last projected gradient infinity norm.
    pub kkt: f64,
    /// Weighted objective after the last accepted step.
    pub cost: f64,
    /// Set when the solver fell back to the previous command.
    pub degraded: bool,
    /// Wall-clock solve time [ms]. Excluded from deterministic logs.
    pub solve_ms: f64,
}

/// Internal per-stage reference after fault-aware expansion.
struct InternalRef {
    pos: Vector3<f64>,
    vel: Vector3<f64>,
    att: UnitQuaternion<f64>,
    rate: Vector3<f64>,
    thrust: Vector4<f64>,
}

/// Receding-horizon controller with warm start.
pub struct Nmpc {
    pub config: NmpcConfig,
    params: VehicleParams,
    mixer: Mixer,
    /// Flat decision vector, 4 thrust commands per stage.
    warm: DVector<f64>,
    prev_cmd: Vector4<f64>,
    last_fault: Option<usize>,
}

impl Nmpc {
    pub fn new(config: NmpcConfig, params: VehicleParams) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        let mixer = Mixer::new(&params)?;
        let hover = params.hover_thrust_per_rotor();
        let warm = DVector::from_element(4 * config.horizon, hover);
        Ok(Self {
            config,
            params,
            mixer,
            warm,
            prev_cmd: Vector4::repeat(hover),
            last_fault: None,
        })
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    /// Solves one control tick and returns the first-stage command.
    ///
    /// `refs` must hold horizon + 1 samples spaced `stage_dt` apart,
    /// starting at the current time. `fault` names a confirmed dead rotor.
    pub fn control(
        &mut self,
        x0: &StateVector,
        refs: &[StageRef],
        fault: Option<usize>,
    ) -> Result<(Vector4<f64>, SolverStats)> {
        let t_start = std::time::Instant::now();
        let n = self.config.horizon;
        if refs.len() != n + 1 {
            return Err(Error::InvalidInput(format!(
                "reference length {} does not match horizon + 1 = {}",
                refs.len(),
                n + 1
            )));
        }
        if let Some(r) = fault {
            if r > 3 {
                return Err(Error::InvalidInput(format!("fault rotor index {r} out of range")));
            }
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("non-finite controller state".into()));
        }

        // Fault reconfiguration: pin the failed rotor in the initial state,
        // the model and the warm start. Its box bound collapses to zero.
        let mut x0 = *x0;
        let mut eff = Vector4::repeat(1.0);
        if let Some(r) = fault {
            eff[r] = 0.0;
            x0[13 + r] = 0.0;
            if self.last_fault != fault {
                for i in 0..n {
                    self.warm[4 * i + r] = 0.0;
                }
            }
        }
        self.last_fault = fault;

        let upper = DVector::from_fn(4 * n, |j, _| {
            if Some(j % 4) == fault {
                0.0
            } else {
                self.params.t_bar
            }
        });
        let mut u = self.warm.clone();
        for j in 0..4 * n {
            u[j] = u[j].clamp(0.0, upper[j]);
        }

        let irefs = self.expand_refs(refs, fault, x0[12]);
        let w_sqrt = self.weight_sqrt(fault);
        let r_u = Vector4::from(self.config.r_u);

        let mut stats = SolverStats {
            iterations: 0,
            qp_iterations: 0,
            kkt_trace: Vec::with_capacity(self.config.sqp_iters),
            kkt: f64::NAN,
            cost: f64::NAN,
            degraded: false,
            solve_ms: 0.0,
        };

        let dbg = std::env::var_os("ROTORSAFE_NMPC_DEBUG").is_some();
        let mut states = match self.rollout(&x0, &u, &eff) {
            Some(s) => s,
            None => {
                if dbg {
                    eprintln!("nmpc-debug: warm rollout non-finite");
                }
                return Ok(self.fallback(stats, t_start));
            }
        };
        let mut cost = self.total_cost(&states, &u, &irefs, &w_sqrt, &r_u);
        if !cost.is_finite() {
            if dbg {
                eprintln!("nmpc-debug: warm cost non-finite");
            }
            return Ok(self.fallback(stats, t_start));
        }

        // A tumbling warm start traps the linearized subproblem in a basin
        // that trades the catch for raw lift: around a tumbling rollout the
        // attitude cost only sees phase shifts of the tumble, while the
        // altitude gradient stays clean, so the solve converges onto
        // symmetric full thrust. Under a latched fault a second candidate
        // therefore competes with the shifted tail: allocator thrusts that
        // null the measured body rates at reduced collective, the physically
        // right opening move of a catch. Whichever rollout is cheaper seeds
        // the solve; the iteration refines it from there.
        if let Some(r) = fault {
            if let Some((u_rk, states_rk, cost_rk)) =
                self.rate_kill_candidate(&x0, r, &upper, &eff, &irefs, &w_sqrt, &r_u)
            {
                if cost_rk < cost {
                    u = u_rk;
                    states = states_rk;
                    cost = cost_rk;
                }
            }
        }

        for it in 0..self.config.sqp_iters {
            let (h, g) = match self.build_condensed(&states, &u, &irefs, &w_sqrt, &r_u, &eff) {
                Some(hg) => hg,
                None => {
                    if dbg {
                        eprintln!("nmpc-debug: iter {it} condensed non-finite");
                    }
                    break;
                }
            };
            let kkt = projected_grad_norm(&g, &u, &upper);
            stats.kkt_trace.push(kkt);

            let (step, qp_used) = solve_box_qp(&h, &g, &u, &upper, self.config.qp_iters);
            stats.qp_iterations += qp_used;
            let slope = g.dot(&step);
            if !step.iter().all(|v| v.is_finite()) || slope >= 0.0 {
                if dbg {
                    eprintln!("nmpc-debug: iter {it} step finite={} slope={slope:.3e} kkt={kkt:.3e}",
                        step.iter().all(|v| v.is_finite()));
                }
                break;
            }

            // Backtracking on the true objective.
            let mut accepted = false;
            let mut alpha = 1.0;
            for _ in 0..4 {
                let mut u_try = &u + &step * alpha;
                for j in 0..4 * n {
                    u_try[j] = u_try[j].clamp(0.0, upper[j]);
                }
                if let Some(states_try) = self.rollout(&x0, &u_try, &eff) {
                    let cost_try = self.total_cost(&states_try, &u_try, &irefs, &w_sqrt, &r_u);
                    if cost_try.is_finite() && cost_try <= cost + 1e-4 * alpha * slope {
                        u = u_try;
                        states = states_try;
                        cost = cost_try;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            stats.iterations += 1;
            if !accepted {
                if dbg {
                    eprintln!("nmpc-debug: iter {it} line search exhausted, cost={cost:.3e} slope={slope:.3e}");
                }
                break;
            }
        }

        if stats.iterations == 0 {
            return Ok(self.fallback(stats, t_start));
        }
        self.warm = u.clone();
        let cmd = Vector4::new(u[0], u[1], u[2], u[3]);
        self.prev_cmd = cmd;
        stats.kkt = *stats.kkt_trace.last().unwrap_or(&f64::NAN);
        stats.cost = cost;
        stats.solve_ms = t_start.elapsed().as_secs_f64() * 1e3;
        Ok((cmd, stats))
    }

    fn fallback(&self, mut stats: SolverStats, t_start: std::time::Instant) -> (Vector4<f64>, SolverStats) {
        stats.degraded = true;
        stats.solve_ms = t_start.elapsed().as_secs_f64() * 1e3;
        (self.prev_cmd, stats)
    }

    /// Catch-opening candidate plan for a latched fault.
    ///
    /// Holds one command over the whole horizon: the three live rotors are
    /// allocated to the torque that brings the measured roll and pitch rates
    /// to rest in about a tenth of a second, at slightly reduced collective
    /// so the differential has headroom (yaw torque is left free, which is
    /// what the spin equilibrium wants anyway). The rollout from it does not
    /// tumble, which is what makes it a useful second basin for the solve.
    fn rate_kill_candidate(
        &self,
        x0: &StateVector,
        fault: usize,
        upper: &DVector<f64>,
        eff: &Vector4<f64>,
        irefs: &[InternalRef],
        w_sqrt: &SVector<f64, STAGE_ROWS>,
        r_u: &Vector4<f64>,
    ) -> Option<(DVector<f64>, Vec<StateVector>, f64)> {
        const STOP_TIME: f64 = 0.1;
        const COLLECTIVE_FRAC: f64 = 0.9;
        let p = &self.params;
        let target = Vector3::new(
            COLLECTIVE_FRAC * p.m * p.g,
            -p.i_v.x * x0[10] / STOP_TIME,
            -p.i_v.y * x0[11] / STOP_TIME,
        );
        let live: Vec<usize> = (0..4).filter(|&r| r != fault).collect();
        let mix = self.mixer.matrix();
        let m3 = Matrix3::from_fn(|row, col| mix[(row, live[col])]);
        let t_live = m3.try_inverse()? * target;
        let mut base = Vector4::zeros();
        for (k, &r) in live.iter().enumerate() {
            base[r] = t_live[k].clamp(0.0, p.t_bar);
        }
        let n = self.config.horizon;
        let mut u = DVector::<f64>::zeros(4 * n);
        for i in 0..n {
            for j in 0..4 {
                u[4 * i + j] = base[j].clamp(0.0, upper[4 * i + j]);
            }
        }
        let states = self.rollout(x0, &u, eff)?;
        let cost = self.total_cost(&states, &u, irefs, w_sqrt, r_u);
        cost.is_finite().then_some((u, states, cost))
    }

    /// Maps position references plus fault state to full tracking targets.
    fn expand_refs(&self, refs: &[StageRef], fault: Option<usize>, yaw_rate: f64) -> Vec<InternalRef> {
        let p = &self.params;
        let healthy = fault.map_or(4.0, |_| 3.0);
        refs.iter()
            .map(|s| {
                let mut f_des = p.m * s.acc
                    + Vector3::new(0.0, 0.0, p.m * p.g)
                    + p.d.component_mul(&s.vel);
                // Keep the thrust direction meaningfully upward.
                f_des.z = f_des.z.max(0.2 * p.m * p.g);
                let t_total = f_des.norm();
                let z_des = f_des / t_total;
                let att = UnitQuaternion::rotation_between(&Vector3::z(), &z_des)
                    .unwrap_or_else(UnitQuaternion::identity);
                let share = (t_total / healthy).min(p.t_bar);
                let thrust = Vector4::from_fn(|i, _| {
                    if Some(i) == fault {
                        0.0
                    } else {
                        share
                    }
                });
                let rate = match fault {
                    Some(_) => Vector3::new(0.0, 0.0, yaw_rate),
                    None => Vector3::zeros(),
                };
                InternalRef { pos: s.pos, vel: s.vel, att, rate, thrust }
            })
            .collect()
    }

    fn weight_sqrt(&self, fault: Option<usize>) -> SVector<f64, STAGE_ROWS> {
        let c = &self.config;
        let mut w = SVector::<f64, STAGE_ROWS>::zeros();
        for k in 0..3 {
            w[k] = c.q_pos[k].sqrt();
        }
        for k in 0..4 {
            w[3 + k] = c.q_att[k].sqrt();
        }
        for k in 0..3 {
            w[7 + k] = c.q_vel[k].sqrt();
        }
        for k in 0..3 {
            w[10 + k] = c.q_rate[k].sqrt();
        }
        if fault.is_some() {
            // Give up the heading degree of freedom: the surviving rotors
            // spin the body, so yaw error is meaningless and its weight
            // would fight the equilibrium.
            w[6] = 0.0;
        }
        for k in 0..4 {
            w[13 + k] = c.q_thrust[k].sqrt();
        }
        w[17] = c.rate_penalty.sqrt();
        w[18] = c.rate_penalty.sqrt();
        w
    }

    /// Simulates the horizon; `None` when the prediction diverges.
    fn rollout(&self, x0: &StateVector, u: &DVector<f64>, eff: &Vector4<f64>) -> Option<Vec<StateVector>> {
        let n = self.config.horizon;
        let mut states = Vec::with_capacity(n + 1);
        states.push(*x0);
        for i in 0..n {
            let ui = Vector4::new(u[4 * i], u[4 * i + 1], u[4 * i + 2], u[4 * i + 3]);
            let next = self.step_stage(states[i], &ui.component_mul(eff));
            if next.iter().any(|v| !v.is_finite()) {
                return None;
            }
            states.push(next);
        }
        Some(states)
    }

    fn step_stage(&self, z: StateVector, u_eff: &Vector4<f64>) -> StateVector {
        let h = self.config.stage_dt / self.config.substeps as f64;
        let mut out = z;
        for _ in 0..self.config.substeps {
            out = rk4_step(&self.params, &self.mixer, &out, u_eff, h);
            clamp_predicted_rates(&mut out);
        }
        out
    }

    /// Weighted residual and its state Jacobian at one stage.
    fn stage_error(
        &self,
        z: &StateVector,
        iref: &InternalRef,
        w_sqrt: &SVector<f64, STAGE_ROWS>,
    ) -> (SVector<f64, STAGE_ROWS>, SMatrix<f64, STAGE_ROWS, 17>) {
        let mut r = SVector::<f64, STAGE_ROWS>::zeros();
        let mut c = SMatrix::<f64, STAGE_ROWS, 17>::zeros();

        for k in 0..3 {
            r[k] = w_sqrt[k] * (z[k] - iref.pos[k]);
            c[(k, k)] = w_sqrt[k];
        }

        let q_raw = Vector4::new(z[3], z[4], z[5], z[6]);
        let e0 = att_err_components(&q_raw, &iref.att);
        for k in 0..4 {
            r[3 + k] = w_sqrt[3 + k] * e0[k];
        }
        let h = 1e-7;
        for j in 0..4 {
            let mut qp = q_raw;
            qp[j] += h;
            let ep = att_err_components(&qp, &iref.att);
            for k in 0..4 {
                c[(3 + k, 3 + j)] = w_sqrt[3 + k] * (ep[k] - e0[k]) / h;
            }
        }

        for k in 0..3 {
            r[7 + k] = w_sqrt[7 + k] * (z[7 + k] - iref.vel[k]);
            c[(7 + k, 7 + k)] = w_sqrt[7 + k];
            r[10 + k] = w_sqrt[10 + k] * (z[10 + k] - iref.rate[k]);
            c[(10 + k, 10 + k)] = w_sqrt[10 + k];
        }
        for k in 0..4 {
            r[13 + k] = w_sqrt[13 + k] * (z[13 + k] - iref.thrust[k]);
            c[(13 + k, 13 + k)] = w_sqrt[13 + k];
        }

        // One-sided roll/pitch rate penalties.
        for (row, k) in [(17usize, 0usize), (18, 1)] {
            let wk = z[10 + k];
            let excess = wk.abs() - self.config.rate_bound;
            if excess > 0.0 {
                r[row] = w_sqrt[row] * excess;
                c[(row, 10 + k)] = w_sqrt[row] * wk.signum();
            }
        }
        (r, c)
    }

    fn total_cost(
        &self,
        states: &[StateVector],
        u: &DVector<f64>,
        irefs: &[InternalRef],
        w_sqrt: &SVector<f64, STAGE_ROWS>,
        r_u: &Vector4<f64>,
    ) -> f64 {
        let mut cost = 0.0;
        for (z, iref) in states.iter().zip(irefs.iter()) {
            let (r, _) = self.stage_error(z, iref, w_sqrt);
            cost += 0.5 * r.norm_squared();
        }
        for i in 0..self.config.horizon {
            for j in 0..4 {
                cost += 0.5 * r_u[j] * u[4 * i + j] * u[4 * i + j];
            }
        }
        cost
    }

    /// Builds the condensed normal equations H, g over the flat command
    /// vector by forward sensitivity propagation.
    fn build_condensed(
        &self,
        states: &[StateVector],
        u: &DVector<f64>,
        irefs: &[InternalRef],
        w_sqrt: &SVector<f64, STAGE_ROWS>,
        r_u: &Vector4<f64>,
        eff: &Vector4<f64>,
    ) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let n = self.config.horizon;
        let m = 4 * n;
        let sub_dt = self.config.stage_dt / self.config.substeps as f64;
        let mut h = DMatrix::<f64>::zeros(m, m);
        let mut g = DVector::<f64>::zeros(m);

        // Sensitivity of the current stage state w.r.t. all commands. Only
        // the columns of already-visited stages are nonzero, so every
        // product below is restricted to that leading block.
        let mut s = DMatrix::<f64>::zeros(17, m);
        let mut s_next = DMatrix::<f64>::zeros(17, m);
        let mut g_rows = DMatrix::<f64>::zeros(STAGE_ROWS, m);

        for i in 0..n {
            let ui = Vector4::new(u[4 * i], u[4 * i + 1], u[4 * i + 2], u[4 * i + 3]);
            let u_eff = ui.component_mul(eff);

            // Chain the per-substep transition Jacobians across the stage.
            let mut a = SMatrix::<f64, 17, 17>::identity();
            let mut b = SMatrix::<f64, 17, 4>::zeros();
            let mut zz = states[i];
            for _ in 0..self.config.substeps {
                let (mut zn, a_sub, b_sub) = rk4_step_with_jacobian(
                    &self.params,
                    &self.mixer,
                    &zz,
                    &u_eff,
                    sub_dt,
                );
                clamp_predicted_rates(&mut zn);
                a = a_sub * a;
                b = a_sub * b + b_sub;
                zz = zn;
            }
            // The rollout applies the rotor-efficiency mask to the raw
            // command, so the command sensitivity carries the same factors.
            for j in 0..4 {
                let col = b.column(j) * eff[j];
                b.set_column(j, &col);
            }
            if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
                return None;
            }

            // S_{i+1} = A S_i + B E_i.
            let live = 4 * i;
            if live > 0 {
                s_next
                    .view_mut((0, 0), (17, live))
                    .gemm(1.0, &a, &s.view((0, 0), (17, live)), 0.0);
            }
            s_next.view_mut((0, live), (17, 4)).copy_from(&b);
            std::mem::swap(&mut s, &mut s_next);
            let live = live + 4;

            // Drop the remaining stages once the chained sensitivities blow
            // past what the normal equations can condition.
            if s.view((0, 0), (17, live)).amax() > SENSITIVITY_CUTOFF {
                break;
            }

            // Stage i + 1 residual rows.
            let (r, c) = self.stage_error(&states[i + 1], &irefs[i + 1], w_sqrt);
            g_rows
                .view_mut((0, 0), (STAGE_ROWS, live))
                .gemm(1.0, &c, &s.view((0, 0), (17, live)), 0.0);
            let g_live = g_rows.view((0, 0), (STAGE_ROWS, live));
            h.view_mut((0, 0), (live, live)).gemm_tr(1.0, &g_live, &g_live, 1.0);
            let r_dyn = DVector::from_row_slice(r.as_slice());
            g.rows_mut(0, live).gemv_tr(1.0, &g_live, &r_dyn, 1.0);
        }

        // Absolute control penalty and regularization.
        for i in 0..n {
            for j in 0..4 {
                let idx = 4 * i + j;
                h[(idx, idx)] += r_u[j] + self.config.reg;
                g[idx] += r_u[j] * u[idx];
            }
        }
        Some((h, g))
    }
}

/// Infinity norm of the gradient projected onto the feasible box.
fn projected_grad_norm(g: &DVector<f64>, u: &DVector<f64>, upper: &DVector<f64>) -> f64 {
    let eps = 1e-12;
    let mut norm: f64 = 0.0;
    for j in 0..g.len() {
        let pg = if u[j] <= eps {
            g[j].min(0.0)
        } else if u[j] >= upper[j] - eps {
            g[j].max(0.0)
        } else {
            g[j]
        };
        norm = norm.max(pg.abs());
    }
    norm
}

/// Projected-Newton solve of min 0.5 d'Hd + g'd subject to box bounds on
/// u + d. Returns the step and the iterations used.
fn solve_box_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    u: &DVector<f64>,
    upper: &DVector<f64>,
    max_iters: usize,
) -> (DVector<f64>, usize) {
    let m = g.len();
    let lo = DVector::from_fn(m, |j, _| -u[j]);
    let hi = DVector::from_fn(m, |j, _| upper[j] - u[j]);
    let mut d = DVector::<f64>::zeros(m);
    // The at-bound band must scale with the box: a coordinate a hair inside
    // its bound has essentially no slack, and crediting it with a full
    // Newton move stalls the line search on descent it cannot deliver.
    let band = DVector::from_fn(m, |j, _| 1e-12 + 1e-4 * (upper[j] - 0.0).max(0.0));
    let q = |d: &DVector<f64>| 0.5 * (h * d).dot(d) + g.dot(d);
    let mut used = 0;

    for _ in 0..max_iters {
        used += 1;
        let grad = h * &d + g;
        let mut free: Vec<usize> = Vec::with_capacity(m);
        let mut pg = DVector::<f64>::zeros(m);
        for j in 0..m {
            let at_lo = d[j] <= lo[j] + band[j];
            let at_hi = d[j] >= hi[j] - band[j];
            pg[j] = if at_lo {
                grad[j].min(0.0)
            } else if at_hi {
                grad[j].max(0.0)
            } else {
                grad[j]
            };
            let bound_active = (at_lo && grad[j] > 0.0) || (at_hi && grad[j] < 0.0);
            if !bound_active {
                free.push(j);
            }
        }
        if pg.amax() < 1e-10 || free.is_empty() {
            break;
        }

        let nf = free.len();
        let mut h_ff = DMatrix::<f64>::zeros(nf, nf);
        for (a, &ja) in free.iter().enumerate() {
            for (b, &jb) in free.iter().enumerate() {
                h_ff[(a, b)] = h[(ja, jb)];
            }
        }
        let rhs = DVector::from_fn(nf, |a, _| -grad[free[a]]);
        let mut step_f = None;
        let mut boost = 0.0;
        for _ in 0..3 {
            let mut h_try = h_ff.clone();
            if boost > 0.0 {
                for a in 0..nf {
                    h_try[(a, a)] += boost;
                }
            }
            if let Some(chol) = h_try.cholesky() {
                step_f = Some(chol.solve(&rhs));
                break;
            }
            boost = if boost == 0.0 { 1e-8 } else { boost * 100.0 };
        }
        let step_f = match step_f {
            Some(s) => s,
            None => break,
        };

        let mut dir = DVector::<f64>::zeros(m);
        for (a, &ja) in free.iter().enumerate() {
            dir[ja] = step_f[a];
        }

        let q0 = q(&d);
        let mut advanced = false;
        let mut alpha = 1.0;
        for _ in 0..10 {
            let mut cand = &d + &dir * alpha;
            for j in 0..m {
                cand[j] = cand[j].clamp(lo[j], hi[j]);
            }
            if q(&cand) < q0 - 1e-14 {
                d = cand;
                advanced = true;
                break;
            }
            alpha *= 0.5;
        }
        if !advanced {
            // The coupled Newton direction can be pinned by the box: free
            // coordinates sitting at a bound only follow it after clamping,
            // which can mutilate a coordinated move into ascent. The
            // projected gradient always descends for a small enough step, so
            // rescue the iteration with a Cauchy step along it.
            let curv = (h * &pg).dot(&pg);
            let mut alpha = if curv > 0.0 {
                pg.dot(&pg) / curv
            } else {
                1.0 / h.diagonal().amax().max(1.0)
            };
            for _ in 0..20 {
                let mut cand = &d - &pg * alpha;
                for j in 0..m {
                    cand[j] = cand[j].clamp(lo[j], hi[j]);
                }
                if q(&cand) < q0 - 1e-14 {
                    d = cand;
                    advanced = true;
                    break;
                }
                alpha *= 0.5;
            }
        }
        if !advanced {
            break;
        }
    }
    (d, used)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{yaw_equilibrium_rate, VehicleState};
    use crate::sim::{FailureSchedule, NoiseProfile, Simulator};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_quat(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if q.norm() < 1e-3 {
            UnitQuaternion::identity()
        } else {
            UnitQuaternion::from_quaternion(q)
        }
    }

    #[test]
    fn decomposition_round_trip_and_pure_tilt() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..2000 {
            let q = random_unit_quat(&mut rng);
            let q_ref = random_unit_quat(&mut rng);
            let dec = attitude_error(&q, &q_ref);
            let mut e = q.inverse() * q_ref;
            if e.w < 0.0 {
                e = UnitQuaternion::new_unchecked(-e.into_inner());
            }
            let rebuilt = dec.swing * dec.twist;
            assert!(
                (rebuilt.into_inner() - e.into_inner()).norm() < 1e-12,
                "round trip failed"
            );
            assert!(dec.swing.k.abs() < 1e-12, "swing has twist residue");
            assert!(dec.twist.i.abs() < 1e-15 && dec.twist.j.abs() < 1e-15);
            assert!(dec.components.iter().all(|v| v.is_finite()));
            // Third component is the squared norm of the first two.
            let pair = dec.components[0] * dec.components[0]
                + dec.components[1] * dec.components[1];
            assert_relative_eq!(pair, dec.components[2], epsilon = 1e-12);
        }
    }

    #[test]
    fn reference_twist_leaves_tilt_components_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let q = random_unit_quat(&mut rng);
            let q_ref = random_unit_quat(&mut rng);
            let theta = rng.random_range(-3.0..3.0);
            let spin = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta);
            let base = attitude_error(&q, &q_ref).components;
            let spun = attitude_error(&q, &(q_ref * spin)).components;
            for k in 0..3 {
                assert!(
                    (base[k] - spun[k]).abs() < 1e-12,
                    "tilt component {k} moved: {} vs {}",
                    base[k],
                    spun[k]
                );
            }
        }
    }

    #[test]
    fn body_spin_preserves_tilt_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let q = random_unit_quat(&mut rng);
            let q_ref = random_unit_quat(&mut rng);
            let theta = rng.random_range(-3.0..3.0);
            let spin = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta);
            let base = attitude_error(&q, &q_ref).components;
            let spun = attitude_error(&(q * spin), &q_ref).components;
            let n_base = base[0] * base[0] + base[1] * base[1];
            let n_spun = spun[0] * spun[0] + spun[1] * spun[1];
            assert!((n_base - n_spun).abs() < 1e-12);
            assert!((base[2] - spun[2]).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_attitude_is_tilt_only() {
        let params = VehicleParams::default();
        let nmpc = Nmpc::new(NmpcConfig::default(), params).unwrap();
        let refs = vec![
            StageRef {
                pos: Vector3::zeros(),
                vel: Vector3::new(1.0, -0.5, 0.2),
                acc: Vector3::new(2.0, 1.0, -0.5),
            };
            nmpc.config.horizon + 1
        ];
        let irefs = nmpc.expand_refs(&refs, None, 0.0);
        for iref in &irefs {
            assert!(iref.att.k.abs() < 1e-12, "reference attitude has yaw");
            assert!((iref.att * Vector3::z()).z > 0.5);
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = NmpcConfig::default();
        c.horizon = 1;
        assert!(c.validate().is_err());
        let mut c = NmpcConfig::default();
        c.q_pos[0] = -1.0;
        assert!(c.validate().is_err());
        let mut c = NmpcConfig::default();
        c.rate_bound = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn box_qp_solves_clamped_quadratic() {
        // True objective (v0 - 2)^2 + (v1 + 1)^2 linearized at u: the
        // unconstrained minimum sits at (2, -1) and the box clamps the
        // second coordinate to zero.
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let g = DVector::from_row_slice(&[-3.0, 2.0]);
        let u = DVector::from_row_slice(&[0.5, 0.0]);
        let upper = DVector::from_row_slice(&[8.0, 8.0]);
        let (d, _) = solve_box_qp(&h, &g, &u, &upper, 25);
        assert_relative_eq!(u[0] + d[0], 2.0, epsilon = 1e-9);
        assert_relative_eq!(u[1] + d[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kkt_decreases_across_iterations() {
        let params = VehicleParams::default();
        let mut nmpc = Nmpc::new(NmpcConfig::default(), params.clone()).unwrap();
        let x0 = VehicleState::hover_at(Vector3::new(0.3, -0.2, 0.8), &params).pack();
        let refs = vec![StageRef::hold(Vector3::new(0.0, 0.0, 1.0)); 21];
        let (_, stats) = nmpc.control(&x0, &refs, None).unwrap();
        assert_eq!(stats.kkt_trace.len(), 3, "expected one KKT sample per iteration");
        for w in stats.kkt_trace.windows(2) {
            assert!(
                w[1] < w[0] * (1.0 + 1e-9),
                "KKT did not decrease: {:?}",
                stats.kkt_trace
            );
        }
        assert!(stats.kkt_trace[2] < 0.1 * stats.kkt_trace[0]);
    }

    #[test]
    fn hover_regulation_closed_loop() {
        let params = VehicleParams::default();
        let mut nmpc = Nmpc::new(NmpcConfig::default(), params.clone()).unwrap();
        let start = VehicleState::hover_at(Vector3::new(0.2, -0.1, 0.85), &params);
        let target = Vector3::new(0.0, 0.0, 1.0);
        let mut sim = Simulator::new(
            params.clone(),
            start,
            FailureSchedule::none(),
            NoiseProfile::zero(),
            1,
        )
        .unwrap();
        let refs = vec![StageRef::hold(target); 21];
        for _ in 0..600 {
            let x0 = *sim.packed_state();
            let (cmd, stats) = nmpc.control(&x0, &refs, None).unwrap();
            assert!(!stats.degraded);
            sim.advance(&cmd, 0.0025).unwrap();
            sim.advance(&cmd, 0.0025).unwrap();
        }
        let err = (sim.state().pos - target).norm();
        assert!(err < 0.02, "hover regulation error {err}");
        let tilt = tilt_angle(&sim.state().att);
        assert!(tilt < 0.05, "vehicle should end level, tilt {tilt}");
    }

    #[test]
    fn three_rotor_catch_reaches_spin_equilibrium() {
        let params = VehicleParams::default();
        let mut nmpc = Nmpc::new(NmpcConfig::default(), params.clone()).unwrap();
        let target = Vector3::new(0.0, 0.0, 1.5);
        let start = VehicleState::hover_at(target, &params);
        let mut sim = Simulator::new(
            params.clone(),
            start,
            FailureSchedule::single(crate::sim::FailureEvent {
                time: 0.5,
                rotor: 0,
                mode: crate::sim::FailureMode::MotorStop,
                severity: 1.0,
            }),
            NoiseProfile::zero(),
            3,
        )
        .unwrap();
        let refs = vec![StageRef::hold(target); 21];
        let mut tilt_tail = Vec::new();
        let mut rate_tail = Vec::new();
        let total_ticks = 900; // 4.5 s at 200 Hz
        for k in 0..total_ticks {
            let t = k as f64 * 0.005;
            // The controller learns of the failure 20 ms after onset,
            // standing in for detection latency.
            let fault = if t >= 0.52 { Some(0) } else { None };
            let x0 = *sim.packed_state();
            let (cmd, _) = nmpc.control(&x0, &refs, fault).unwrap();
            sim.advance(&cmd, 0.0025).unwrap();
            sim.advance(&cmd, 0.0025).unwrap();
            if t >= 4.0 {
                tilt_tail.push(tilt_angle(&sim.state().att));
                rate_tail.push(sim.state().rates.z);
            }
        }
        let st = sim.state();
        assert!(cmd_is_zeroed(&nmpc.prev_cmd));
        let mean_tilt = tilt_tail.iter().sum::<f64>() / tilt_tail.len() as f64;
        assert!(
            mean_tilt < 5.0_f64.to_radians(),
            "mean tilt {:.2} deg too high",
            mean_tilt.to_degrees()
        );
        let pos_err = (st.pos - target).norm();
        assert!(pos_err < 0.5, "position error {pos_err} after catch");
        let mean_rate = rate_tail.iter().sum::<f64>() / rate_tail.len() as f64;
        let r_eq = yaw_equilibrium_rate(&st.thrusts, &params);
        assert!(
            (mean_rate - r_eq).abs() <= 0.2 * r_eq.abs(),
            "spin rate {mean_rate} vs equilibrium {r_eq}"
        );
    }

    fn cmd_is_zeroed(cmd: &Vector4<f64>) -> bool {
        cmd[0] == 0.0
    }

    #[test]
    fn rejects_mismatched_reference_length() {
        let params = VehicleParams::default();
        let mut nmpc = Nmpc::new(NmpcConfig::default(), params.clone()).unwrap();
        let x0 = VehicleState::hover_at(Vector3::new(0.0, 0.0, 1.0), &params).pack();
        let refs = vec![StageRef::hold(Vector3::zeros()); 5];
        assert!(nmpc.control(&x0, &refs, None).is_err());
    }
}
