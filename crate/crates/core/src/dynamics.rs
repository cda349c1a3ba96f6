//! Rigid-body quadrotor dynamics.
//!
//! Conventions:
//! - World frame is z-up; gravity is (0, 0, -g).
//! - The attitude quaternion rotates body-frame vectors into the world
//!   frame, so the thrust axis in world coordinates is `att * e_z`.
//! - Body rates are expressed in the body frame.
//! - Rotors are numbered 0..3 on the diagonals; the mixer below fixes the
//!   geometry and spin directions.
//!
//! The translational model is thrust plus linear rotor drag:
//! `m * a = T * z_B - R * D * R^T * v + m * g_vec`. The rotational model
//! adds a yaw-rate damping torque `-k_d_psi * r * e_z` that opposes the
//! spin, which is what makes the post-failure yaw rate settle at a finite
//! equilibrium instead of winding up. Each rotor's thrust follows its
//! command through a first-order lag with time constant `sigma`.

use crate::error::{Error, Result};
use crate::params::VehicleParams;
use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, UnitQuaternion, Vector3, Vector4};

/// Dimension of the packed state vector.
pub const STATE_DIM: usize = 17;

/// Packed state layout: position, attitude (w, x, y, z), velocity, body
/// rates, rotor thrusts.
pub type StateVector = SVector<f64, STATE_DIM>;

/// Full simulation state of the vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    /// Position in the world frame [m].
    pub pos: Vector3<f64>,
    /// Attitude quaternion (body to world).
    pub att: UnitQuaternion<f64>,
    /// Velocity in the world frame [m/s].
    pub vel: Vector3<f64>,
    /// Body angular rates [rad/s].
    pub rates: Vector3<f64>,
    /// Delivered rotor thrusts [N].
    pub thrusts: Vector4<f64>,
}

impl VehicleState {
    /// State at rest at a position, with rotors producing hover thrust.
    pub fn hover_at(pos: Vector3<f64>, params: &VehicleParams) -> Self {
        Self {
            pos,
            att: UnitQuaternion::identity(),
            vel: Vector3::zeros(),
            rates: Vector3::zeros(),
            thrusts: Vector4::repeat(params.hover_thrust_per_rotor()),
        }
    }

    /// State at rest with rotors stopped.
    pub fn grounded_at(pos: Vector3<f64>) -> Self {
        Self {
            pos,
            att: UnitQuaternion::identity(),
            vel: Vector3::zeros(),
            rates: Vector3::zeros(),
            thrusts: Vector4::zeros(),
        }
    }

    pub fn pack(&self) -> StateVector {
        let mut z = StateVector::zeros();
        z.fixed_rows_mut::<3>(0).copy_from(&self.pos);
        let q = self.att.quaternion();
        z[3] = q.w;
        z[4] = q.i;
        z[5] = q.j;
        z[6] = q.k;
        z.fixed_rows_mut::<3>(7).copy_from(&self.vel);
        z.fixed_rows_mut::<3>(10).copy_from(&self.rates);
        z.fixed_rows_mut::<4>(13).copy_from(&self.thrusts);
        z
    }

    /// Rebuilds the typed state; the attitude is renormalized.
    pub fn unpack(z: &StateVector) -> Self {
        Self {
            pos: z.fixed_rows::<3>(0).into(),
            att: UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                z[3], z[4], z[5], z[6],
            )),
            vel: z.fixed_rows::<3>(7).into(),
            rates: z.fixed_rows::<3>(10).into(),
            thrusts: z.fixed_rows::<4>(13).into(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pack().iter().all(|v| v.is_finite())
    }
}

/// Collective thrust and body torque produced by the rotor set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    /// Total thrust along the body z axis [N].
    pub thrust: f64,
    /// Body torque [N m].
    pub torque: Vector3<f64>,
}

/// Per-rotor thrust command with its emission time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlCommand {
    /// Commanded rotor thrusts [N].
    pub u: Vector4<f64>,
    /// Simulation time the command was issued [s].
    pub stamp: f64,
}

impl ControlCommand {
    /// Builds a command, clamping each channel into [0, T_bar].
    pub fn clamped(u: Vector4<f64>, stamp: f64, params: &VehicleParams) -> Self {
        Self {
            u: u.map(|v| v.clamp(0.0, params.t_bar)),
            stamp,
        }
    }
}

/// Linear map between rotor thrusts and the collective wrench.
///
/// Row 0 sums thrusts; rows 1 and 2 are the roll and pitch arms with the
/// diagonal geometry factor sqrt(2)/2 * r_d and sign patterns (-,+,+,-) and
/// (-,+,-,+); row 3 is the reaction-drag yaw arm kappa_t with signs
/// (-,-,+,+).
#[derive(Debug, Clone)]
pub struct Mixer {
    mat: Matrix4<f64>,
    inv: Matrix4<f64>,
}

impl Mixer {
    pub fn new(params: &VehicleParams) -> Result<Self> {
        if params.r_d <= 0.0 || params.kappa_t <= 0.0 {
            return Err(Error::Config("mixer needs r_d > 0 and kappa_t > 0".into()));
        }
        let a = std::f64::consts::FRAC_1_SQRT_2 * params.r_d;
        let k = params.kappa_t;
        #[rustfmt::skip]
        let mat = Matrix4::new(
            1.0, 1.0, 1.0, 1.0,
             -a,   a,   a,  -a,
             -a,   a,  -a,   a,
             -k,  -k,   k,   k,
        );
        let inv = mat
            .try_inverse()
            .ok_or_else(|| Error::Config("mixer matrix is singular".into()))?;
        Ok(Self { mat, inv })
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.mat
    }

    /// Wrench produced by a thrust vector.
    pub fn wrench(&self, thrusts: &Vector4<f64>) -> Result<Wrench> {
        if thrusts.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("mixer input thrusts must be finite".into()));
        }
        let w = self.mat * thrusts;
        Ok(Wrench {
            thrust: w[0],
            torque: Vector3::new(w[1], w[2], w[3]),
        })
    }

    /// Thrust vector that realizes a wrench (inverse mix).
    pub fn thrusts(&self, wrench: &Wrench) -> Vector4<f64> {
        self.inv
            * Vector4::new(
                wrench.thrust,
                wrench.torque.x,
                wrench.torque.y,
                wrench.torque.z,
            )
    }
}

/// Time derivative of the packed state under an effective rotor command.
///
/// `u_eff` is the thrust command after any effectiveness scaling; the
/// caller owns failure modeling. The quaternion rows integrate the exact
/// kinematics and stay on the unit sphere up to integration error.
pub fn deriv_packed(
    params: &VehicleParams,
    mixer: &Mixer,
    z: &StateVector,
    u_eff: &Vector4<f64>,
) -> StateVector {
    let qw = z[3];
    let qx = z[4];
    let qy = z[5];
    let qz = z[6];
    let vel = Vector3::new(z[7], z[8], z[9]);
    let w = Vector3::new(z[10], z[11], z[12]);
    let t = Vector4::new(z[13], z[14], z[15], z[16]);

    // Rotation matrix columns from the quaternion (body to world).
    let r00 = 1.0 - 2.0 * (qy * qy + qz * qz);
    let r01 = 2.0 * (qx * qy - qw * qz);
    let r02 = 2.0 * (qx * qz + qw * qy);
    let r10 = 2.0 * (qx * qy + qw * qz);
    let r11 = 1.0 - 2.0 * (qx * qx + qz * qz);
    let r12 = 2.0 * (qy * qz - qw * qx);
    let r20 = 2.0 * (qx * qz - qw * qy);
    let r21 = 2.0 * (qy * qz + qw * qx);
    let r22 = 1.0 - 2.0 * (qx * qx + qy * qy);

    let total_thrust = t.sum();
    let z_b = Vector3::new(r02, r12, r22);

    // Rotor drag: rotate velocity into the body frame, scale by D, rotate
    // back.
    let v_body = Vector3::new(
        r00 * vel.x + r10 * vel.y + r20 * vel.z,
        r01 * vel.x + r11 * vel.y + r21 * vel.z,
        r02 * vel.x + r12 * vel.y + r22 * vel.z,
    );
    let f_drag_body = params.d.component_mul(&v_body);
    let f_drag = Vector3::new(
        r00 * f_drag_body.x + r01 * f_drag_body.y + r02 * f_drag_body.z,
        r10 * f_drag_body.x + r11 * f_drag_body.y + r12 * f_drag_body.z,
        r20 * f_drag_body.x + r21 * f_drag_body.y + r22 * f_drag_body.z,
    );

    let acc = (z_b * total_thrust - f_drag) / params.m + Vector3::new(0.0, 0.0, -params.g);

    // Quaternion kinematics: q_dot = 0.5 * q x (0, w).
    let q_dot = 0.5
        * Vector4::new(
            -qx * w.x - qy * w.y - qz * w.z,
            qw * w.x + qy * w.z - qz * w.y,
            qw * w.y - qx * w.z + qz * w.x,
            qw * w.z + qx * w.y - qy * w.x,
        );

    let torque = {
        let m = mixer.matrix();
        Vector3::new(
            m.row(1).transpose().dot(&t),
            m.row(2).transpose().dot(&t),
            m.row(3).transpose().dot(&t),
        )
    };
    let iv = params.i_v;
    let i_w = Vector3::new(iv.x * w.x, iv.y * w.y, iv.z * w.z);
    let gyro = w.cross(&i_w);
    // Spin damping acts only about the body z axis and opposes the rate.
    let damping = Vector3::new(0.0, 0.0, params.k_d_psi * w.z);
    let w_dot = (torque - gyro - damping).component_div(&iv);

    let t_dot = (u_eff - t) / params.sigma;

    let mut dz = StateVector::zeros();
    dz.fixed_rows_mut::<3>(0).copy_from(&vel);
    dz.fixed_rows_mut::<4>(3).copy_from(&q_dot);
    dz.fixed_rows_mut::<3>(7).copy_from(&acc);
    dz.fixed_rows_mut::<3>(10).copy_from(&w_dot);
    dz.fixed_rows_mut::<4>(13).copy_from(&t_dot);
    dz
}

/// Validated typed-state wrapper around [`deriv_packed`].
pub fn state_derivative(
    params: &VehicleParams,
    mixer: &Mixer,
    state: &VehicleState,
    command: &ControlCommand,
) -> Result<StateVector> {
    let z = state.pack();
    if z.iter().any(|v| !v.is_finite()) || command.u.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidState("non-finite state or command".into()));
    }
    let qn = z.fixed_rows::<4>(3).norm();
    if (qn - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidState(format!("quaternion norm {qn} not unit")));
    }
    Ok(deriv_packed(params, mixer, &z, &command.u))
}

/// One classical Runge-Kutta step of the packed dynamics.
///
/// The attitude block is renormalized afterwards so repeated stepping keeps
/// the quaternion on the unit sphere.
pub fn rk4_step(
    params: &VehicleParams,
    mixer: &Mixer,
    z: &StateVector,
    u_eff: &Vector4<f64>,
    dt: f64,
) -> StateVector {
    let k1 = deriv_packed(params, mixer, z, u_eff);
    let k2 = deriv_packed(params, mixer, &(z + k1 * (dt / 2.0)), u_eff);
    let k3 = deriv_packed(params, mixer, &(z + k2 * (dt / 2.0)), u_eff);
    let k4 = deriv_packed(params, mixer, &(z + k3 * dt), u_eff);
    let mut out = z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let qn = out.fixed_rows::<4>(3).norm();
    if qn > 0.0 {
        let q = out.fixed_rows::<4>(3) / qn;
        out.fixed_rows_mut::<4>(3).copy_from(&q);
    }
    out
}

/// Jacobian of [`deriv_packed`] with respect to the packed state.
///
/// Differentiates the exact expressions used by [`deriv_packed`], including
/// its unit-quaternion rotation parameterization, so column-wise finite
/// differences of the derivative agree with this matrix to truncation error.
pub fn deriv_jacobian(
    params: &VehicleParams,
    mixer: &Mixer,
    z: &StateVector,
) -> SMatrix<f64, 17, 17> {
    let qw = z[3];
    let qx = z[4];
    let qy = z[5];
    let qz = z[6];
    let vel = Vector3::new(z[7], z[8], z[9]);
    let w = Vector3::new(z[10], z[11], z[12]);
    let t = Vector4::new(z[13], z[14], z[15], z[16]);

    let r = Matrix3::new(
        1.0 - 2.0 * (qy * qy + qz * qz),
        2.0 * (qx * qy - qw * qz),
        2.0 * (qx * qz + qw * qy),
        2.0 * (qx * qy + qw * qz),
        1.0 - 2.0 * (qx * qx + qz * qz),
        2.0 * (qy * qz - qw * qx),
        2.0 * (qx * qz - qw * qy),
        2.0 * (qy * qz + qw * qx),
        1.0 - 2.0 * (qx * qx + qy * qy),
    );

    // Entry-wise derivatives of the rotation matrix w.r.t. (qw, qx, qy, qz).
    let dr = [
        Matrix3::new(0.0, -2.0 * qz, 2.0 * qy, 2.0 * qz, 0.0, -2.0 * qx, -2.0 * qy, 2.0 * qx, 0.0),
        Matrix3::new(0.0, 2.0 * qy, 2.0 * qz, 2.0 * qy, -4.0 * qx, -2.0 * qw, 2.0 * qz, 2.0 * qw, -4.0 * qx),
        Matrix3::new(-4.0 * qy, 2.0 * qx, 2.0 * qw, 2.0 * qx, 0.0, 2.0 * qz, -2.0 * qw, 2.0 * qz, -4.0 * qy),
        Matrix3::new(-4.0 * qz, -2.0 * qw, 2.0 * qx, 2.0 * qw, -4.0 * qz, 2.0 * qy, 2.0 * qx, 2.0 * qy, 0.0),
    ];

    let mut j = SMatrix::<f64, 17, 17>::zeros();

    // Position kinematics.
    j.fixed_view_mut::<3, 3>(0, 7).copy_from(&Matrix3::identity());

    // Quaternion kinematics: q_dot = 0.5 * q x (0, w).
    j.fixed_view_mut::<4, 4>(3, 3).copy_from(
        &(0.5
            * Matrix4::new(
                0.0, -w.x, -w.y, -w.z, w.x, 0.0, w.z, -w.y, w.y, -w.z, 0.0, w.x, w.z, w.y, -w.x,
                0.0,
            )),
    );
    j.fixed_view_mut::<4, 3>(3, 10).copy_from(
        &(0.5
            * SMatrix::<f64, 4, 3>::new(
                -qx, -qy, -qz, qw, -qz, qy, qz, qw, -qx, -qy, qx, qw,
            )),
    );

    // Translational dynamics.
    let total_thrust = t.sum();
    let fdb = params.d.component_mul(&(r.transpose() * vel));
    for col in 0..4 {
        let d_acc = (dr[col].column(2) * total_thrust
            - dr[col] * fdb
            - r * params.d.component_mul(&(dr[col].transpose() * vel)))
            / params.m;
        j.fixed_view_mut::<3, 1>(7, 3 + col).copy_from(&d_acc);
    }
    let drag_vel = r * Matrix3::from_diagonal(&params.d) * r.transpose() / params.m;
    j.fixed_view_mut::<3, 3>(7, 7).copy_from(&(-drag_vel));
    let z_b = r.column(2) / params.m;
    for col in 0..4 {
        j.fixed_view_mut::<3, 1>(7, 13 + col).copy_from(&z_b);
    }

    // Rotational dynamics.
    let iv = params.i_v;
    j.fixed_view_mut::<3, 3>(10, 10).copy_from(&Matrix3::new(
        0.0,
        -w.z * (iv.z - iv.y) / iv.x,
        -w.y * (iv.z - iv.y) / iv.x,
        -w.z * (iv.x - iv.z) / iv.y,
        0.0,
        -w.x * (iv.x - iv.z) / iv.y,
        -w.y * (iv.y - iv.x) / iv.z,
        -w.x * (iv.y - iv.x) / iv.z,
        -params.k_d_psi / iv.z,
    ));
    let m = mixer.matrix();
    for col in 0..4 {
        j[(10, 13 + col)] = m[(1, col)] / iv.x;
        j[(11, 13 + col)] = m[(2, col)] / iv.y;
        j[(12, 13 + col)] = m[(3, col)] / iv.z;
    }

    // Rotor lag.
    for col in 0..4 {
        j[(13 + col, 13 + col)] = -1.0 / params.sigma;
    }

    j
}

/// One RK4 step together with its discrete Jacobians.
///
/// Propagates the same map as [`rk4_step`] (quaternion renormalization
/// included) and returns the next state along with the sensitivities of the
/// step to the state and to the effective command.
pub fn rk4_step_with_jacobian(
    params: &VehicleParams,
    mixer: &Mixer,
    z: &StateVector,
    u_eff: &Vector4<f64>,
    dt: f64,
) -> (StateVector, SMatrix<f64, 17, 17>, SMatrix<f64, 17, 4>) {
    let half = dt / 2.0;

    let k1 = deriv_packed(params, mixer, z, u_eff);
    let z2 = z + k1 * half;
    let k2 = deriv_packed(params, mixer, &z2, u_eff);
    let z3 = z + k2 * half;
    let k3 = deriv_packed(params, mixer, &z3, u_eff);
    let z4 = z + k3 * dt;
    let k4 = deriv_packed(params, mixer, &z4, u_eff);

    let a1 = deriv_jacobian(params, mixer, z);
    let a2 = deriv_jacobian(params, mixer, &z2);
    let a3 = deriv_jacobian(params, mixer, &z3);
    let a4 = deriv_jacobian(params, mixer, &z4);

    // Stage sensitivities chained through the intermediate evaluation points.
    let g1 = a1;
    let g2 = &a2 + (&a2 * &g1) * half;
    let g3 = &a3 + (&a3 * &g2) * half;
    let g4 = &a4 + (&a4 * &g3) * dt;
    let mut a_d = SMatrix::<f64, 17, 17>::identity();
    a_d += (g1 + g2 * 2.0 + g3 * 2.0 + g4) * (dt / 6.0);

    // The derivative is affine in the effective command via the rotor lag.
    let mut e = SMatrix::<f64, 17, 4>::zeros();
    for col in 0..4 {
        e[(13 + col, col)] = 1.0 / params.sigma;
    }
    let l1 = e;
    let l2 = e + (&a2 * &l1) * half;
    let l3 = e + (&a3 * &l2) * half;
    let l4 = e + (&a4 * &l3) * dt;
    let mut b_d = (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (dt / 6.0);

    let mut out = z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let qn = out.fixed_rows::<4>(3).norm();
    if qn > 0.0 {
        let q_hat = out.fixed_rows::<4>(3) / qn;
        // Renormalization projects the quaternion rows onto the unit sphere.
        let n = (Matrix4::identity() - &q_hat * q_hat.transpose()) / qn;
        let a_q = n * a_d.fixed_rows::<4>(3);
        a_d.fixed_rows_mut::<4>(3).copy_from(&a_q);
        let b_q = n * b_d.fixed_rows::<4>(3);
        b_d.fixed_rows_mut::<4>(3).copy_from(&b_q);
        out.fixed_rows_mut::<4>(3).copy_from(&q_hat);
    }
    (out, a_d, b_d)
}

/// Yaw rate at which spin damping balances the residual yaw torque of a
/// thrust configuration [rad/s].
pub fn yaw_equilibrium_rate(thrusts: &Vector4<f64>, params: &VehicleParams) -> f64 {
    let tau_z = params.kappa_t * (-thrusts[0] - thrusts[1] + thrusts[2] + thrusts[3]);
    tau_z / params.k_d_psi
}
