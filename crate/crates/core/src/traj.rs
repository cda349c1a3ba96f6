//! Minimum-jerk trajectory optimization with a rotor-failure budget.
//!
//! Trajectories are piecewise quintic polynomials. Given boundary states,
//! interior waypoints q and segment durations T, the unique minimum-jerk
//! interpolant is obtained from one banded linear solve (time linear in
//! the segment count): endpoint position/velocity/acceleration, waypoint
//! interpolation, and continuity of derivatives up to order four pin all
//! coefficients.
//!
//! The outer optimizer moves (q, tau) with T = exp(tau), scoring
//! elapsed time, jerk energy, cubed hinge penalties on speed,
//! acceleration and jerk, and a cubed hinge on obstacle clearance from
//! the world's distance field. Gradients are exact: contributions with
//! respect to the coefficients are pulled back through the transpose of
//! the banded system (adjoint solve), and duration gradients combine the
//! explicit terms with the matrix sensitivity.
//!
//! After a rotor failure the acceleration budget shrinks: with the rotor
//! opposite the failed one written off, the usable lateral thrust is
//! sqrt((2*T_bar)^2 - (m*g)^2) minus the worst-case drag, scaled by a
//! safety factor.

use crate::error::{Error, Result};
use crate::lbfgs::{minimize, LbfgsConfig};
use crate::params::VehicleParams;
use crate::world::GridWorld;
use nalgebra::{DMatrix, DVector, Matrix6x3, SVector, Vector3};
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Write};
use std::path::Path;

/// Samples per segment for the penalty quadrature.
const PENALTY_SAMPLES: usize = 16;
/// Post-optimization feasibility check sampling rate [Hz].
const CHECK_RATE: f64 = 100.0;

/// Position/velocity/acceleration triple fixing one end of a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryState {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub acc: Vector3<f64>,
}

impl BoundaryState {
    /// A boundary at rest.
    pub fn rest(pos: Vector3<f64>) -> Self {
        Self { pos, vel: Vector3::zeros(), acc: Vector3::zeros() }
    }
}

/// Kinematic limits and penalty weights for the trajectory optimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerLimits {
    /// Speed limit [m/s].
    pub v_max: f64,
    /// Acceleration limit with all rotors healthy [m/s^2].
    pub a_max_nominal: f64,
    /// Acceleration limit once a rotor has failed [m/s^2].
    pub a_max_failure: f64,
    /// Jerk limit [m/s^3].
    pub j_max: f64,
    /// Required obstacle clearance [m].
    pub safe_distance: f64,
    /// Safety factor on the post-failure acceleration budget, in (0, 1].
    pub gamma_a_f: f64,
    /// Penalty weights: elapsed time, jerk energy, kinematic hinges,
    /// collision hinge.
    pub weights: [f64; 4],
}

impl Default for PlannerLimits {
    fn default() -> Self {
        Self {
            v_max: 1.0,
            a_max_nominal: 6.0,
            a_max_failure: 6.0,
            j_max: 20.0,
            safe_distance: 0.3,
            gamma_a_f: 1.0,
            weights: [10.0, 1.0, 1.0e4, 1.0e4],
        }
    }
}

impl PlannerLimits {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("v_max", self.v_max),
            ("a_max_nominal", self.a_max_nominal),
            ("a_max_failure", self.a_max_failure),
            ("j_max", self.j_max),
            ("safe_distance", self.safe_distance),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("planner limit {name} must be positive")));
            }
        }
        if !(self.gamma_a_f > 0.0 && self.gamma_a_f <= 1.0) {
            return Err(Error::Config("gamma_a_f must lie in (0, 1]".into()));
        }
        if self.a_max_failure > self.a_max_nominal + 1e-12 {
            return Err(Error::Config(
                "a_max_failure must not exceed a_max_nominal".into(),
            ));
        }
        if self.weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Config("planner weights must be positive".into()));
        }
        Ok(())
    }

    /// Fills the post-failure acceleration limit from the vehicle's
    /// thrust budget, capped by the nominal limit.
    pub fn with_failure_budget(mut self, params: &VehicleParams) -> Result<Self> {
        let raw = failure_accel_limit(params, self.v_max, self.gamma_a_f)?;
        self.a_max_failure = raw.min(self.a_max_nominal);
        Ok(self)
    }
}

/// Acceleration available after one rotor fails.
///
/// Conservatively writes off the rotor opposite the failed one, leaving a
/// thrust ceiling of twice the per-rotor maximum; the weight and the
/// worst-case drag at `v_max` are spent first and `gamma` scales the
/// remainder.
pub fn failure_accel_limit(params: &VehicleParams, v_max: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidInput(format!("gamma {gamma} must lie in (0, 1]")));
    }
    if !(v_max > 0.0) {
        return Err(Error::InvalidInput(format!("v_max {v_max} must be positive")));
    }
    let thrust_cap = 2.0 * params.t_bar;
    let weight = params.m * params.g;
    if thrust_cap <= weight {
        return Err(Error::Infeasible(format!(
            "two-rotor thrust {thrust_cap:.2} N cannot support weight {weight:.2} N"
        )));
    }
    let drag_max = params.d.max() * v_max;
    Ok(gamma * ((thrust_cap * thrust_cap - weight * weight).sqrt() - drag_max).abs() / params.m)
}

// ----- polynomial basis -----

/// Monomial basis derivative: beta_k(t)[i] = d^k/dt^k t^i.
fn basis(t: f64, order: usize) -> SVector<f64, 6> {
    let mut b = SVector::<f64, 6>::zeros();
    for i in order..6 {
        let mut coef = 1.0;
        for f in (i - order + 1)..=i {
            coef *= f as f64;
        }
        b[i] = coef * t.powi((i - order) as i32);
    }
    b
}

/// Symmetric jerk-energy Gram entries: (row, col, weight, power of T) with
/// integral cT such that c_i G c_j summed gives the squared-jerk integral.
const GRAM: [(usize, usize, f64, i32); 6] = [
    (3, 3, 36.0, 1),
    (3, 4, 72.0, 2),
    (3, 5, 120.0, 3),
    (4, 4, 192.0, 3),
    (4, 5, 360.0, 4),
    (5, 5, 720.0, 5),
];

// ----- banded linear algebra -----

/// Row-major banded matrix with in-place partially pivoted LU and
/// forward/transpose solves. Row pivoting widens the upper band by the
/// lower bandwidth, which the storage accounts for; factorization and the
/// solves stay linear in the matrix size.
struct Banded {
    n: usize,
    lower: usize,
    /// Upper bandwidth including pivoting fill (original upper + lower).
    upper_ext: usize,
    width: usize,
    data: Vec<f64>,
    pivots: Vec<usize>,
}

impl Banded {
    fn zeros(n: usize, lower: usize, upper: usize) -> Self {
        let upper_ext = upper + lower;
        let width = lower + upper_ext + 1;
        Self { n, lower, upper_ext, width, data: vec![0.0; n * width], pivots: Vec::new() }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + (c + self.lower - r)]
    }

    #[inline]
    fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.width + (c + self.lower - r)]
    }

    /// In-place LU factorization with row pivoting inside the band.
    fn factor(&mut self) -> Result<()> {
        let n = self.n;
        self.pivots = (0..n).collect();
        for k in 0..n {
            let i_end = (k + self.lower).min(n - 1);
            let mut p = k;
            let mut best = self.at(k, k).abs();
            for i in (k + 1)..=i_end {
                let v = self.at(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best < 1e-12 || !best.is_finite() {
                return Err(Error::InvalidState(format!(
                    "spline system is singular at row {k} (pivot {best:.3e})"
                )));
            }
            self.pivots[k] = p;
            let j_end = (k + self.upper_ext).min(n - 1);
            if p != k {
                // Both rows cover the column window [k, k + upper_ext].
                for j in k..=j_end {
                    let a = self.at(k, j);
                    let b = self.at(p, j);
                    *self.at_mut(k, j) = b;
                    *self.at_mut(p, j) = a;
                }
            }
            let pivot = self.at(k, k);
            for i in (k + 1)..=i_end {
                let l = self.at(i, k) / pivot;
                *self.at_mut(i, k) = l;
                for j in (k + 1)..=j_end {
                    *self.at_mut(i, j) -= l * self.at(k, j);
                }
            }
        }
        Ok(())
    }

    /// Solves A x = b for each column of `rhs` in place (factored A).
    fn solve_in_place(&self, rhs: &mut DMatrix<f64>) {
        for col in 0..rhs.ncols() {
            for k in 0..self.n {
                let p = self.pivots[k];
                if p != k {
                    let tmp = rhs[(k, col)];
                    rhs[(k, col)] = rhs[(p, col)];
                    rhs[(p, col)] = tmp;
                }
                let i_end = (k + self.lower).min(self.n - 1);
                let bk = rhs[(k, col)];
                for i in (k + 1)..=i_end {
                    rhs[(i, col)] -= self.at(i, k) * bk;
                }
            }
            for i in (0..self.n).rev() {
                let j1 = (i + self.upper_ext).min(self.n - 1);
                let mut acc = rhs[(i, col)];
                for j in (i + 1)..=j1 {
                    acc -= self.at(i, j) * rhs[(j, col)];
                }
                rhs[(i, col)] = acc / self.at(i, i);
            }
        }
    }

    /// Solves A^T x = b in place. The factorization applies, in order,
    /// swap-then-eliminate steps (U = E_{n-1} P_{n-1} ... E_0 P_0 A), so
    /// the transpose solve is U^T z = b followed by the transposed
    /// elimination steps and swaps replayed in reverse, interleaved per
    /// column.
    fn solve_transpose_in_place(&self, rhs: &mut DVector<f64>) {
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.upper_ext);
            let mut acc = rhs[i];
            for j in j0..i {
                acc -= self.at(j, i) * rhs[j];
            }
            rhs[i] = acc / self.at(i, i);
        }
        for k in (0..self.n).rev() {
            let i_end = (k + self.lower).min(self.n - 1);
            let mut acc = rhs[k];
            for i in (k + 1)..=i_end {
                acc -= self.at(i, k) * rhs[i];
            }
            rhs[k] = acc;
            let p = self.pivots[k];
            if p != k {
                rhs.swap_rows(k, p);
            }
        }
    }
}

/// Assembled and factored spline system for a fixed (q, T).
struct SplineSystem {
    m: usize,
    band: Banded,
}

fn assemble(
    start: &BoundaryState,
    end: &BoundaryState,
    waypoints: &[Vector3<f64>],
    durations: &[f64],
) -> Result<(SplineSystem, DMatrix<f64>)> {
    let m = durations.len();
    if m == 0 {
        return Err(Error::InvalidInput("trajectory needs at least one segment".into()));
    }
    if waypoints.len() + 1 != m {
        return Err(Error::InvalidInput(format!(
            "{} waypoints do not fit {m} segments",
            waypoints.len()
        )));
    }
    for (g, t) in durations.iter().enumerate() {
        if !(*t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidInput(format!("duration {g} must be positive, got {t}")));
        }
    }
    let n = 6 * m;
    let mut band = Banded::zeros(n, 8, 7);
    let mut rhs = DMatrix::<f64>::zeros(n, 3);

    // Start boundary: position, velocity, acceleration of segment 0 at 0.
    for (row, order) in [(0usize, 0usize), (1, 1), (2, 2)] {
        let b = basis(0.0, order);
        for k in 0..6 {
            if b[k] != 0.0 {
                *band.at_mut(row, k) = b[k];
            }
        }
    }
    for ax in 0..3 {
        rhs[(0, ax)] = start.pos[ax];
        rhs[(1, ax)] = start.vel[ax];
        rhs[(2, ax)] = start.acc[ax];
    }

    // Interior junctions: waypoint interpolation plus continuity of
    // derivative orders 0..4.
    for g in 0..m - 1 {
        let row0 = 3 + 6 * g;
        let col_g = 6 * g;
        let col_n = 6 * (g + 1);
        let t = durations[g];
        let b_pos = basis(t, 0);
        for k in 0..6 {
            *band.at_mut(row0, col_g + k) = b_pos[k];
        }
        for ax in 0..3 {
            rhs[(row0, ax)] = waypoints[g][ax];
        }
        for order in 0..5 {
            let row = row0 + 1 + order;
            let b_end = basis(t, order);
            let b_start = basis(0.0, order);
            for k in 0..6 {
                *band.at_mut(row, col_g + k) = b_end[k];
                if b_start[k] != 0.0 {
                    *band.at_mut(row, col_n + k) = -b_start[k];
                }
            }
        }
    }

    // End boundary on the last segment.
    let t_last = durations[m - 1];
    let col = 6 * (m - 1);
    for (j, order) in [(0usize, 0usize), (1, 1), (2, 2)] {
        let row = 6 * m - 3 + j;
        let b = basis(t_last, order);
        for k in 0..6 {
            *band.at_mut(row, col + k) = b[k];
        }
    }
    for ax in 0..3 {
        rhs[(6 * m - 3, ax)] = end.pos[ax];
        rhs[(6 * m - 2, ax)] = end.vel[ax];
        rhs[(6 * m - 1, ax)] = end.acc[ax];
    }

    let mut sys = SplineSystem { m, band };
    sys.band.factor()?;
    sys.band.solve_in_place(&mut rhs);
    Ok((sys, rhs))
}

// ----- trajectory container -----

/// Piecewise quintic trajectory: per-segment durations and coefficient
/// blocks (rows are powers of t, columns are axes).
#[derive(Debug, Clone)]
pub struct PiecewiseTrajectory {
    durations: Vec<f64>,
    coeffs: Vec<Matrix6x3<f64>>,
}

impl PiecewiseTrajectory {
    /// Fits the unique minimum-jerk interpolant through the waypoints
    /// with the given boundary states and durations.
    pub fn fit(
        start: &BoundaryState,
        end: &BoundaryState,
        waypoints: &[Vector3<f64>],
        durations: &[f64],
    ) -> Result<Self> {
        let (sys, c) = assemble(start, end, waypoints, durations)?;
        Ok(Self::from_solution(sys.m, durations, &c))
    }

    fn from_solution(m: usize, durations: &[f64], c: &DMatrix<f64>) -> Self {
        let mut coeffs = Vec::with_capacity(m);
        for g in 0..m {
            let mut block = Matrix6x3::<f64>::zeros();
            for k in 0..6 {
                for ax in 0..3 {
                    block[(k, ax)] = c[(6 * g + k, ax)];
                }
            }
            coeffs.push(block);
        }
        Self { durations: durations.to_vec(), coeffs }
    }

    pub fn segment_count(&self) -> usize {
        self.durations.len()
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn total_time(&self) -> f64 {
        self.durations.iter().sum()
    }

    /// Evaluates the trajectory derivative of the given order (0..=4) at
    /// time `t` from the trajectory start. Times outside the domain are
    /// clamped; the flag reports it.
    pub fn eval(&self, t: f64, order: usize) -> (Vector3<f64>, bool) {
        let total = self.total_time();
        let clamped = t < 0.0 || t > total;
        let mut tt = t.clamp(0.0, total);
        let mut seg = 0usize;
        while seg + 1 < self.durations.len() && tt > self.durations[seg] {
            tt -= self.durations[seg];
            seg += 1;
        }
        let b = basis(tt.min(self.durations[seg]), order);
        (self.coeffs[seg].tr_mul(&b), clamped)
    }

    /// Total squared-jerk integral over the whole trajectory.
    pub fn jerk_energy(&self) -> f64 {
        let mut total = 0.0;
        for (g, block) in self.coeffs.iter().enumerate() {
            let t = self.durations[g];
            for ax in 0..3 {
                for (i, j, w, p) in GRAM {
                    let term = w * t.powi(p) * block[(i, ax)] * block[(j, ax)];
                    total += if i == j { term } else { 2.0 * term };
                }
            }
        }
        total
    }

    /// Writes segment durations, coefficients and a 100 Hz (t, p, v, a)
    /// sample table.
    pub fn export(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "trajectory v1")?;
        writeln!(w, "segments {}", self.segment_count())?;
        for (g, block) in self.coeffs.iter().enumerate() {
            writeln!(w, "segment {} duration {}", g, self.durations[g])?;
            for k in 0..6 {
                writeln!(w, "{} {} {}", block[(k, 0)], block[(k, 1)], block[(k, 2)])?;
            }
        }
        let total = self.total_time();
        let steps = (total * CHECK_RATE).ceil() as usize;
        writeln!(w, "samples {}", steps + 1)?;
        writeln!(w, "t,px,py,pz,vx,vy,vz,ax,ay,az")?;
        for s in 0..=steps {
            let t = (s as f64 / CHECK_RATE).min(total);
            let (p, _) = self.eval(t, 0);
            let (v, _) = self.eval(t, 1);
            let (a, _) = self.eval(t, 2);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                t, p.x, p.y, p.z, v.x, v.y, v.z, a.x, a.y, a.z
            )?;
        }
        Ok(())
    }
}

// ----- cost and gradients -----

/// One trajectory optimization problem over a fixed map snapshot.
pub struct TrajProblem<'a> {
    /// Known map used for clearance penalties; `None` disables the
    /// collision term (open space).
    pub world: Option<&'a GridWorld>,
    pub limits: PlannerLimits,
    /// Applies the post-failure acceleration limit when set.
    pub fault: bool,
    pub start: BoundaryState,
    pub end: BoundaryState,
}

/// Outcome metadata for one optimization run.
#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub escalated: bool,
}

impl<'a> TrajProblem<'a> {
    fn a_max_active(&self) -> f64 {
        if self.fault {
            self.limits.a_max_failure
        } else {
            self.limits.a_max_nominal
        }
    }

    /// Total cost with exact gradients with respect to the interior
    /// waypoints and segment durations.
    pub fn cost_and_grad(
        &self,
        waypoints: &[Vector3<f64>],
        durations: &[f64],
    ) -> Result<(f64, Vec<Vector3<f64>>, Vec<f64>)> {
        let (sys, c) = assemble(&self.start, &self.end, waypoints, durations)?;
        let m = sys.m;
        let [w_time, w_smooth, w_dyn, w_col] = self.limits.weights;
        let a_max = self.a_max_active();
        let v2 = self.limits.v_max * self.limits.v_max;
        let a2 = a_max * a_max;
        let j2 = self.limits.j_max * self.limits.j_max;

        let mut cost = 0.0;
        let mut grad_c = DMatrix::<f64>::zeros(6 * m, 3);
        let mut grad_t = vec![0.0f64; m];

        // Elapsed time.
        for (g, t) in durations.iter().enumerate() {
            cost += w_time * t;
            grad_t[g] += w_time;
        }

        // Jerk energy: quadratic in c with an explicit duration term that
        // equals the squared jerk at the segment end.
        for g in 0..m {
            let t = durations[g];
            for ax in 0..3 {
                for (i, j, w, p) in GRAM {
                    let gij = w * t.powi(p);
                    let ci = c[(6 * g + i, ax)];
                    let cj = c[(6 * g + j, ax)];
                    if i == j {
                        cost += w_smooth * gij * ci * cj;
                        grad_c[(6 * g + i, ax)] += w_smooth * 2.0 * gij * ci;
                    } else {
                        cost += w_smooth * 2.0 * gij * ci * cj;
                        grad_c[(6 * g + i, ax)] += w_smooth * 2.0 * gij * cj;
                        grad_c[(6 * g + j, ax)] += w_smooth * 2.0 * gij * ci;
                    }
                }
            }
            let b3 = basis(t, 3);
            let mut jerk_end_sq = 0.0;
            for ax in 0..3 {
                let mut v = 0.0;
                for k in 3..6 {
                    v += b3[k] * c[(6 * g + k, ax)];
                }
                jerk_end_sq += v * v;
            }
            grad_t[g] += w_smooth * jerk_end_sq;
        }

        // Hinge penalties at midpoint samples of every segment.
        for g in 0..m {
            let t_seg = durations[g];
            for s in 0..PENALTY_SAMPLES {
                let frac = (s as f64 + 0.5) / PENALTY_SAMPLES as f64;
                let t = frac * t_seg;
                let b0 = basis(t, 0);
                let b1 = basis(t, 1);
                let b2 = basis(t, 2);
                let b3 = basis(t, 3);
                let b4 = basis(t, 4);
                let block = |b: &SVector<f64, 6>| -> Vector3<f64> {
                    let mut out = Vector3::zeros();
                    for ax in 0..3 {
                        let mut acc = 0.0;
                        for k in 0..6 {
                            acc += b[k] * c[(6 * g + k, ax)];
                        }
                        out[ax] = acc;
                    }
                    out
                };
                let p = block(&b0);
                let vel = block(&b1);
                let acc = block(&b2);
                let jrk = block(&b3);
                let snp = block(&b4);

                let add_hinge =
                    |h: f64, w: f64, vec: &Vector3<f64>, bvec: &SVector<f64, 6>, ddt: f64,
                     cost: &mut f64,
                     grad_c: &mut DMatrix<f64>,
                     grad_t: &mut Vec<f64>| {
                        if h <= 0.0 {
                            return;
                        }
                        *cost += w * h * h * h;
                        let coef = 6.0 * w * h * h;
                        for ax in 0..3 {
                            let scale = coef * vec[ax];
                            for k in 0..6 {
                                grad_c[(6 * g + k, ax)] += scale * bvec[k];
                            }
                        }
                        grad_t[g] += coef * ddt * frac;
                    };

                add_hinge(
                    vel.norm_squared() - v2,
                    w_dyn,
                    &vel,
                    &b1,
                    vel.dot(&acc),
                    &mut cost,
                    &mut grad_c,
                    &mut grad_t,
                );
                add_hinge(
                    acc.norm_squared() - a2,
                    w_dyn,
                    &acc,
                    &b2,
                    acc.dot(&jrk),
                    &mut cost,
                    &mut grad_c,
                    &mut grad_t,
                );
                add_hinge(
                    jrk.norm_squared() - j2,
                    w_dyn,
                    &jrk,
                    &b3,
                    jrk.dot(&snp),
                    &mut cost,
                    &mut grad_c,
                    &mut grad_t,
                );

                if let Some(world) = self.world {
                    let q = world.distance_query(&p)?;
                    let h = self.limits.safe_distance - q.distance;
                    if h > 0.0 {
                        cost += w_col * h * h * h;
                        let coef = 3.0 * w_col * h * h;
                        for ax in 0..3 {
                            let scale = -coef * q.normal[ax];
                            for k in 0..6 {
                                grad_c[(6 * g + k, ax)] += scale * b0[k];
                            }
                        }
                        grad_t[g] += -coef * q.normal.dot(&vel) * frac;
                    }
                }
            }
        }

        // Pull the coefficient gradient back through the linear system.
        let mut grad_q = vec![Vector3::zeros(); m.saturating_sub(1)];
        for ax in 0..3 {
            let mut lambda = DVector::<f64>::from_iterator(6 * m, grad_c.column(ax).iter().copied());
            sys.band.solve_transpose_in_place(&mut lambda);
            for g in 0..m - 1 {
                grad_q[g][ax] = lambda[3 + 6 * g];
            }
            // Rows evaluated at T_g shift with the duration: the waypoint
            // and continuity rows of junction g, and the end rows for the
            // last segment.
            for g in 0..m - 1 {
                let t = durations[g];
                let col = 6 * g;
                let row0 = 3 + 6 * g;
                let mut acc = 0.0;
                let b1 = basis(t, 1);
                let mut dot = 0.0;
                for k in 0..6 {
                    dot += b1[k] * c[(col + k, ax)];
                }
                acc += lambda[row0] * dot;
                for order in 0..5 {
                    let bd = basis(t, order + 1);
                    let mut dot = 0.0;
                    for k in 0..6 {
                        dot += bd[k] * c[(col + k, ax)];
                    }
                    acc += lambda[row0 + 1 + order] * dot;
                }
                grad_t[g] -= acc;
            }
            let t = durations[m - 1];
            let col = 6 * (m - 1);
            let mut acc = 0.0;
            for (j, order) in [(0usize, 1usize), (1, 2), (2, 3)] {
                let bd = basis(t, order);
                let mut dot = 0.0;
                for k in 0..6 {
                    dot += bd[k] * c[(col + k, ax)];
                }
                acc += lambda[6 * m - 3 + j] * dot;
            }
            grad_t[m - 1] -= acc;
        }

        Ok((cost, grad_q, grad_t))
    }

    /// Optimizes waypoints and durations starting from a collision-free
    /// path, then verifies limits and clearance on a dense sampling. One
    /// automatic penalty escalation retry is attempted before giving up.
    pub fn optimize(&self, path: &[Vector3<f64>]) -> Result<(PiecewiseTrajectory, OptimizeReport)> {
        self.limits.validate()?;
        if path.len() < 2 {
            return Err(Error::InvalidInput("initial path needs at least two points".into()));
        }
        if let Some(world) = self.world {
            // Surface a stale distance field immediately instead of deep
            // inside the line search.
            world.distance_query(&self.start.pos)?;
        }

        let (q0, t0) = seed_from_path(path, &self.start, &self.end, &self.limits);
        let mut problem = TrajProblem {
            world: self.world,
            limits: self.limits.clone(),
            fault: self.fault,
            start: self.start,
            end: self.end,
        };

        let mut x = pack(&q0, &t0);
        let mut escalated = false;
        loop {
            let outcome = run_lbfgs(&problem, x.clone());
            let (q, t) = unpack(&outcome.x, t0.len());
            let traj = PiecewiseTrajectory::fit(&problem.start, &problem.end, &q, &t)?;
            let check = self.post_check(&traj);
            match check {
                Ok(()) => {
                    return Ok((
                        traj,
                        OptimizeReport {
                            iterations: outcome.iterations,
                            cost: outcome.cost,
                            grad_norm: outcome.grad_norm,
                            escalated,
                        },
                    ));
                }
                Err(reason) => {
                    if escalated {
                        return Err(Error::Planning(format!(
                            "trajectory rejected after weight escalation: {reason}"
                        )));
                    }
                    escalated = true;
                    problem.limits.weights[2] *= 10.0;
                    problem.limits.weights[3] *= 10.0;
                    x = outcome.x;
                }
            }
        }
    }

    /// Dense feasibility check: velocity/acceleration/jerk within one
    /// percent of their limits and clearance within 5 cm of the safety
    /// distance.
    fn post_check(&self, traj: &PiecewiseTrajectory) -> std::result::Result<(), String> {
        let total = traj.total_time();
        let steps = ((total * CHECK_RATE).ceil() as usize).max(2);
        let a_max = self.a_max_active();
        let mut v_peak = 0.0f64;
        let mut a_peak = 0.0f64;
        let mut j_peak = 0.0f64;
        let mut min_clear = f64::MAX;
        for s in 0..=steps {
            let t = total * s as f64 / steps as f64;
            let (p, _) = traj.eval(t, 0);
            v_peak = v_peak.max(traj.eval(t, 1).0.norm());
            a_peak = a_peak.max(traj.eval(t, 2).0.norm());
            j_peak = j_peak.max(traj.eval(t, 3).0.norm());
            if let Some(world) = self.world {
                match world.distance_query(&p) {
                    Ok(q) => min_clear = min_clear.min(q.distance),
                    Err(e) => return Err(format!("distance query failed: {e}")),
                }
            }
        }
        if v_peak > self.limits.v_max * 1.01 {
            return Err(format!("speed peak {v_peak:.3} exceeds {:.3}", self.limits.v_max));
        }
        if a_peak > a_max * 1.01 {
            return Err(format!("acceleration peak {a_peak:.3} exceeds {a_max:.3}"));
        }
        if j_peak > self.limits.j_max * 1.01 {
            return Err(format!("jerk peak {j_peak:.3} exceeds {:.3}", self.limits.j_max));
        }
        if self.world.is_some() && min_clear < self.limits.safe_distance - 0.05 {
            return Err(format!(
                "clearance {min_clear:.3} below {:.3}",
                self.limits.safe_distance - 0.05
            ));
        }
        Ok(())
    }
}

/// Resamples the seed path to the segment-count policy and initial
/// durations sized for comfortable cruise speed.
fn seed_from_path(
    path: &[Vector3<f64>],
    start: &BoundaryState,
    end: &BoundaryState,
    limits: &PlannerLimits,
) -> (Vec<Vector3<f64>>, Vec<f64>) {
    let mut cum = vec![0.0f64];
    for w in path.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total_len = *cum.last().unwrap();
    let m = ((total_len / 2.0).ceil() as usize).max(5);

    let sample_at = |s: f64| -> Vector3<f64> {
        if total_len < 1e-9 {
            return path[0];
        }
        let s = s.clamp(0.0, total_len);
        let mut i = 0usize;
        while i + 1 < cum.len() - 1 && cum[i + 1] < s {
            i += 1;
        }
        let seg_len = (cum[i + 1] - cum[i]).max(1e-12);
        let f = (s - cum[i]) / seg_len;
        path[i] + (path[i + 1] - path[i]) * f
    };

    let mut q = Vec::with_capacity(m - 1);
    for g in 1..m {
        q.push(sample_at(total_len * g as f64 / m as f64));
    }
    let mut nodes = Vec::with_capacity(m + 1);
    nodes.push(start.pos);
    nodes.extend(q.iter().copied());
    nodes.push(end.pos);
    let cruise = 0.6 * limits.v_max;
    let t: Vec<f64> = nodes
        .windows(2)
        .map(|w| ((w[1] - w[0]).norm() / cruise).max(0.1))
        .collect();
    (q, t)
}

fn pack(q: &[Vector3<f64>], t: &[f64]) -> DVector<f64> {
    let mut x = DVector::zeros(3 * q.len() + t.len());
    for (g, w) in q.iter().enumerate() {
        for ax in 0..3 {
            x[3 * g + ax] = w[ax];
        }
    }
    for (g, dur) in t.iter().enumerate() {
        x[3 * q.len() + g] = dur.max(1e-3).ln();
    }
    x
}

fn unpack(x: &DVector<f64>, m: usize) -> (Vec<Vector3<f64>>, Vec<f64>) {
    let nq = m - 1;
    let mut q = Vec::with_capacity(nq);
    for g in 0..nq {
        q.push(Vector3::new(x[3 * g], x[3 * g + 1], x[3 * g + 2]));
    }
    let t: Vec<f64> = (0..m).map(|g| x[3 * nq + g].clamp(-6.0, 8.0).exp()).collect();
    (q, t)
}

fn run_lbfgs(problem: &TrajProblem<'_>, x0: DVector<f64>) -> crate::lbfgs::LbfgsOutcome {
    let m = (x0.len() + 3) / 4;
    let nq = m - 1;
    minimize(
        |x, grad| {
            let (q, t) = unpack(x, m);
            if t.iter().any(|v| !v.is_finite() || *v > 2.5e3) {
                grad.fill(0.0);
                return f64::INFINITY;
            }
            match problem.cost_and_grad(&q, &t) {
                Ok((cost, gq, gt)) => {
                    for g in 0..nq {
                        for ax in 0..3 {
                            grad[3 * g + ax] = gq[g][ax];
                        }
                    }
                    for g in 0..m {
                        // Chain rule through T = exp(tau).
                        grad[3 * nq + g] = gt[g] * t[g];
                    }
                    cost
                }
                Err(_) => {
                    grad.fill(0.0);
                    f64::INFINITY
                }
            }
        },
        x0,
        &LbfgsConfig { max_iters: 300, grad_tol: 1e-5, ..Default::default() },
    )
}
