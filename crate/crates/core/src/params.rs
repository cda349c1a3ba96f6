//! Vehicle parameter set and its on-disk text format.
//!
//! The file format is plain `key = value` text. Keys are the field names of
//! [`VehicleParams`] (with the conventional symbol casing `I_v`, `D` and
//! `T_bar` for the matrix and limit entries). Values are either a single
//! number or, for diagonal matrices, three whitespace- or comma-separated
//! numbers. `#` starts a comment. Missing keys fall back to the defaults
//! below; unknown keys are rejected.

use crate::error::{Error, Result};
use nalgebra::Vector3;

/// Physical parameters of the quadrotor.
///
/// The thrust coefficient `k_n` maps squared rotor speed in rev/min to
/// thrust in Newtons (T_i = k_n * rpm_i^2). With the default value the
/// hover point sits near 14,100 rev/min, which is the physically sensible
/// reading of the headline coefficient; a per-(rad/s)^2 reading would put
/// hover above 135,000 rev/min and is rejected by the unit sanity test.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleParams {
    /// Vehicle mass [kg].
    pub m: f64,
    /// Diagonal body inertia [kg m^2].
    pub i_v: Vector3<f64>,
    /// Arm half-distance from hub to rotor along each diagonal axis [m].
    pub r_d: f64,
    /// Thrust coefficient [N / (rev/min)^2].
    pub k_n: f64,
    /// Yaw torque arm per unit thrust [m].
    pub kappa_t: f64,
    /// Diagonal rotor-drag matrix [kg/s].
    pub d: Vector3<f64>,
    /// Yaw rotational damping [N m s].
    pub k_d_psi: f64,
    /// Motor thrust-response time constant [s].
    pub sigma: f64,
    /// Per-rotor thrust limit [N].
    pub t_bar: f64,
    /// Gravity magnitude [m/s^2].
    pub g: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            m: 1.15,
            i_v: Vector3::new(6.862e-3, 6.992e-3, 8.650e-3),
            r_d: 0.125,
            k_n: 1.41e-8,
            kappa_t: 0.01,
            d: Vector3::new(0.48, 0.50, 0.65),
            k_d_psi: 0.011,
            sigma: 0.05,
            t_bar: 8.0,
            g: 9.81,
        }
    }
}

impl VehicleParams {
    /// Total thrust needed to hover [N].
    pub fn hover_thrust(&self) -> f64 {
        self.m * self.g
    }

    /// Per-rotor thrust at hover [N].
    pub fn hover_thrust_per_rotor(&self) -> f64 {
        self.hover_thrust() / 4.0
    }

    /// Rotor speed that produces the given thrust [rev/min].
    pub fn rpm_for_thrust(&self, thrust: f64) -> f64 {
        (thrust.max(0.0) / self.k_n).sqrt()
    }

    /// Thrust produced at the given rotor speed [N].
    pub fn thrust_for_rpm(&self, rpm: f64) -> f64 {
        self.k_n * rpm * rpm
    }

    /// Rotor speed at hover [rev/min].
    pub fn hover_rpm(&self) -> f64 {
        self.rpm_for_thrust(self.hover_thrust_per_rotor())
    }

    /// Checks physical plausibility of the parameter set.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("r_d", self.r_d),
            ("k_n", self.k_n),
            ("kappa_t", self.kappa_t),
            ("k_d_psi", self.k_d_psi),
            ("sigma", self.sigma),
            ("T_bar", self.t_bar),
            ("g", self.g),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name}: must be finite and > 0, got {v}")));
            }
        }
        for (name, v) in [("I_v", &self.i_v), ("D", &self.d)] {
            if v.iter().any(|x| !x.is_finite() || *x <= 0.0) {
                return Err(Error::Config(format!("{name}: entries must be finite and > 0")));
            }
        }
        if 4.0 * self.t_bar <= self.hover_thrust() {
            return Err(Error::Config(format!(
                "T_bar: total thrust limit {} N cannot lift weight {} N",
                4.0 * self.t_bar,
                self.hover_thrust()
            )));
        }
        Ok(())
    }

    /// Parses the `key = value` text format described in the module docs.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut p = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let scalar = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("{key}: not a number: {v:?}")))
            };
            let triple = |v: &str| -> Result<Vector3<f64>> {
                let parts: Vec<f64> = v
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("{key}: expected 3 numbers, got {v:?}")))?;
                if parts.len() != 3 {
                    return Err(Error::Config(format!(
                        "{key}: expected 3 numbers, got {}",
                        parts.len()
                    )));
                }
                Ok(Vector3::new(parts[0], parts[1], parts[2]))
            };
            match key {
                "m" => p.m = scalar(value)?,
                "I_v" => p.i_v = triple(value)?,
                "r_d" => p.r_d = scalar(value)?,
                "k_n" => p.k_n = scalar(value)?,
                "kappa_t" => p.kappa_t = scalar(value)?,
                "D" => p.d = triple(value)?,
                "k_d_psi" => p.k_d_psi = scalar(value)?,
                "sigma" => p.sigma = scalar(value)?,
                "T_bar" => p.t_bar = scalar(value)?,
                "g" => p.g = scalar(value)?,
                other => return Err(Error::Config(format!("unknown parameter key {other:?}"))),
            }
        }
        p.validate()?;
        Ok(p)
    }

    /// Reads a parameter file from disk.
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Renders the parameter set in the on-disk format.
    pub fn to_text(&self) -> String {
        format!(
            "# Quadrotor parameters.\n\
             # k_n maps squared rotor speed in rev/min to thrust in N.\n\
             m = {}\n\
             I_v = {} {} {}\n\
             r_d = {}\n\
             k_n = {}\n\
             kappa_t = {}\n\
             D = {} {} {}\n\
             k_d_psi = {}\n\
             sigma = {}\n\
             T_bar = {}\n\
             g = {}\n",
            self.m,
            self.i_v.x,
            self.i_v.y,
            self.i_v.z,
            self.r_d,
            self.k_n,
            self.kappa_t,
            self.d.x,
            self.d.y,
            self.d.z,
            self.k_d_psi,
            self.sigma,
            self.t_bar,
            self.g,
        )
    }
}
