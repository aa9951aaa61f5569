//! Stokes vectors, states of polarization on the Poincaré sphere, quaternion
//! rotations and linear retarders.
//!
//! All rotations follow the right-hand rule about their axis. A linear
//! retarder with eigenmode parameter `alpha` and retardance fraction `delta`
//! acts on the sphere as a rotation by `2π·delta` about the equatorial axis
//! `(cos(alpha/2), sin(alpha/2), 0)`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on unit norms (SOPs, rotation axes, quaternions).
pub const UNIT_TOL: f64 = 1e-9;

/// Default degree-of-polarization floor below which the SOP is indeterminate.
pub const DOP_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum PolarizationError {
    #[error("non-positive intensity S0 = {0}")]
    NonPositiveIntensity(f64),
    #[error("vector norm {0} is not unit")]
    NonUnit(f64),
    #[error("rotation axis norm {0} is not unit")]
    NonUnitAxis(f64),
    #[error("retarder out of domain: alpha = {alpha}, delta = {delta}")]
    InvalidRetarder { alpha: f64, delta: f64 },
    #[error("non-finite value")]
    NonFinite,
}

/// Raw four-component Stokes vector, before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StokesVector {
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

impl StokesVector {
    pub fn new(s0: f64, s1: f64, s2: f64, s3: f64) -> Self {
        Self { s0, s1, s2, s3 }
    }

    /// Fully polarized light of the given intensity.
    pub fn polarized(intensity: f64, sop: Sop) -> Self {
        let v = sop.as_vector() * intensity;
        Self::new(intensity, v.x, v.y, v.z)
    }

    pub fn polarized_part(&self) -> Vector3<f64> {
        Vector3::new(self.s1, self.s2, self.s3)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.s0, self.s1, self.s2, self.s3]
    }

    /// `|(s1, s2, s3)| <= s0 (1 + 1e-9)`.
    pub fn is_physical(&self) -> bool {
        self.s0 > 0.0 && self.polarized_part().norm() <= self.s0 * (1.0 + UNIT_TOL)
    }
}

/// Result of normalizing a Stokes vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalized {
    /// `None` when the light is depolarized below the configured floor.
    pub sop: Option<Sop>,
    pub dop: f64,
}

impl Normalized {
    pub fn is_depolarized(&self) -> bool {
        self.sop.is_none()
    }
}

/// Divides out the intensity and splits the result into direction and degree
/// of polarization.
pub fn normalize(sv: &StokesVector, dop_min: f64) -> Result<Normalized, PolarizationError> {
    if !sv.s0.is_finite() || !sv.s1.is_finite() || !sv.s2.is_finite() || !sv.s3.is_finite() {
        return Err(PolarizationError::NonFinite);
    }
    if sv.s0 <= 0.0 {
        return Err(PolarizationError::NonPositiveIntensity(sv.s0));
    }
    let p = sv.polarized_part();
    let norm = p.norm();
    let dop = norm / sv.s0;
    if dop < dop_min || norm == 0.0 {
        return Ok(Normalized { sop: None, dop });
    }
    Ok(Normalized {
        sop: Some(Sop(p / norm)),
        dop,
    })
}

/// A state of polarization: a unit vector on the Poincaré sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Sop(Vector3<f64>);

impl Sop {
    pub const H: Sop = Sop(Vector3::new(1.0, 0.0, 0.0));
    pub const V: Sop = Sop(Vector3::new(-1.0, 0.0, 0.0));
    pub const D: Sop = Sop(Vector3::new(0.0, 1.0, 0.0));
    pub const A: Sop = Sop(Vector3::new(0.0, -1.0, 0.0));
    pub const R: Sop = Sop(Vector3::new(0.0, 0.0, 1.0));
    pub const L: Sop = Sop(Vector3::new(0.0, 0.0, -1.0));

    /// Checked constructor; the norm must be 1 within [`UNIT_TOL`].
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, PolarizationError> {
        Self::from_vector(Vector3::new(x, y, z))
    }

    pub fn from_vector(v: Vector3<f64>) -> Result<Self, PolarizationError> {
        if !v.iter().all(|c| c.is_finite()) {
            return Err(PolarizationError::NonFinite);
        }
        let n = v.norm();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(PolarizationError::NonUnit(n));
        }
        Ok(Sop(v))
    }

    /// Projects any non-zero finite vector onto the sphere.
    pub fn normalized(v: Vector3<f64>) -> Result<Self, PolarizationError> {
        if !v.iter().all(|c| c.is_finite()) {
            return Err(PolarizationError::NonFinite);
        }
        let n = v.norm();
        if n == 0.0 {
            return Err(PolarizationError::NonUnit(0.0));
        }
        Ok(Sop(v / n))
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        self.0
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn dot(&self, other: &Sop) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn antipode(&self) -> Sop {
        Sop(-self.0)
    }
}

impl TryFrom<[f64; 3]> for Sop {
    type Error = PolarizationError;

    fn try_from(v: [f64; 3]) -> Result<Self, Self::Error> {
        Sop::new(v[0], v[1], v[2])
    }
}

impl From<Sop> for [f64; 3] {
    fn from(s: Sop) -> Self {
        s.to_array()
    }
}

impl fmt::Display for Sop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6}, {:.6})", self.0.x, self.0.y, self.0.z)
    }
}

/// Great-circle angle between two SOPs, in `[0, π]`.
///
/// Evaluated as `atan2(|a×b|, a·b)`, which equals `acos(a·b)` but keeps full
/// precision for nearly equal or nearly antipodal inputs.
pub fn misalignment(a: &Sop, b: &Sop) -> f64 {
    let cross = a.0.cross(&b.0).norm();
    let dot = a.0.dot(&b.0).clamp(-1.0, 1.0);
    cross.atan2(dot)
}

/// Unit quaternion `(w, x, y, z)` representing an intensity-preserving SOP
/// transformation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationQ {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl RotationQ {
    pub const IDENTITY: RotationQ = RotationQ {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes the given components. Fails on a zero or non-finite input.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, PolarizationError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() {
            return Err(PolarizationError::NonFinite);
        }
        if n == 0.0 {
            return Err(PolarizationError::NonUnit(0.0));
        }
        Ok(Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    /// `q = (cos(θ/2), axis·sin(θ/2))`.
    pub fn from_axis_angle(axis: Vector3<f64>, theta: f64) -> Result<Self, PolarizationError> {
        let n = axis.norm();
        if !n.is_finite() || !theta.is_finite() {
            return Err(PolarizationError::NonFinite);
        }
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(PolarizationError::NonUnitAxis(n));
        }
        let (s, c) = (0.5 * theta).sin_cos();
        Ok(Self {
            w: c,
            x: axis.x * s,
            y: axis.y * s,
            z: axis.z * s,
        })
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Re-projects onto the unit 3-sphere, absorbing accumulated rounding.
    pub fn renormalized(&self) -> Self {
        let n = self.norm();
        Self {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    pub fn conjugate(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Inverse rotation; the conjugate for a unit quaternion.
    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    fn vector_part(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// `v' = q v q*`, expanded to avoid the full quaternion products.
    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let u = self.vector_part();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Rotation angle in `[0, π]` (the shorter way round).
    pub fn angle(&self) -> f64 {
        2.0 * self.vector_part().norm().atan2(self.w.abs())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

impl Default for RotationQ {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Hamilton product. `(a * b)` applies `b` first, then `a`.
impl Mul for RotationQ {
    type Output = RotationQ;

    fn mul(self, b: RotationQ) -> RotationQ {
        let a = self;
        RotationQ {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
    }
}

pub fn from_axis_angle(axis: Vector3<f64>, theta: f64) -> Result<RotationQ, PolarizationError> {
    RotationQ::from_axis_angle(axis, theta)
}

/// Applies a rotation to an SOP.
pub fn rotate(q: &RotationQ, s: &Sop) -> Sop {
    Sop(q.rotate_vector(&s.0))
}

/// A linear retarder: eigenmode parameter `alpha ∈ [0, 2π)` and retardance
/// fraction `delta ∈ [0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearRetarder {
    alpha: f64,
    delta: f64,
}

impl LinearRetarder {
    pub const IDENTITY: LinearRetarder = LinearRetarder {
        alpha: 0.0,
        delta: 0.0,
    };

    pub fn new(alpha: f64, delta: f64) -> Result<Self, PolarizationError> {
        if !alpha.is_finite() || !delta.is_finite() {
            return Err(PolarizationError::NonFinite);
        }
        if !(0.0..TAU).contains(&alpha) || !(0.0..1.0).contains(&delta) {
            return Err(PolarizationError::InvalidRetarder { alpha, delta });
        }
        Ok(Self { alpha, delta })
    }

    /// Wraps both parameters into their domains.
    pub fn wrapped(alpha: f64, delta: f64) -> Result<Self, PolarizationError> {
        if !alpha.is_finite() || !delta.is_finite() {
            return Err(PolarizationError::NonFinite);
        }
        Ok(Self {
            alpha: wrap_unit_interval(alpha / TAU) * TAU,
            delta: wrap_unit_interval(delta),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Equatorial eigenmode `(cos(α/2), sin(α/2), 0)`.
    pub fn eigenmode(&self) -> Vector3<f64> {
        let (s, c) = (0.5 * self.alpha).sin_cos();
        Vector3::new(c, s, 0.0)
    }

    /// Rotation angle `θ = 2πδ`.
    pub fn theta(&self) -> f64 {
        TAU * self.delta
    }

    pub fn is_identity(&self) -> bool {
        self.delta == 0.0
    }

    /// Same axis, retardance divided by `k`.
    pub fn divided(&self, k: u32) -> Self {
        Self {
            alpha: self.alpha,
            delta: self.delta / k as f64,
        }
    }
}

/// Maps `x` into `[0, 1)`, guarding against `rem_euclid` returning exactly 1.
pub(crate) fn wrap_unit_interval(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    let r = (x + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

pub fn retarder_to_rotation(r: &LinearRetarder) -> RotationQ {
    let (s, c) = (0.5 * r.theta()).sin_cos();
    let e = r.eigenmode();
    RotationQ {
        w: c,
        x: e.x * s,
        y: e.y * s,
        z: 0.0,
    }
}

/// Threshold on the equatorial part of `current - target` below which every
/// equatorial axis satisfies the solver's axis condition.
const SOLVER_DEGENERATE: f64 = 1e-12;

/// Finds the linear retarder carrying `current` onto `target`.
///
/// The axis azimuth `ψ ∈ [0, π)` solves `cos ψ·Δ1 + sin ψ·Δ2 = 0` with
/// `Δ = current − target`, so that both SOPs sit at the same height along
/// the axis. The retardance is the signed angle between their projections
/// onto the plane normal to the axis. When `Δ` has no equatorial component
/// the axis is taken normal to `current + target`, which gives the smallest
/// rotation angle.
pub fn solve_retarder(current: &Sop, target: &Sop) -> LinearRetarder {
    let c = current.as_vector();
    let t = target.as_vector();
    if c == t || misalignment(current, target) < 1e-15 {
        return LinearRetarder::IDENTITY;
    }
    let d = c - t;
    let psi = if d.x.hypot(d.y) > SOLVER_DEGENERATE {
        d.x.atan2(-d.y)
    } else {
        let s = c + t;
        if s.x.hypot(s.y) > SOLVER_DEGENERATE {
            s.y.atan2(s.x) + FRAC_PI_2
        } else {
            0.0
        }
    };
    let psi = psi.rem_euclid(PI);
    let psi = if psi >= PI { 0.0 } else { psi };
    let axis = Vector3::new(psi.cos(), psi.sin(), 0.0);

    let pc = c - axis * axis.dot(&c);
    let pt = t - axis * axis.dot(&t);
    let theta = axis.dot(&pc.cross(&pt)).atan2(pc.dot(&pt));
    let delta = wrap_unit_interval(theta / TAU);
    let alpha = (2.0 * psi).min(TAU.next_down());
    LinearRetarder { alpha, delta }
}
