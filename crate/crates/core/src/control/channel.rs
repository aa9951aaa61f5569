use std::f64::consts::TAU;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::polarization::{misalignment, rotate, RotationQ, Sop};

/// Fiber birefringence as an accumulated rotation that performs an isotropic
/// random walk: each tick prepends a rotation about a uniformly random axis
/// by an angle drawn from `Normal(0, sigma_drift²)`.
#[derive(Debug, Clone)]
pub struct ChannelState {
    pub q: RotationQ,
    pub sigma_drift: f64,
    rng: ChaCha8Rng,
}

impl ChannelState {
    pub fn new(q: RotationQ, sigma_drift: f64, rng_seed: u64) -> Self {
        Self {
            q,
            sigma_drift,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn drift_step(&mut self) -> RotationQ {
        if self.sigma_drift > 0.0 {
            let angle = Normal::new(0.0, self.sigma_drift)
                .map(|d| d.sample(&mut self.rng))
                .unwrap_or(0.0);
            let axis = random_axis(&mut self.rng);
            let dq = RotationQ::from_axis_angle(axis, angle).unwrap_or(RotationQ::IDENTITY);
            self.q = (dq * self.q).renormalized();
        }
        self.q
    }

    /// Prepends a fixed rotation (a sudden polarization jump).
    pub fn inject(&mut self, dq: RotationQ) {
        self.q = (dq * self.q).renormalized();
    }
}

/// Uniform direction on the unit sphere.
pub fn random_axis<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    let v = Vector3::new(r * phi.cos(), r * phi.sin(), z);
    v / v.norm()
}

/// A fixed unit vector perpendicular to `v`: the cross product with the
/// coordinate axis least aligned with `v`.
pub fn perpendicular(v: &Vector3<f64>) -> Vector3<f64> {
    let a = v.map(f64::abs);
    let basis = if a.x <= a.y && a.x <= a.z {
        Vector3::x()
    } else if a.y <= a.z {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let p = v.cross(&basis);
    p / p.norm()
}

/// Minimal rotation carrying `reference_in` onto `measured`: axis normal to
/// both, angle equal to their misalignment. Antipodal pairs rotate by π about
/// [`perpendicular`]`(reference_in)`.
pub fn estimate_channel(measured: &Sop, reference_in: &Sop) -> RotationQ {
    let r = reference_in.as_vector();
    let m = measured.as_vector();
    let angle = misalignment(reference_in, measured);
    if angle == 0.0 {
        return RotationQ::IDENTITY;
    }
    let cross = r.cross(&m);
    let n = cross.norm();
    let axis = if n > 1e-12 { cross / n } else { perpendicular(&r) };
    RotationQ::from_axis_angle(axis, angle).unwrap_or(RotationQ::IDENTITY)
}

/// The SOP to launch so that, after `channel_est`, the light arrives as
/// `desired_out`.
pub fn encode_inverse(desired_out: &Sop, channel_est: &RotationQ) -> Sop {
    rotate(&channel_est.inverse(), desired_out)
}
