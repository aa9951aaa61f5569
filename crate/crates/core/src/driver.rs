//! Behavioral model of the ±70 V electrode driver: DAC reconstruction,
//! gain, supply saturation and a slew-rate-limited output ramp.
//!
//! The amplifier's slew rate depends on its closed-loop gain; the built-in
//! profiles encode three operating points:
//!
//! | profile  | gain          | slew (V/µs) | full ±70 V swing |
//! |----------|---------------|-------------|------------------|
//! | default  | 14            | 17.5        | 8 µs  → 125 kHz  |
//! | gain14   | 14            | 1.12        | 125 µs → 8 kHz   |
//! | gain5    | 5 (×3 preamp) | 140         | 1 µs  → 1 MHz    |

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DriverError {
    #[error("DAC code {code} out of range for {bits} bits")]
    CodeOutOfRange { code: u32, bits: u32 },
    #[error("DAC bit depth {0} outside 8..=16")]
    InvalidBits(u32),
    #[error("voltage {0} V outside the supply rails")]
    OutOfSupply(f64),
    #[error("invalid driver profile: {0}")]
    InvalidProfile(String),
    #[error("unknown driver profile {0:?}")]
    UnknownProfile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverProfile {
    pub name: String,
    /// Amplifier gain, V/V.
    pub gain: f64,
    /// V/µs.
    pub slew_rate: f64,
    /// Saturation rail magnitude, volts.
    pub supply: f64,
    /// Fraction of the step counted as settled.
    pub settle_band: f64,
    pub pre_amp_gain: f64,
    /// Optional single-pole time constant (µs) ahead of the slew limiter.
    #[serde(default)]
    pub pole_tau_us: Option<f64>,
}

impl DriverProfile {
    pub fn default_profile() -> Self {
        Self {
            name: "default".into(),
            gain: 14.0,
            slew_rate: 17.5,
            supply: 70.0,
            settle_band: 0.01,
            pre_amp_gain: 1.0,
            pole_tau_us: None,
        }
    }

    pub fn gain14() -> Self {
        Self {
            name: "gain14".into(),
            slew_rate: 1.12,
            ..Self::default_profile()
        }
    }

    pub fn gain5() -> Self {
        Self {
            name: "gain5".into(),
            gain: 5.0,
            pre_amp_gain: 3.0,
            slew_rate: 140.0,
            ..Self::default_profile()
        }
    }

    pub fn builtin() -> Vec<DriverProfile> {
        vec![Self::default_profile(), Self::gain14(), Self::gain5()]
    }

    pub fn named(name: &str) -> Result<Self, DriverError> {
        Self::builtin()
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| DriverError::UnknownProfile(name.to_string()))
    }

    pub fn total_gain(&self) -> f64 {
        self.gain * self.pre_amp_gain
    }

    pub fn validate(&self) -> Result<(), DriverError> {
        if !(self.total_gain() > 0.0) {
            return Err(DriverError::InvalidProfile("gain·pre_amp_gain must be positive".into()));
        }
        if !(self.slew_rate > 0.0) || !self.slew_rate.is_finite() {
            return Err(DriverError::InvalidProfile("slew_rate must be positive".into()));
        }
        if !(self.supply > 0.0) {
            return Err(DriverError::InvalidProfile("supply must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.settle_band) {
            return Err(DriverError::InvalidProfile("settle_band must be in [0, 1)".into()));
        }
        if let Some(tau) = self.pole_tau_us {
            if !(tau > 0.0) {
                return Err(DriverError::InvalidProfile("pole_tau_us must be positive".into()));
            }
        }
        Ok(())
    }
}

impl Default for DriverProfile {
    fn default() -> Self {
        Self::default_profile()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DacConfig {
    pub bits: u32,
    /// Output span in volts: `[0, v_ref]`, or `[−v_ref, v_ref]` when bipolar.
    pub v_ref: f64,
    pub bipolar: bool,
    /// Pass commanded voltages through unquantized.
    pub bypass: bool,
}

impl Default for DacConfig {
    fn default() -> Self {
        Self {
            bits: 12,
            v_ref: 5.0,
            bipolar: false,
            bypass: false,
        }
    }
}

impl DacConfig {
    pub fn validate(&self) -> Result<(), DriverError> {
        if !(8..=16).contains(&self.bits) {
            return Err(DriverError::InvalidBits(self.bits));
        }
        if !(self.v_ref > 0.0) {
            return Err(DriverError::InvalidProfile(format!("DAC v_ref {}", self.v_ref)));
        }
        Ok(())
    }

    pub fn full_scale(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    fn span(&self) -> (f64, f64) {
        if self.bipolar {
            (-self.v_ref, self.v_ref)
        } else {
            (0.0, self.v_ref)
        }
    }

    /// Nearest code for a wanted output voltage, saturating at the ends.
    pub fn code_for(&self, volts: f64) -> u32 {
        let (lo, hi) = self.span();
        let full = self.full_scale() as f64;
        let x = if volts.is_nan() { lo } else { volts.clamp(lo, hi) };
        ((x - lo) / (hi - lo) * full).round() as u32
    }
}

/// DAC reconstruction `code·v_ref/(2^bits − 1)` (offset by `−v_ref` and
/// doubled in span when bipolar).
pub fn dac_out(code: u32, cfg: &DacConfig) -> Result<f64, DriverError> {
    cfg.validate()?;
    if code > cfg.full_scale() {
        return Err(DriverError::CodeOutOfRange { code, bits: cfg.bits });
    }
    let (lo, hi) = cfg.span();
    Ok(lo + code as f64 * (hi - lo) / cfg.full_scale() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverState {
    pub v_out: f64,
    pub v_cmd: f64,
}

impl DriverState {
    pub fn settled_at(v: f64) -> Self {
        Self { v_out: v, v_cmd: v }
    }

    pub fn is_settled(&self) -> bool {
        self.v_out == self.v_cmd
    }
}

/// Sets the output target from a DAC voltage; saturation is the model.
pub fn command(state: &mut DriverState, dac_v: f64, profile: &DriverProfile) -> f64 {
    state.v_cmd = (dac_v * profile.total_gain()).clamp(-profile.supply, profile.supply);
    state.v_cmd
}

/// Advances the output by `dt` µs, moving at most `slew_rate·dt` toward the
/// target and landing exactly once within reach.
pub fn step(state: &mut DriverState, dt: f64, profile: &DriverProfile) -> DriverState {
    let goal = match profile.pole_tau_us {
        Some(tau) => state.v_out + (state.v_cmd - state.v_out) * (1.0 - (-dt / tau).exp()),
        None => state.v_cmd,
    };
    let max_move = profile.slew_rate * dt;
    let gap = goal - state.v_out;
    state.v_out = if gap.abs() <= max_move {
        goal
    } else {
        state.v_out + max_move.copysign(gap)
    };
    state.v_out = state.v_out.clamp(-profile.supply, profile.supply);
    *state
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionTime {
    /// Time to enter the settle band around the target, µs.
    pub settle_us: f64,
    /// Time for the complete ramp, µs.
    pub full_ramp_us: f64,
}

pub fn transition_time(v_from: f64, v_to: f64, profile: &DriverProfile) -> Result<TransitionTime, DriverError> {
    for v in [v_from, v_to] {
        if !(v.abs() <= profile.supply) {
            return Err(DriverError::OutOfSupply(v));
        }
    }
    let dv = (v_to - v_from).abs();
    Ok(TransitionTime {
        settle_us: dv * (1.0 - profile.settle_band) / profile.slew_rate,
        full_ramp_us: dv / profile.slew_rate,
    })
}

/// Reciprocal of the full-ramp time across a symmetric swing. A zero swing
/// has no transition and reports `f64::INFINITY`.
pub fn max_switch_rate(swing: f64, profile: &DriverProfile) -> Result<f64, DriverError> {
    if !(swing >= 0.0) || swing > 2.0 * profile.supply {
        return Err(DriverError::OutOfSupply(swing));
    }
    let t = transition_time(-0.5 * swing, 0.5 * swing, profile)?;
    Ok(if t.full_ramp_us == 0.0 {
        f64::INFINITY
    } else {
        1e6 / t.full_ramp_us
    })
}
