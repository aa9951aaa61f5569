//! Lithium-niobate polarization controller module (PCM).
//!
//! A stage realizes a linear retarder. The controller side maps a retarder to
//! electrode voltages with
//!
//! ```text
//! V_a = 2·V_0·δ·sin(α) − V_π·δ·cos(α) + V_a^b
//! V_b = 0
//! V_c = 2·V_0·δ·sin(α) − V_π·δ·cos(α) + V_c^b
//! ```
//!
//! and every electrode must stay inside the ±70 V drive window.

mod calib_file;
mod calibrate;
mod plant;

pub use calib_file::{format_sig6, parse_calibration, read_calibration, render_calibration, write_calibration};
pub use calibrate::{calibrate_stage, line_fit, CalibrationSweep, LineFit};
pub use plant::{PcmPlant, PcmStagePlant, DEFAULT_AXIS_SKEW, DEFAULT_DEN_EPS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polarization::{retarder_to_rotation, LinearRetarder, RotationQ};

/// Electrode drive limit in volts.
pub const V_MAX: f64 = 70.0;

pub const DEFAULT_STAGE_COUNT: usize = 3;
pub const MAX_STAGE_COUNT: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PcmError {
    #[error("electrode {electrode} voltage {volts:.4} V exceeds ±{V_MAX} V")]
    VoltageRangeExceeded { electrode: char, volts: f64 },
    #[error("retardance {delta} cannot be split over {stages} stages within ±{V_MAX} V")]
    Unsatisfiable { delta: f64, stages: usize },
    #[error("degenerate drive: |2·V0·sin α − Vπ·cos α| = {denominator:.3e} V")]
    DegenerateDrive { denominator: f64 },
    #[error("calibration failed: {0}")]
    CalibrationFailed(String),
    #[error("invalid calibration parameters: {0}")]
    InvalidCalibration(String),
    #[error("stage count {0} outside 1..={MAX_STAGE_COUNT}")]
    InvalidStageCount(usize),
    #[error("{expected} stage calibrations required, got {got}")]
    CalibrationCount { expected: usize, got: usize },
    #[error("calibration file: {0}")]
    CalibFile(String),
}

/// Per-stage device constants, all in volts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub v_pi: f64,
    pub v_0: f64,
    pub v_bias_a: f64,
    pub v_bias_c: f64,
}

impl CalibrationParams {
    /// Illustrative constants inside the ±70 V window.
    pub const DEMO: CalibrationParams = CalibrationParams {
        v_pi: 72.0,
        v_0: 35.0,
        v_bias_a: 3.0,
        v_bias_c: -2.0,
    };

    pub fn new(v_pi: f64, v_0: f64, v_bias_a: f64, v_bias_c: f64) -> Result<Self, PcmError> {
        let p = Self {
            v_pi,
            v_0,
            v_bias_a,
            v_bias_c,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PcmError> {
        let all = [self.v_pi, self.v_0, self.v_bias_a, self.v_bias_c];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(PcmError::InvalidCalibration("non-finite value".into()));
        }
        for (name, v) in [("v_pi", self.v_pi), ("v_0", self.v_0)] {
            if v <= 0.0 || v > 200.0 {
                return Err(PcmError::InvalidCalibration(format!(
                    "{name} = {v} outside (0, 200]"
                )));
            }
        }
        for (name, v) in [("v_bias_a", self.v_bias_a), ("v_bias_c", self.v_bias_c)] {
            if v.abs() > V_MAX {
                return Err(PcmError::InvalidCalibration(format!(
                    "{name} = {v} outside [-70, 70]"
                )));
            }
        }
        Ok(())
    }

    /// Volts of common-mode drive per unit retardance along axis `alpha`:
    /// `2·V_0·sin α − V_π·cos α`.
    pub fn drive_slope(&self, alpha: f64) -> f64 {
        2.0 * self.v_0 * alpha.sin() - self.v_pi * alpha.cos()
    }

    /// Mean of the two bias voltages (the common-mode zero point).
    pub fn mean_bias(&self) -> f64 {
        0.5 * (self.v_bias_a + self.v_bias_c)
    }

    /// Bias voltages only: the zero-birefringence (identity) drive.
    pub fn bias_voltages(&self) -> StageVoltages {
        StageVoltages {
            v_a: self.v_bias_a,
            v_b: 0.0,
            v_c: self.v_bias_c,
        }
    }
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self::DEMO
    }
}

/// Electrode voltages of one stage. `v_b` is always zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageVoltages {
    pub v_a: f64,
    pub v_b: f64,
    pub v_c: f64,
}

impl StageVoltages {
    pub fn new(v_a: f64, v_c: f64) -> Self {
        Self { v_a, v_b: 0.0, v_c }
    }

    pub fn check_range(&self) -> Result<(), PcmError> {
        for (electrode, volts) in [('a', self.v_a), ('c', self.v_c)] {
            if !(volts.abs() <= V_MAX) {
                return Err(PcmError::VoltageRangeExceeded { electrode, volts });
            }
        }
        Ok(())
    }
}

/// A stage command: the voltages plus the commanded retarder they encode.
/// The plant reads the eigenmode from the retarder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCommand {
    pub retarder: LinearRetarder,
    pub voltages: StageVoltages,
}

impl StageCommand {
    pub fn alpha(&self) -> f64 {
        self.retarder.alpha()
    }
}

/// Commands for every stage, in optical propagation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStageCommand {
    pub stages: Vec<StageCommand>,
    /// Number of stages carrying a non-zero share of the retardance.
    pub active: usize,
}

impl MultiStageCommand {
    /// All stages at zero retardance (bias voltages).
    pub fn identity(cal_per_stage: &[CalibrationParams]) -> Self {
        Self {
            stages: cal_per_stage
                .iter()
                .map(|c| StageCommand {
                    retarder: LinearRetarder::IDENTITY,
                    voltages: c.bias_voltages(),
                })
                .collect(),
            active: 0,
        }
    }

    /// Product of the commanded stage rotations; stage 0 acts first.
    pub fn composed_rotation(&self) -> RotationQ {
        self.stages.iter().fold(RotationQ::IDENTITY, |acc, s| {
            retarder_to_rotation(&s.retarder) * acc
        })
    }
}

/// Maps a retarder onto the electrode voltages of one stage.
pub fn retarder_to_voltages(
    r: &LinearRetarder,
    cal: &CalibrationParams,
) -> Result<StageVoltages, PcmError> {
    let v = unchecked_voltages(r, cal);
    v.check_range()?;
    Ok(v)
}

fn unchecked_voltages(r: &LinearRetarder, cal: &CalibrationParams) -> StageVoltages {
    let alpha = r.alpha();
    let delta = r.delta();
    let common = 2.0 * cal.v_0 * delta * alpha.sin() - cal.v_pi * delta * alpha.cos();
    StageVoltages {
        v_a: common + cal.v_bias_a,
        v_b: 0.0,
        v_c: common + cal.v_bias_c,
    }
}

/// Splits a retarder over `n` stages: the first `k` stages each carry the
/// same axis with retardance `δ/k`, where `k` is the smallest count keeping
/// every electrode inside ±70 V. Remaining stages sit at their bias.
pub fn split_stages(
    r: &LinearRetarder,
    cal_per_stage: &[CalibrationParams],
    n: usize,
) -> Result<MultiStageCommand, PcmError> {
    if n == 0 || n > MAX_STAGE_COUNT {
        return Err(PcmError::InvalidStageCount(n));
    }
    if cal_per_stage.len() != n {
        return Err(PcmError::CalibrationCount {
            expected: n,
            got: cal_per_stage.len(),
        });
    }
    if r.is_identity() {
        return Ok(MultiStageCommand::identity(cal_per_stage));
    }
    for k in 1..=n {
        let part = r.divided(k as u32);
        let mut stages = Vec::with_capacity(n);
        let mut fits = true;
        for (i, cal) in cal_per_stage.iter().enumerate() {
            let retarder = if i < k { part } else { LinearRetarder::IDENTITY };
            let voltages = unchecked_voltages(&retarder, cal);
            if voltages.check_range().is_err() {
                fits = false;
                break;
            }
            stages.push(StageCommand { retarder, voltages });
        }
        if fits {
            return Ok(MultiStageCommand { stages, active: k });
        }
    }
    Err(PcmError::Unsatisfiable {
        delta: r.delta(),
        stages: n,
    })
}
