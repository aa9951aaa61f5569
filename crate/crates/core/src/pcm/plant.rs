use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::{CalibrationParams, MultiStageCommand, PcmError, StageVoltages};
use crate::polarization::{retarder_to_rotation, wrap_unit_interval, LinearRetarder, RotationQ};

/// Minimum |drive slope| (volts per unit retardance) the plant accepts.
pub const DEFAULT_DEN_EPS: f64 = 1e-3;

/// Axis rotation (rad of α) per volt of differential electrode error.
pub const DEFAULT_AXIS_SKEW: f64 = 0.05;

/// Simulated physical stage with hidden device constants.
///
/// Forward model for a command with eigenmode `α`:
///
/// ```text
/// c = ((V_a − V_a^b) + (V_c − V_c^b)) / 2      common-mode drive
/// d = ((V_a − V_a^b) − (V_c − V_c^b)) / 2      differential drive
/// δ = c / (2·V_0·sin α − V_π·cos α)             wrapped into [0, 1)
/// α_real = α + skew·d                          wrapped into [0, 2π)
/// ```
///
/// Commands built from the true constants always have `d = 0`, so the plant
/// realizes them exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcmStagePlant {
    true_params: CalibrationParams,
    axis_skew: f64,
    den_eps: f64,
    realized: LinearRetarder,
}

impl PcmStagePlant {
    pub fn new(true_params: CalibrationParams) -> Self {
        Self {
            true_params,
            axis_skew: DEFAULT_AXIS_SKEW,
            den_eps: DEFAULT_DEN_EPS,
            realized: LinearRetarder::IDENTITY,
        }
    }

    pub fn with_axis_skew(mut self, skew: f64) -> Self {
        self.axis_skew = skew;
        self
    }

    pub fn with_den_eps(mut self, eps: f64) -> Self {
        self.den_eps = eps;
        self
    }

    /// The hidden constants. Only tests and the simulator harness should look.
    pub fn true_params(&self) -> &CalibrationParams {
        &self.true_params
    }

    pub fn realized(&self) -> LinearRetarder {
        self.realized
    }

    pub fn rotation(&self) -> RotationQ {
        retarder_to_rotation(&self.realized)
    }

    /// Drives the electrodes; on error the realized state is left unchanged.
    pub fn apply(&mut self, alpha_cmd: f64, v: &StageVoltages) -> Result<LinearRetarder, PcmError> {
        let r = self.forward(alpha_cmd, v)?;
        self.realized = r;
        Ok(r)
    }

    /// Forward model without touching the state.
    pub fn forward(&self, alpha_cmd: f64, v: &StageVoltages) -> Result<LinearRetarder, PcmError> {
        v.check_range()?;
        let p = &self.true_params;
        let den = p.drive_slope(alpha_cmd);
        if !(den.abs() >= self.den_eps) {
            return Err(PcmError::DegenerateDrive { denominator: den });
        }
        let ea = v.v_a - p.v_bias_a;
        let ec = v.v_c - p.v_bias_c;
        let common = 0.5 * (ea + ec);
        let diff = 0.5 * (ea - ec);
        let delta = wrap_unit_interval(common / den);
        let alpha = wrap_unit_interval((alpha_cmd + self.axis_skew * diff) / TAU) * TAU;
        LinearRetarder::new(alpha, delta).map_err(|e| PcmError::InvalidCalibration(e.to_string()))
    }

    pub fn reset(&mut self) {
        self.realized = LinearRetarder::IDENTITY;
    }
}

/// A stack of stages; light traverses stage 0 first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcmPlant {
    pub stages: Vec<PcmStagePlant>,
}

impl PcmPlant {
    pub fn new(stages: Vec<PcmStagePlant>) -> Self {
        Self { stages }
    }

    pub fn uniform(params: CalibrationParams, n: usize) -> Self {
        Self::new(vec![PcmStagePlant::new(params); n])
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn true_params(&self) -> Vec<CalibrationParams> {
        self.stages.iter().map(|s| *s.true_params()).collect()
    }

    /// Applies a full command; every stage is attempted and the first error
    /// is returned. Stages that fail keep their previous state.
    pub fn apply_command(&mut self, cmd: &MultiStageCommand) -> Result<(), PcmError> {
        let mut first_err = None;
        for (stage, c) in self.stages.iter_mut().zip(&cmd.stages) {
            if let Err(e) = stage.apply(c.alpha(), &c.voltages) {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }

    pub fn rotation(&self) -> RotationQ {
        self.stages
            .iter()
            .fold(RotationQ::IDENTITY, |acc, s| s.rotation() * acc)
    }

    pub fn reset(&mut self) {
        self.stages.iter_mut().for_each(PcmStagePlant::reset);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcm::{retarder_to_voltages, split_stages};
    use crate::polarization::{misalignment, rotate, Sop};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn bias_voltages_realize_identity() {
        let mut p = PcmStagePlant::new(CalibrationParams::DEMO);
        let r = p.apply(0.7, &CalibrationParams::DEMO.bias_voltages()).unwrap();
        assert_eq!(r.delta(), 0.0);
    }

    #[test]
    fn exact_calibration_round_trips() {
        let cal = CalibrationParams::DEMO;
        let mut p = PcmStagePlant::new(cal);
        let cmd = LinearRetarder::new(1.3, 0.31).unwrap();
        let v = retarder_to_voltages(&cmd, &cal).unwrap();
        let r = p.apply(cmd.alpha(), &v).unwrap();
        assert_abs_diff_eq!(r.delta(), cmd.delta(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.alpha(), cmd.alpha(), epsilon = 1e-12);
    }

    #[test]
    fn v0_mismatch_scales_retardance() {
        let est = CalibrationParams::DEMO;
        let truth = CalibrationParams { v_0: est.v_0 * 1.1, ..est };
        let mut p = PcmStagePlant::new(truth);
        let cmd = LinearRetarder::new(FRAC_PI_2, 0.4).unwrap();
        let v = retarder_to_voltages(&cmd, &est).unwrap();
        let r = p.apply(cmd.alpha(), &v).unwrap();
        // δ_real = 2·v0·δ / (2·1.1·v0), the cos term vanishes at α = π/2
        assert_abs_diff_eq!(r.delta(), 0.4 / 1.1, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_drive_rejected() {
        let cal = CalibrationParams::DEMO;
        // 2·V0·sin α = Vπ·cos α
        let alpha = (cal.v_pi / (2.0 * cal.v_0)).atan();
        let mut p = PcmStagePlant::new(cal);
        let before = p.realized();
        let err = p.apply(alpha, &StageVoltages::new(10.0, 10.0)).unwrap_err();
        assert!(matches!(err, PcmError::DegenerateDrive { .. }));
        assert_eq!(p.realized(), before);
    }

    #[test]
    fn out_of_range_rejected() {
        let mut p = PcmStagePlant::new(CalibrationParams::DEMO);
        assert!(matches!(
            p.apply(0.0, &StageVoltages::new(0.0, -70.5)),
            Err(PcmError::VoltageRangeExceeded { electrode: 'c', .. })
        ));
    }

    #[test]
    fn differential_error_skews_axis() {
        let cal = CalibrationParams::DEMO;
        let p = PcmStagePlant::new(cal);
        let v = StageVoltages::new(cal.v_bias_a + 11.0, cal.v_bias_c + 9.0);
        let r = p.forward(FRAC_PI_2, &v).unwrap();
        assert_abs_diff_eq!(r.alpha(), FRAC_PI_2 + DEFAULT_AXIS_SKEW, epsilon = 1e-12);
        assert_abs_diff_eq!(r.delta(), 10.0 / (2.0 * cal.v_0), epsilon = 1e-12);
    }

    #[test]
    fn negative_drive_wraps_retardance() {
        let cal = CalibrationParams::DEMO;
        let p = PcmStagePlant::new(cal);
        let v = StageVoltages::new(cal.v_bias_a - 7.0, cal.v_bias_c - 7.0);
        let r = p.forward(FRAC_PI_2, &v).unwrap();
        assert_abs_diff_eq!(r.delta(), 1.0 - 7.0 / 70.0, epsilon = 1e-12);
    }

    #[test]
    fn multi_stage_plant_matches_command() {
        let cal = CalibrationParams { v_pi: 150.0, v_0: 10.0, v_bias_a: 0.0, v_bias_c: 0.0 };
        let r = LinearRetarder::new(0.0, 0.9).unwrap();
        let cmd = split_stages(&r, &[cal; 3], 3).unwrap();
        let mut plant = PcmPlant::uniform(cal, 3);
        plant.apply_command(&cmd).unwrap();
        let s = Sop::R;
        let a = rotate(&plant.rotation(), &s);
        let b = rotate(&retarder_to_rotation(&r), &s);
        assert!(misalignment(&a, &b) < 1e-12);
    }
}
