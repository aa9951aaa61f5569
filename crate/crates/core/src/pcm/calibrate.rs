//! Recovering a stage's constants from SOP readback of a probe beam.
//!
//! Four sweeps, each a least-squares line fit over `points` drive settings:
//!
//! 1. identity search: common-mode sweep along α = 0, pick the misalignment
//!    minimum nearest 0 V, refine it as the zero crossing of the signed
//!    rotation angle. Gives the mean bias.
//! 2. `V_π`: common-mode sweep along α = 0, rotation slope `2π/V_π`.
//! 3. `V_0`: common-mode sweep along α = π/2, rotation slope `π/V_0`.
//! 4. differential sweep along α = π/2 at a quarter-wave drive; the realized
//!    axis tilts with the differential error and crosses the commanded axis
//!    at `x = (V_a^b − V_c^b)/2`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::Vector3;

use super::{CalibrationParams, PcmError, PcmStagePlant, StageVoltages, V_MAX};
use crate::polarization::{
    misalignment, retarder_to_rotation, rotate, solve_retarder, wrap_angle, Sop,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationSweep {
    /// Drive points per line fit.
    pub points: usize,
    /// Maximum RMS residual (rad) accepted for each fit.
    pub fit_tol: f64,
    /// Largest electrode magnitude used while sweeping.
    pub v_limit: f64,
    /// Misalignment span (rad) the identity search must observe.
    pub min_observable: f64,
}

impl Default for CalibrationSweep {
    fn default() -> Self {
        Self {
            points: 64,
            fit_tol: 1e-3,
            v_limit: V_MAX - 1.0,
            min_observable: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub rms: f64,
}

impl LineFit {
    pub fn root(&self) -> f64 {
        -self.intercept / self.slope
    }
}

/// Ordinary least squares `y = intercept + slope·x`.
pub fn line_fit(xs: &[f64], ys: &[f64]) -> LineFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    LineFit {
        intercept,
        slope,
        rms: (ss / n).sqrt(),
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn unwrap_phase(xs: &mut [f64]) {
    for i in 1..xs.len() {
        let step = wrap_angle(xs[i] - xs[i - 1]);
        xs[i] = xs[i - 1] + step;
    }
}

struct Bench<'a, F> {
    plant: &'a mut PcmStagePlant,
    probe: Sop,
    readback: &'a mut F,
}

impl<F: FnMut(&Sop) -> Sop> Bench<'_, F> {
    fn measure(&mut self, alpha: f64, v: StageVoltages) -> Result<Sop, PcmError> {
        let r = self.plant.apply(alpha, &v)?;
        let out = rotate(&retarder_to_rotation(&r), &self.probe);
        Ok((self.readback)(&out))
    }

    /// Rotation angle about `expected_axis` (sign follows that axis).
    fn signed_rotation(&mut self, alpha: f64, v: StageVoltages, expected_axis: &Vector3<f64>) -> Result<f64, PcmError> {
        let m = self.measure(alpha, v)?;
        let r = solve_retarder(&self.probe, &m);
        let theta = wrap_angle(r.theta());
        Ok(if r.eigenmode().dot(expected_axis) < 0.0 {
            -theta
        } else {
            theta
        })
    }

    fn rotation_sweep(
        &mut self,
        alpha: f64,
        drives: &[f64],
        to_volts: impl Fn(f64) -> StageVoltages,
    ) -> Result<Vec<f64>, PcmError> {
        let axis = Vector3::new((0.5 * alpha).cos(), (0.5 * alpha).sin(), 0.0);
        let mut thetas = drives
            .iter()
            .map(|&x| self.signed_rotation(alpha, to_volts(x), &axis))
            .collect::<Result<Vec<_>, _>>()?;
        unwrap_phase(&mut thetas);
        Ok(thetas)
    }
}

fn check_fit(name: &str, fit: &LineFit, cfg: &CalibrationSweep) -> Result<(), PcmError> {
    if !(fit.rms <= cfg.fit_tol) {
        return Err(PcmError::CalibrationFailed(format!(
            "{name} fit residual {:.3e} rad exceeds {:.3e}",
            fit.rms, cfg.fit_tol
        )));
    }
    if !(fit.slope.abs() > 1e-9) {
        return Err(PcmError::CalibrationFailed(format!(
            "{name} sweep shows no rotation"
        )));
    }
    Ok(())
}

/// Estimates `V_π`, `V_0` and both biases of one stage.
///
/// `readback` models the polarimeter: it receives the true output SOP and
/// returns the measured one. The probe must not be an eigenmode of the
/// swept axes; `Sop::R` is ideal since it is normal to every equatorial axis.
/// The mean bias is assumed to lie within `V_π/2` of 0 V, which singles out
/// one of the periodic identity points.
pub fn calibrate_stage<F>(
    plant: &mut PcmStagePlant,
    probe: &Sop,
    cfg: &CalibrationSweep,
    readback: &mut F,
) -> Result<CalibrationParams, PcmError>
where
    F: FnMut(&Sop) -> Sop,
{
    if cfg.points < 3 {
        return Err(PcmError::CalibrationFailed("at least 3 sweep points required".into()));
    }
    let lim = cfg.v_limit.min(V_MAX);
    let n = cfg.points;
    let mut bench = Bench {
        plant,
        probe: *probe,
        readback,
    };
    let common = |m: f64| move |x: f64| StageVoltages::new(m + x, m + x);

    // 1. identity search
    let grid = linspace(-lim, lim, n);
    let mis = grid
        .iter()
        .map(|&x| bench.measure(0.0, StageVoltages::new(x, x)).map(|m| misalignment(&m, probe)))
        .collect::<Result<Vec<_>, _>>()?;
    let span = mis.iter().cloned().fold(0.0, f64::max) - mis.iter().cloned().fold(PI, f64::min);
    if span < cfg.min_observable {
        return Err(PcmError::CalibrationFailed(format!(
            "no observable rotation (span {span:.3e} rad); probe is an eigenmode of the swept axis"
        )));
    }
    let coarse = (1..n - 1)
        .filter(|&i| mis[i] <= mis[i - 1] && mis[i] <= mis[i + 1])
        .map(|i| grid[i])
        .min_by(|a, b| a.abs().total_cmp(&b.abs()))
        .ok_or_else(|| PcmError::CalibrationFailed("identity search found no minimum".into()))?;
    let h = 2.0 * lim / (n - 1) as f64;
    let fine = linspace((coarse - 2.0 * h).max(-lim), (coarse + 2.0 * h).min(lim), n);
    let thetas = bench.rotation_sweep(0.0, &fine, common(0.0))?;
    let fit = line_fit(&fine, &thetas);
    check_fit("identity search", &fit, cfg)?;
    let mean_bias = fit.root();
    if !(mean_bias.abs() < lim) {
        return Err(PcmError::CalibrationFailed(format!("mean bias {mean_bias} out of range")));
    }

    // 2. V_π along α = 0
    let reach = lim - mean_bias.abs();
    let drives = linspace(-reach, reach, n);
    let thetas = bench.rotation_sweep(0.0, &drives, common(mean_bias))?;
    let fit = line_fit(&drives, &thetas);
    check_fit("V_pi", &fit, cfg)?;
    let v_pi = TAU / fit.slope.abs();

    // 3. V_0 along α = π/2
    let thetas = bench.rotation_sweep(FRAC_PI_2, &drives, common(mean_bias))?;
    let fit = line_fit(&drives, &thetas);
    check_fit("V_0", &fit, cfg)?;
    let v_0 = PI / fit.slope.abs();

    // 4. differential sweep at a quarter-wave common-mode drive
    let m = mean_bias + 0.5 * v_0;
    let reach = (lim - m.abs()).min(20.0);
    if reach < 1.0 {
        return Err(PcmError::CalibrationFailed("no headroom for differential sweep".into()));
    }
    let drives = linspace(-reach, reach, n);
    let mut tilts = Vec::with_capacity(n);
    for &x in &drives {
        let meas = bench.measure(FRAC_PI_2, StageVoltages::new(m + x, m - x))?;
        let r = solve_retarder(probe, &meas);
        tilts.push(wrap_angle(r.alpha() - FRAC_PI_2));
    }
    unwrap_phase(&mut tilts);
    let fit = line_fit(&drives, &tilts);
    if !(fit.rms <= cfg.fit_tol) {
        return Err(PcmError::CalibrationFailed(format!(
            "differential fit residual {:.3e} rad exceeds {:.3e}",
            fit.rms, cfg.fit_tol
        )));
    }
    // a stage without differential sensitivity only ever sees the mean bias
    let half_diff = if fit.slope.abs() > 1e-9 { fit.root() } else { 0.0 };

    bench.plant.reset();
    CalibrationParams::new(v_pi, v_0, mean_bias + half_diff, mean_bias - half_diff)
        .map_err(|e| PcmError::CalibrationFailed(e.to_string()))
}
