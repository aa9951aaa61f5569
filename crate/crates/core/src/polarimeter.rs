//! Polarimeter signal chain: analog front end, ADC, then the digital blocks
//! from integer codes to a normalized SOP and screen pixels.
//!
//! ```text
//! front_end → adc_sample → codes_to_volts → volts_to_stokes → normalize
//!           → isometric_project → to_pixels
//! ```

use std::io::Write;

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polarization::{normalize, PolarizationError, Sop, StokesVector, DOP_MIN};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Polarization(#[from] PolarizationError),
    #[error("light depolarized (dop = {dop:.3e}); SOP indeterminate")]
    DepolarizedLight { dop: f64 },
    #[error("singular calibration matrix (condition number {0:.3e})")]
    SingularCalibration(f64),
    #[error("ADC bit depth {0} outside 8..=16")]
    InvalidBits(u32),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("trace output: {0}")]
    Io(String),
}

/// Channel order: total, rectilinear, diagonal, circular.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorVoltages {
    pub v: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcFrame {
    pub codes: [u32; 4],
    pub bits: u32,
    pub v_ref: f64,
}

impl AdcFrame {
    pub fn full_scale(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontEndConfig {
    /// Volts per unit of optical intensity.
    pub responsivity: f64,
    /// Additive Gaussian noise per channel, volts.
    pub noise_sigma: f64,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        Self {
            responsivity: 4.0,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdcConfig {
    pub bits: u32,
    pub v_ref: f64,
    /// Skip quantization: the digital chain sees the clamped analog voltages.
    pub bypass: bool,
}

impl Default for AdcConfig {
    fn default() -> Self {
        Self {
            bits: 12,
            v_ref: 5.0,
            bypass: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreenConfig {
    pub width: u32,
    pub height: u32,
    pub scale: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            scale: 100.0,
            offset_x: 320.0,
            offset_y: 240.0,
        }
    }
}

/// Maps detector volts to the un-normalized Stokes vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationMatrix(Matrix4<f64>);

impl CalibrationMatrix {
    pub const MAX_CONDITION: f64 = 1e6;

    pub fn new(m: Matrix4<f64>) -> Result<Self, PipelineError> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(PipelineError::SingularCalibration(f64::INFINITY));
        }
        let sv = m.singular_values();
        let max = sv.max();
        let min = sv.min();
        let cond = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(cond < Self::MAX_CONDITION) {
            return Err(PipelineError::SingularCalibration(cond));
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: [[f64; 4]; 4]) -> Result<Self, PipelineError> {
        Self::new(Matrix4::from_fn(|i, j| rows[i][j]))
    }

    /// Inverse of the ideal front end `V = r·(S0, (S0+S1)/2, (S0+S2)/2, (S0+S3)/2)`.
    pub fn ideal(responsivity: f64) -> Result<Self, PipelineError> {
        if !(responsivity > 0.0) {
            return Err(PipelineError::InvalidConfig(format!(
                "responsivity {responsivity} must be positive"
            )));
        }
        let k = 1.0 / responsivity;
        Self::new(Matrix4::new(
            k, 0.0, 0.0, 0.0, //
            -k, 2.0 * k, 0.0, 0.0, //
            -k, 0.0, 2.0 * k, 0.0, //
            -k, 0.0, 0.0, 2.0 * k,
        ))
    }

    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let mut rows = [[0.0; 4]; 4];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = self.0[(i, j)];
            }
        }
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayPoint {
    pub px: i64,
    pub py: i64,
    pub in_bounds: bool,
}

/// Ideal projective intensities `I_k = I0(1 + s_k)/2` plus the total
/// channel, scaled by the responsivity, with optional Gaussian noise and
/// clamped into `[0, v_ref]`.
pub fn front_end<R: Rng + ?Sized>(
    s: &Sop,
    intensity: f64,
    cfg: &FrontEndConfig,
    v_ref: f64,
    rng: &mut R,
) -> Result<DetectorVoltages, PipelineError> {
    if !(intensity >= 0.0) || !intensity.is_finite() {
        return Err(PipelineError::InvalidConfig(format!("intensity {intensity}")));
    }
    let ideal = [
        intensity,
        0.5 * intensity * (1.0 + s.x()),
        0.5 * intensity * (1.0 + s.y()),
        0.5 * intensity * (1.0 + s.z()),
    ];
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).map_err(|e| PipelineError::InvalidConfig(e.to_string()))?)
    } else {
        None
    };
    let mut v = [0.0; 4];
    for (out, i) in v.iter_mut().zip(ideal) {
        let n = noise.map_or(0.0, |d| d.sample(rng));
        *out = (cfg.responsivity * i + n).clamp(0.0, v_ref);
    }
    Ok(DetectorVoltages { v })
}

pub fn adc_sample(dv: &DetectorVoltages, bits: u32, v_ref: f64) -> Result<AdcFrame, PipelineError> {
    if !(8..=16).contains(&bits) {
        return Err(PipelineError::InvalidBits(bits));
    }
    if !(v_ref > 0.0) {
        return Err(PipelineError::InvalidConfig(format!("v_ref {v_ref}")));
    }
    let full = ((1u32 << bits) - 1) as f64;
    let mut codes = [0u32; 4];
    for (c, v) in codes.iter_mut().zip(dv.v) {
        let x = if v.is_nan() { 0.0 } else { v.clamp(0.0, v_ref) };
        *c = (x / v_ref * full).round() as u32;
    }
    Ok(AdcFrame { codes, bits, v_ref })
}

/// Integer codes back to volts (the "Int to Float" and "AD to Volts" blocks).
pub fn codes_to_volts(f: &AdcFrame) -> [f64; 4] {
    let full = f.full_scale() as f64;
    f.codes.map(|c| c as f64 * f.v_ref / full)
}

/// Largest reconstruction error of an unclamped voltage: half a code step.
pub fn quantization_bound(bits: u32, v_ref: f64) -> f64 {
    v_ref / (2.0 * ((1u64 << bits) as f64 - 1.0))
}

pub fn volts_to_stokes(v: &[f64; 4], cm: &CalibrationMatrix) -> StokesVector {
    let s = cm.0 * Vector4::from(*v);
    StokesVector::new(s[0], s[1], s[2], s[3])
}

const SQRT3_2: f64 = 0.866_025_403_784_438_6;

/// Isometric axonometry `[[√3/2, −√3/2, 0], [1/2, 1/2, 1]]`.
pub fn isometric_project(s: &Sop) -> (f64, f64) {
    let u = SQRT3_2 * s.x() - SQRT3_2 * s.y();
    let v = 0.5 * s.x() + 0.5 * s.y() + s.z();
    (u, v)
}

/// Screen y grows downward.
pub fn to_pixels(uv: (f64, f64), screen: &ScreenConfig) -> DisplayPoint {
    let px = (screen.scale * uv.0 + screen.offset_x).round() as i64;
    let py = (-screen.scale * uv.1 + screen.offset_y).round() as i64;
    let in_bounds = px >= 0 && py >= 0 && px < screen.width as i64 && py < screen.height as i64;
    DisplayPoint { px, py, in_bounds }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Optical intensity reaching the polarimeter, arbitrary units.
    pub intensity: f64,
    pub front_end: FrontEndConfig,
    pub adc: AdcConfig,
    /// Row-major volts→Stokes matrix; `None` uses the ideal inverse front end.
    pub calibration_matrix: Option<[[f64; 4]; 4]>,
    pub screen: ScreenConfig,
    pub dop_min: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            intensity: 1.0,
            front_end: FrontEndConfig::default(),
            adc: AdcConfig::default(),
            calibration_matrix: None,
            screen: ScreenConfig::default(),
            dop_min: DOP_MIN,
        }
    }
}

impl PipelineConfig {
    pub fn with_bits(mut self, bits: u32) -> Self {
        self.adc.bits = bits;
        self
    }

    /// No noise and no quantization.
    pub fn ideal() -> Self {
        Self {
            adc: AdcConfig {
                bypass: true,
                ..AdcConfig::default()
            },
            ..Self::default()
        }
    }
}

/// Everything the chain produced for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Measurement {
    pub frame: AdcFrame,
    pub volts: [f64; 4],
    pub stokes: StokesVector,
    pub sop: Sop,
    pub dop: f64,
    pub point: DisplayPoint,
}

/// A validated, immutable signal chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    cfg: PipelineConfig,
    cm: CalibrationMatrix,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        if !(8..=16).contains(&cfg.adc.bits) {
            return Err(PipelineError::InvalidBits(cfg.adc.bits));
        }
        if !(cfg.adc.v_ref > 0.0) || !(cfg.intensity >= 0.0) || !(cfg.front_end.noise_sigma >= 0.0) {
            return Err(PipelineError::InvalidConfig("v_ref, intensity and noise must be valid".into()));
        }
        if cfg.screen.width == 0 || cfg.screen.height == 0 {
            return Err(PipelineError::InvalidConfig("screen width and height must be positive".into()));
        }
        let cm = match cfg.calibration_matrix {
            Some(rows) => CalibrationMatrix::from_rows(rows)?,
            None => CalibrationMatrix::ideal(cfg.front_end.responsivity)?,
        };
        Ok(Self { cfg, cm })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn calibration(&self) -> &CalibrationMatrix {
        &self.cm
    }

    /// Runs the full chain on one SOP.
    pub fn measure<R: Rng + ?Sized>(&self, s: &Sop, rng: &mut R) -> Result<Measurement, PipelineError> {
        let adc = &self.cfg.adc;
        let dv = front_end(s, self.cfg.intensity, &self.cfg.front_end, adc.v_ref, rng)?;
        let frame = adc_sample(&dv, adc.bits, adc.v_ref)?;
        let volts = if adc.bypass { dv.v } else { codes_to_volts(&frame) };
        let stokes = volts_to_stokes(&volts, &self.cm);
        let n = normalize(&stokes, self.cfg.dop_min)?;
        let sop = n.sop.ok_or(PipelineError::DepolarizedLight { dop: n.dop })?;
        let point = to_pixels(isometric_project(&sop), &self.cfg.screen);
        Ok(Measurement {
            frame,
            volts,
            stokes,
            sop,
            dop: n.dop,
            point,
        })
    }
}

/// Convenience wrapper returning `(measured SOP, dop, pixel)`.
pub fn pipeline<R: Rng + ?Sized>(
    s: &Sop,
    cfg: &PipelineConfig,
    rng: &mut R,
) -> Result<(Sop, f64, DisplayPoint), PipelineError> {
    let m = Pipeline::new(*cfg)?.measure(s, rng)?;
    Ok((m.sop, m.dop, m.point))
}

/// CSV trace of pipeline samples:
/// `tick, code0..code3, v0..v3, S0..S3, s1..s3, dop, px, py`.
pub struct PipelineTrace<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> PipelineTrace<W> {
    pub fn new(out: W) -> Result<Self, PipelineError> {
        let mut writer = csv::Writer::from_writer(out);
        writer
            .write_record([
                "tick", "code0", "code1", "code2", "code3", "v0", "v1", "v2", "v3", "S0", "S1", "S2",
                "S3", "s1", "s2", "s3", "dop", "px", "py",
            ])
            .map_err(|e| PipelineError::Io(e.to_string()))?;
        Ok(Self { writer })
    }

    pub fn record(&mut self, tick: u64, m: &Measurement) -> Result<(), PipelineError> {
        let mut row = Vec::with_capacity(19);
        row.push(tick.to_string());
        row.extend(m.frame.codes.iter().map(|c| c.to_string()));
        row.extend(m.volts.iter().map(|v| v.to_string()));
        row.extend(m.stokes.as_array().iter().map(|v| v.to_string()));
        row.extend(m.sop.to_array().iter().map(|v| v.to_string()));
        row.push(m.dop.to_string());
        row.push(m.point.px.to_string());
        row.push(m.point.py.to_string());
        self.writer
            .write_record(&row)
            .map_err(|e| PipelineError::Io(e.to_string()))
    }

    pub fn finish(mut self) -> Result<W, PipelineError> {
        self.writer.flush().map_err(|e| PipelineError::Io(e.to_string()))?;
        self.writer
            .into_inner()
            .map_err(|e| PipelineError::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polarization::misalignment;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    fn unit_gain() -> FrontEndConfig {
        FrontEndConfig {
            responsivity: 1.0,
            noise_sigma: 0.0,
        }
    }

    #[test]
    fn front_end_examples() {
        let v = front_end(&Sop::H, 1.0, &unit_gain(), 5.0, &mut rng()).unwrap();
        assert_eq!(v.v, [1.0, 1.0, 0.5, 0.5]);
        let v = front_end(&Sop::R, 1.0, &unit_gain(), 5.0, &mut rng()).unwrap();
        assert_eq!(v.v, [1.0, 0.5, 0.5, 1.0]);
        let s = Sop::new(0.6, 0.0, 0.8).unwrap();
        let v = front_end(&s, 1.0, &unit_gain(), 5.0, &mut rng()).unwrap();
        for (a, b) in v.v.iter().zip([1.0, 0.8, 0.5, 0.9]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn front_end_clamps() {
        let cfg = FrontEndConfig { responsivity: 10.0, noise_sigma: 0.0 };
        let v = front_end(&Sop::H, 1.0, &cfg, 5.0, &mut rng()).unwrap();
        assert_eq!(v.v, [5.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn adc_examples() {
        let f = adc_sample(&DetectorVoltages { v: [0.0, 6.0, 2.5, 5.0] }, 12, 5.0).unwrap();
        assert_eq!(f.codes, [0, 4095, 2048, 4095]);
        assert!(matches!(
            adc_sample(&DetectorVoltages { v: [0.0; 4] }, 7, 5.0),
            Err(PipelineError::InvalidBits(7))
        ));
        assert!(adc_sample(&DetectorVoltages { v: [0.0; 4] }, 17, 5.0).is_err());
    }

    #[test]
    fn codes_to_volts_examples() {
        let v = codes_to_volts(&AdcFrame { codes: [0, 4095, 2048, 1], bits: 12, v_ref: 5.0 });
        assert_eq!(v[0], 0.0);
        assert_abs_diff_eq!(v[1], 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[2], 2.50061, epsilon = 5e-6);
        assert_abs_diff_eq!(v[2], 2048.0 * 5.0 / 4095.0, epsilon = 1e-15);
    }

    #[test]
    fn calibration_matrix_checks() {
        let s = volts_to_stokes(&[1.0, 0.0, 0.0, 0.0], &CalibrationMatrix::identity());
        assert_eq!(s, StokesVector::new(1.0, 0.0, 0.0, 0.0));
        assert!(matches!(
            CalibrationMatrix::new(Matrix4::zeros()),
            Err(PipelineError::SingularCalibration(_))
        ));
        let mut m = Matrix4::identity();
        m[(3, 3)] = 1e-7;
        assert!(CalibrationMatrix::new(m).is_err());
    }

    #[test]
    fn ideal_matrix_inverts_front_end() {
        let s = Sop::new(0.6, 0.0, 0.8).unwrap();
        let fe = FrontEndConfig { responsivity: 2.0, noise_sigma: 0.0 };
        let v = front_end(&s, 1.5, &fe, 5.0, &mut rng()).unwrap();
        let st = volts_to_stokes(&v.v, &CalibrationMatrix::ideal(2.0).unwrap());
        for (a, b) in st.as_array().iter().zip([1.5, 0.9, 0.0, 1.2]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn dark_input_is_non_positive_intensity() {
        let st = volts_to_stokes(&[0.0; 4], &CalibrationMatrix::ideal(4.0).unwrap());
        assert_eq!(st.s0, 0.0);
        let cfg = PipelineConfig { intensity: 0.0, ..Default::default() };
        assert!(matches!(
            pipeline(&Sop::H, &cfg, &mut rng()),
            Err(PipelineError::Polarization(PolarizationError::NonPositiveIntensity(_)))
        ));
    }

    #[test]
    fn isometric_examples() {
        assert_eq!(isometric_project(&Sop::R), (0.0, 1.0));
        let (u, v) = isometric_project(&Sop::H);
        assert_abs_diff_eq!(u, 3f64.sqrt() / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
        let (u, v) = isometric_project(&Sop::D);
        assert_abs_diff_eq!(u, -(3f64.sqrt()) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn pixel_examples() {
        let screen = ScreenConfig::default();
        assert_eq!(to_pixels((0.0, 0.0), &screen), DisplayPoint { px: 320, py: 240, in_bounds: true });
        assert_eq!(to_pixels((0.0, 1.0), &screen), DisplayPoint { px: 320, py: 140, in_bounds: true });
        let p = to_pixels((4.0, -3.0), &screen);
        assert_eq!((p.px, p.py, p.in_bounds), (720, 540, false));
    }

    #[test]
    fn noiseless_chain_recovers_h() {
        let (m, dop, _) = pipeline(&Sop::H, &PipelineConfig::default(), &mut rng()).unwrap();
        assert!(misalignment(&m, &Sop::H) < 2e-3);
        assert!(dop <= 1.0 + 4.0 * quantization_bound(12, 5.0) * 2.0);
    }

    #[test]
    fn bypass_chain_is_exact() {
        let s = Sop::new(0.6, 0.0, 0.8).unwrap();
        let (m, dop, _) = pipeline(&s, &PipelineConfig::ideal(), &mut rng()).unwrap();
        assert!(misalignment(&m, &s) < 1e-14);
        assert_abs_diff_eq!(dop, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn trace_rows() {
        let p = Pipeline::new(PipelineConfig::default()).unwrap();
        let m = p.measure(&Sop::R, &mut rng()).unwrap();
        let mut t = PipelineTrace::new(Vec::new()).unwrap();
        t.record(7, &m).unwrap();
        let out = String::from_utf8(t.finish().unwrap()).unwrap();
        let lines: Vec<_> = out.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("tick,code0"));
        assert_eq!(lines[1].split(',').count(), 19);
        assert!(lines[1].starts_with("7,3276,"));
    }
}
