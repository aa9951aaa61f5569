//! Loop configuration, one TOML file:
//!
//! ```toml
//! schema = 1
//! tick_dt_us = 1.0
//! max_ticks = 2000
//! seed = 1
//! target = [0.0, 0.0, 1.0]
//! reference_in = [1.0, 0.0, 0.0]
//! stage_count = 3
//!
//! [driver]
//! profile = "default"
//!
//! [drift]
//! sigma = 0.001
//!
//! [controller]
//! calibration = "ideal"   # or a path to a calibration file
//! ```
//!
//! Every key is optional except `schema`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LoopError;
use crate::driver::{DacConfig, DriverProfile};
use crate::pcm::{read_calibration, CalibrationParams, DEFAULT_AXIS_SKEW, DEFAULT_STAGE_COUNT, MAX_STAGE_COUNT};
use crate::polarimeter::{AdcConfig, Pipeline, PipelineConfig};
use crate::polarization::{RotationQ, Sop};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverSection {
    /// Name of a built-in profile or of an entry in `profiles`.
    pub profile: String,
    pub profiles: Vec<DriverProfile>,
}

impl Default for DriverSection {
    fn default() -> Self {
        Self {
            profile: "default".into(),
            profiles: Vec::new(),
        }
    }
}

impl DriverSection {
    /// Looks in the configured profiles first, then the built-ins.
    pub fn lookup(&self, name: &str) -> Result<DriverProfile, LoopError> {
        let p = match self.profiles.iter().find(|p| p.name == name) {
            Some(p) => p.clone(),
            None => DriverProfile::named(name)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn active(&self) -> Result<DriverProfile, LoopError> {
        self.lookup(&self.profile)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    /// rad/√tick.
    pub sigma: f64,
    /// Initial channel rotation.
    pub initial_axis: [f64; 3],
    pub initial_angle: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            initial_axis: [0.6, 0.8, 0.0],
            initial_angle: 0.7,
        }
    }
}

impl DriftConfig {
    pub fn initial_rotation(&self) -> Result<RotationQ, LoopError> {
        RotationQ::from_axis_angle(self.initial_axis.into(), self.initial_angle)
            .map_err(|e| LoopError::ConfigInvalid(format!("drift.initial_axis: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    /// Hidden per-stage constants; a single entry applies to every stage.
    pub stages: Vec<CalibrationParams>,
    pub axis_skew: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            stages: vec![CalibrationParams::DEMO],
            axis_skew: DEFAULT_AXIS_SKEW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// `"ideal"` (the plant's true constants) or a calibration file path.
    pub calibration: String,
    /// Re-solve every tick; `false` solves once at tick 0 and holds.
    pub feedback: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            calibration: "ideal".into(),
            feedback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub schema: u32,
    pub tick_dt_us: f64,
    pub max_ticks: u64,
    pub seed: u64,
    pub target: Sop,
    pub reference_in: Sop,
    pub stage_count: usize,
    /// Tilt of the reference relative to the quantum signal at the loop input.
    pub alignment_error_rad: f64,
    pub settle_threshold_rad: f64,
    /// Frame decimation for live display.
    pub display_rate_hz: f64,
    pub driver: DriverSection,
    pub dac: DacConfig,
    pub drift: DriftConfig,
    pub pipeline: PipelineConfig,
    pub plant: PlantConfig,
    pub controller: ControllerConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA,
            tick_dt_us: 1.0,
            max_ticks: 2000,
            seed: 1,
            target: Sop::R,
            reference_in: Sop::H,
            stage_count: DEFAULT_STAGE_COUNT,
            alignment_error_rad: 0.0,
            settle_threshold_rad: 1e-2,
            display_rate_hz: 30.0,
            driver: DriverSection::default(),
            dac: DacConfig {
                bits: 16,
                v_ref: 5.0,
                bipolar: true,
                bypass: false,
            },
            drift: DriftConfig::default(),
            pipeline: PipelineConfig::default(),
            plant: PlantConfig::default(),
            controller: ControllerConfig::default(),
        }
    }
}

impl LoopConfig {
    /// Unquantized DAC and ADC, no detector noise, no drift.
    pub fn ideal() -> Self {
        Self {
            dac: DacConfig {
                bypass: true,
                ..Self::default().dac
            },
            pipeline: PipelineConfig {
                adc: AdcConfig {
                    bypass: true,
                    ..AdcConfig::default()
                },
                ..PipelineConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, LoopError> {
        let cfg: LoopConfig =
            toml::from_str(text).map_err(|e| LoopError::ConfigInvalid(e.to_string()))?;
        if cfg.schema != SCHEMA {
            return Err(LoopError::ConfigInvalid(format!(
                "unsupported schema {} (expected {SCHEMA})",
                cfg.schema
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative calibration path is resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, LoopError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LoopError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.controller.calibration != "ideal" {
            let p = PathBuf::from(&cfg.controller.calibration);
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.controller.calibration = dir.join(p).to_string_lossy().into_owned();
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), LoopError> {
        let bad = |m: String| Err(LoopError::ConfigInvalid(m));
        if !(self.tick_dt_us > 0.0) || !self.tick_dt_us.is_finite() {
            return bad(format!("tick_dt_us = {} must be > 0", self.tick_dt_us));
        }
        if self.stage_count == 0 || self.stage_count > MAX_STAGE_COUNT {
            return bad(format!("stage_count = {} outside 1..={MAX_STAGE_COUNT}", self.stage_count));
        }
        if !self.alignment_error_rad.is_finite() {
            return bad("alignment_error_rad must be finite".into());
        }
        if !(self.settle_threshold_rad > 0.0) {
            return bad("settle_threshold_rad must be > 0".into());
        }
        if !(self.display_rate_hz > 0.0) {
            return bad("display_rate_hz must be > 0".into());
        }
        if !(self.drift.sigma >= 0.0) || !self.drift.sigma.is_finite() {
            return bad(format!("drift.sigma = {} must be >= 0", self.drift.sigma));
        }
        self.drift.initial_rotation()?;
        self.driver.active()?;
        self.dac.validate()?;
        Pipeline::new(self.pipeline)?;
        self.plant_params()?;
        if !self.plant.axis_skew.is_finite() {
            return bad("plant.axis_skew must be finite".into());
        }
        Ok(())
    }

    fn per_stage(&self, what: &str, v: &[CalibrationParams]) -> Result<Vec<CalibrationParams>, LoopError> {
        for p in v {
            p.validate()?;
        }
        match v.len() {
            1 => Ok(vec![v[0]; self.stage_count]),
            n if n == self.stage_count => Ok(v.to_vec()),
            n => Err(LoopError::ConfigInvalid(format!(
                "{what}: {n} stages given, stage_count is {}",
                self.stage_count
            ))),
        }
    }

    pub fn plant_params(&self) -> Result<Vec<CalibrationParams>, LoopError> {
        self.per_stage("plant.stages", &self.plant.stages)
    }

    /// What the controller believes about the stages.
    pub fn controller_params(&self) -> Result<Vec<CalibrationParams>, LoopError> {
        if self.controller.calibration == "ideal" {
            return self.plant_params();
        }
        let stages = read_calibration(Path::new(&self.controller.calibration))?;
        self.per_stage("controller.calibration", &stages)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        LoopConfig::default().validate().unwrap();
        LoopConfig::ideal().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = LoopConfig::default();
        let back = LoopConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_file() {
        let cfg = LoopConfig::from_toml("schema = 1\ntick_dt_us = 2.5\n[drift]\nsigma = 0.01\n").unwrap();
        assert_eq!(cfg.tick_dt_us, 2.5);
        assert_eq!(cfg.drift.sigma, 0.01);
        assert_eq!(cfg.stage_count, DEFAULT_STAGE_COUNT);
    }

    #[test]
    fn rejects_invalid() {
        assert!(LoopConfig::from_toml("schema = 2\n").is_err());
        assert!(LoopConfig::from_toml("schema = 1\ntick_dt_us = 0\n").is_err());
        assert!(LoopConfig::from_toml("schema = 1\ntarget = [1.0, 1.0, 0.0]\n").is_err());
        assert!(LoopConfig::from_toml("schema = 1\nbogus = 3\n").is_err());
        assert!(LoopConfig::from_toml("schema = 1\n[driver]\nprofile = \"nope\"\n").is_err());
        assert!(LoopConfig::from_toml("schema = 1\n[drift]\nsigma = -1.0\n").is_err());
    }

    #[test]
    fn custom_profile() {
        let text = "schema = 1\n[driver]\nprofile = \"slow\"\n[[driver.profiles]]\nname = \"slow\"\ngain = 14.0\nslew_rate = 0.5\nsupply = 70.0\nsettle_band = 0.01\npre_amp_gain = 1.0\n";
        let cfg = LoopConfig::from_toml(text).unwrap();
        assert_eq!(cfg.driver.active().unwrap().slew_rate, 0.5);
    }

    #[test]
    fn stage_broadcast() {
        let cfg = LoopConfig { stage_count: 4, ..Default::default() };
        assert_eq!(cfg.plant_params().unwrap().len(), 4);
        assert_eq!(cfg.controller_params().unwrap(), cfg.plant_params().unwrap());
    }
}
