//! Human-editable calibration file.
//!
//! ```toml
//! schema = 1
//!
//! [[stage]]
//! v_pi = 72.0000
//! v_0 = 35.0000
//! v_bias_a = 3.00000
//! v_bias_c = -2.00000
//! ```
//!
//! Values are volts written with six significant digits.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use super::{CalibrationParams, PcmError};

const SCHEMA: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibFile {
    schema: u32,
    stage: Vec<CalibrationParams>,
}

/// Formats with six significant digits in plain decimal notation.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.5}");
    }
    // exponent of the value after rounding to six digits
    let sci = format!("{v:.5e}");
    let exp: i32 = sci.split_once('e').and_then(|(_, e)| e.parse().ok()).unwrap_or(0);
    let decimals = (5 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

pub fn render_calibration(stages: &[CalibrationParams]) -> String {
    let mut out = String::new();
    out.push_str("# PCM stage calibration, volts\n");
    let _ = writeln!(out, "schema = {SCHEMA}");
    for s in stages {
        out.push_str("\n[[stage]]\n");
        let _ = writeln!(out, "v_pi = {}", format_sig6(s.v_pi));
        let _ = writeln!(out, "v_0 = {}", format_sig6(s.v_0));
        let _ = writeln!(out, "v_bias_a = {}", format_sig6(s.v_bias_a));
        let _ = writeln!(out, "v_bias_c = {}", format_sig6(s.v_bias_c));
    }
    out
}

pub fn parse_calibration(text: &str) -> Result<Vec<CalibrationParams>, PcmError> {
    let file: CalibFile = toml::from_str(text).map_err(|e| PcmError::CalibFile(e.to_string()))?;
    if file.schema != SCHEMA {
        return Err(PcmError::CalibFile(format!(
            "unsupported schema {} (expected {SCHEMA})",
            file.schema
        )));
    }
    if file.stage.is_empty() {
        return Err(PcmError::CalibFile("no [[stage]] tables".into()));
    }
    for s in &file.stage {
        s.validate()?;
    }
    Ok(file.stage)
}

pub fn write_calibration(path: &Path, stages: &[CalibrationParams]) -> Result<(), PcmError> {
    std::fs::write(path, render_calibration(stages))
        .map_err(|e| PcmError::CalibFile(format!("{}: {e}", path.display())))
}

pub fn read_calibration(path: &Path) -> Result<Vec<CalibrationParams>, PcmError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PcmError::CalibFile(format!("{}: {e}", path.display())))?;
    parse_calibration(&text)
}
