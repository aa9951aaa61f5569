use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Event, LoopError};

/// One tick of telemetry. Serialized as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopFrame {
    pub tick: u64,
    pub sop_meas: [f64; 3],
    pub dop: f64,
    pub px: i64,
    pub py: i64,
    /// Driver targets per stage, `[V_a, V_c]`.
    pub v_cmd: Vec<[f64; 2]>,
    /// Driver outputs per stage after this tick's slew step.
    pub v_out: Vec<[f64; 2]>,
    /// Measured SOP against the target, rad.
    pub misalign_rad: f64,
    pub launch: [f64; 3],
    pub target: [f64; 3],
    /// Channel estimate quaternion `[w, x, y, z]`.
    pub channel_est: [f64; 4],
    /// Quantum-path output against the target, rad.
    pub misalign_true_rad: f64,
    pub paused: bool,
    pub applied: Vec<Event>,
    pub errors: Vec<String>,
}

impl LoopFrame {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

/// Writes frames as JSONL.
pub struct FrameWriter<W: Write> {
    out: W,
}

impl<W: Write> FrameWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, f: &LoopFrame) -> Result<(), LoopError> {
        serde_json::to_writer(&mut self.out, f).map_err(|e| LoopError::Io(e.to_string()))?;
        self.out.write_all(b"\n").map_err(|e| LoopError::Io(e.to_string()))
    }

    pub fn finish(mut self) -> Result<W, LoopError> {
        self.out.flush().map_err(|e| LoopError::Io(e.to_string()))?;
        Ok(self.out)
    }
}

/// Run statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub ticks: u64,
    pub mean_misalign_rad: f64,
    pub max_misalign_rad: f64,
    pub final_misalign_rad: f64,
    /// Ticks from each disturbance (start, target change, jump, reset) until
    /// the measured misalignment first drops below the threshold; `None` if
    /// the next disturbance or the end of the run came first.
    pub settle_ticks: Vec<Option<u64>>,
    pub error_count: u64,
}

impl RunSummary {
    pub fn settled_count(&self) -> usize {
        self.settle_ticks.iter().filter(|s| s.is_some()).count()
    }

    /// `metric,value` rows; settle times are `settle_<i>` with an empty
    /// value when unsettled.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), LoopError> {
        let io = |e: csv::Error| LoopError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "value"]).map_err(io)?;
        let rows = [
            ("ticks", self.ticks.to_string()),
            ("mean_misalign_rad", format!("{:e}", self.mean_misalign_rad)),
            ("max_misalign_rad", format!("{:e}", self.max_misalign_rad)),
            ("final_misalign_rad", format!("{:e}", self.final_misalign_rad)),
            ("error_count", self.error_count.to_string()),
        ];
        for (k, v) in rows {
            w.write_record([k, v.as_str()]).map_err(io)?;
        }
        for (i, s) in self.settle_ticks.iter().enumerate() {
            let v = s.map(|t| t.to_string()).unwrap_or_default();
            w.write_record([format!("settle_{i}"), v]).map_err(io)?;
        }
        w.flush().map_err(|e| LoopError::Io(e.to_string()))
    }
}

/// Accumulates a [`RunSummary`] frame by frame.
#[derive(Debug, Clone)]
pub struct SummaryBuilder {
    threshold: f64,
    ticks: u64,
    sum: f64,
    max: f64,
    last: f64,
    errors: u64,
    settle: Vec<Option<u64>>,
    since: Option<u64>,
}

impl SummaryBuilder {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            ticks: 0,
            sum: 0.0,
            max: 0.0,
            last: 0.0,
            errors: 0,
            settle: Vec::new(),
            since: None,
        }
    }

    pub fn push(&mut self, f: &LoopFrame) {
        if self.ticks == 0 || f.applied.iter().any(Event::is_disturbance) {
            self.settle.push(None);
            self.since = Some(f.tick);
        }
        if let Some(t0) = self.since {
            if f.misalign_rad < self.threshold {
                if let Some(slot) = self.settle.last_mut() {
                    *slot = Some(f.tick - t0);
                }
                self.since = None;
            }
        }
        self.ticks += 1;
        self.sum += f.misalign_rad;
        self.max = self.max.max(f.misalign_rad);
        self.last = f.misalign_rad;
        self.errors += f.errors.len() as u64;
    }

    pub fn finish(self) -> RunSummary {
        RunSummary {
            ticks: self.ticks,
            mean_misalign_rad: if self.ticks == 0 { 0.0 } else { self.sum / self.ticks as f64 },
            max_misalign_rad: self.max,
            final_misalign_rad: self.last,
            settle_ticks: self.settle,
            error_count: self.errors,
        }
    }
}
