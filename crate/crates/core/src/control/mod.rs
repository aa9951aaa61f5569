//! Closed-loop simulator: drifting channel, polarimeter measurement of the
//! reference, retarder solve, slew-limited drivers and the PCM plant.
//!
//! Optical path per tick:
//!
//! ```text
//! reference_in ─▶ channel (drifts) ─▶ PCM stages ─▶ polarimeter
//! ```
//!
//! The controller back-refers the measurement through its own model of the
//! PCM (driver outputs plus its calibration) to estimate what arrived from
//! the channel, then solves the single retarder taking that estimate onto the
//! target and spreads it over the stages.

mod channel;
mod config;
mod event;
mod frame;

pub use channel::{encode_inverse, estimate_channel, perpendicular, random_axis, ChannelState};
pub use config::{ControllerConfig, DriftConfig, DriverSection, LoopConfig, PlantConfig, SCHEMA};
pub use event::{Event, EventScript, ScriptedEvent};
pub use frame::{FrameWriter, LoopFrame, RunSummary, SummaryBuilder};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::driver::{self, dac_out, DacConfig, DriverError, DriverProfile, DriverState};
use crate::exec::Exec;
use crate::pcm::{
    split_stages, CalibrationParams, MultiStageCommand, PcmError, PcmPlant, PcmStagePlant,
    StageVoltages, DEFAULT_DEN_EPS,
};
use crate::polarimeter::{Pipeline, PipelineError};
use crate::polarization::{
    misalignment, retarder_to_rotation, rotate, solve_retarder, wrap_unit_interval, LinearRetarder,
    RotationQ, Sop,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoopError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("event script: {0}")]
    Script(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<DriverError> for LoopError {
    fn from(e: DriverError) -> Self {
        LoopError::ConfigInvalid(e.to_string())
    }
}

impl From<PcmError> for LoopError {
    fn from(e: PcmError) -> Self {
        LoopError::ConfigInvalid(e.to_string())
    }
}

impl From<PipelineError> for LoopError {
    fn from(e: PipelineError) -> Self {
        LoopError::ConfigInvalid(e.to_string())
    }
}

/// Stream id of the detector-noise generator; drift uses the default stream.
const MEASUREMENT_STREAM: u64 = 1;

#[derive(Debug, Clone)]
pub struct ControlLoop {
    cfg: LoopConfig,
    pipeline: Pipeline,
    profile: DriverProfile,
    dac: DacConfig,
    ctrl_cal: Vec<CalibrationParams>,
    plant: PcmPlant,
    drivers: Vec<[DriverState; 2]>,
    stage_alpha: Vec<f64>,
    command: MultiStageCommand,
    channel: ChannelState,
    alignment: RotationQ,
    target: Sop,
    paused: bool,
    solved_once: bool,
    tick: u64,
    meas_rng: ChaCha8Rng,
    last: Option<LoopFrame>,
}

impl ControlLoop {
    pub fn new(cfg: LoopConfig) -> Result<Self, LoopError> {
        cfg.validate()?;
        let pipeline = Pipeline::new(cfg.pipeline)?;
        let profile = cfg.driver.active()?;
        let ctrl_cal = cfg.controller_params()?;
        let plant = PcmPlant::new(
            cfg.plant_params()?
                .into_iter()
                .map(|p| PcmStagePlant::new(p).with_axis_skew(cfg.plant.axis_skew))
                .collect(),
        );
        let mut meas_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        meas_rng.set_stream(MEASUREMENT_STREAM);
        let ref_v = cfg.reference_in.as_vector();
        let alignment = RotationQ::from_axis_angle(perpendicular(&ref_v), cfg.alignment_error_rad)
            .unwrap_or(RotationQ::IDENTITY);
        let channel = ChannelState::new(cfg.drift.initial_rotation()?, cfg.drift.sigma, cfg.seed);
        let mut lp = Self {
            pipeline,
            profile,
            dac: cfg.dac,
            command: MultiStageCommand::identity(&ctrl_cal),
            drivers: Vec::new(),
            stage_alpha: Vec::new(),
            ctrl_cal,
            plant,
            channel,
            alignment,
            target: cfg.target,
            paused: false,
            solved_once: false,
            tick: 0,
            meas_rng,
            last: None,
            cfg,
        };
        lp.reset_hardware();
        Ok(lp)
    }

    /// Drivers settled at the controller's bias estimate, plant realizing it.
    fn reset_hardware(&mut self) {
        self.command = MultiStageCommand::identity(&self.ctrl_cal);
        self.stage_alpha = vec![0.0; self.ctrl_cal.len()];
        self.drivers = self
            .ctrl_cal
            .iter()
            .map(|c| {
                let b = c.bias_voltages();
                [DriverState::settled_at(b.v_a), DriverState::settled_at(b.v_c)]
            })
            .collect();
        self.plant.reset();
        for (i, d) in self.drivers.iter().enumerate() {
            let v = StageVoltages::new(d[0].v_out, d[1].v_out);
            let _ = self.plant.stages[i].apply(0.0, &v);
        }
        self.solved_once = false;
    }

    pub fn config(&self) -> &LoopConfig {
        &self.cfg
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn target(&self) -> Sop {
        self.target
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn controller_calibration(&self) -> &[CalibrationParams] {
        &self.ctrl_cal
    }

    pub fn channel(&self) -> &ChannelState {
        &self.channel
    }

    pub fn plant(&self) -> &PcmPlant {
        &self.plant
    }

    pub fn last_frame(&self) -> Option<&LoopFrame> {
        self.last.as_ref()
    }

    fn apply_event(&mut self, e: &Event) -> Result<(), LoopError> {
        e.validate()?;
        match e {
            Event::SetTarget { sop } => self.target = *sop,
            Event::SetDrift { sigma } => self.channel.sigma_drift = *sigma,
            Event::InjectJump { .. } => self.channel.inject(e.jump_rotation()?),
            Event::Pause => self.paused = true,
            Event::Resume => self.paused = false,
            Event::Reset => {
                self.channel.q = self.cfg.drift.initial_rotation()?;
                self.channel.sigma_drift = self.cfg.drift.sigma;
                self.target = self.cfg.target;
                self.paused = false;
                self.reset_hardware();
            }
        }
        Ok(())
    }

    /// PCM rotation as the controller believes it: retardance inferred from
    /// the driver outputs through its own calibration.
    fn model_rotation(&self) -> RotationQ {
        let mut q = RotationQ::IDENTITY;
        for (i, cal) in self.ctrl_cal.iter().enumerate() {
            let alpha = self.stage_alpha[i];
            let d = &self.drivers[i];
            let common = 0.5 * ((d[0].v_out - cal.v_bias_a) + (d[1].v_out - cal.v_bias_c));
            let den = cal.drive_slope(alpha);
            let delta = if den.abs() >= DEFAULT_DEN_EPS {
                wrap_unit_interval(common / den)
            } else {
                self.command.stages[i].retarder.delta()
            };
            let r = LinearRetarder::wrapped(alpha, delta).unwrap_or(LinearRetarder::IDENTITY);
            q = retarder_to_rotation(&r) * q;
        }
        q
    }

    fn issue(&mut self, cmd: MultiStageCommand) {
        let gain = self.profile.total_gain();
        for (i, s) in cmd.stages.iter().enumerate() {
            self.stage_alpha[i] = s.alpha();
            for (k, want) in [s.voltages.v_a, s.voltages.v_c].into_iter().enumerate() {
                let mut dac_v = want / gain;
                if !self.dac.bypass {
                    dac_v = dac_out(self.dac.code_for(dac_v), &self.dac).unwrap_or(dac_v);
                }
                driver::command(&mut self.drivers[i][k], dac_v, &self.profile);
            }
        }
        self.command = cmd;
    }

    /// Advances one tick with the events due at its boundary.
    pub fn tick(&mut self, events: &[Event]) -> LoopFrame {
        let mut applied = Vec::new();
        let mut errors = Vec::new();
        for e in events {
            match self.apply_event(e) {
                Ok(()) => applied.push(e.clone()),
                Err(err) => errors.push(err.to_string()),
            }
        }
        let tick = self.tick;
        self.tick += 1;

        if self.paused {
            if let Some(prev) = &self.last {
                let mut f = prev.clone();
                f.tick = tick;
                f.paused = true;
                f.applied = applied;
                f.errors = errors;
                self.last = Some(f.clone());
                return f;
            }
        }
        if !self.paused {
            self.channel.drift_step();
        }

        let r_p = self.plant.rotation();
        let path = r_p * self.channel.q;
        let reference = rotate(&self.alignment, &self.cfg.reference_in);
        let optical_out = rotate(&path, &reference);
        let quantum_out = rotate(&path, &self.cfg.reference_in);
        let misalign_true = misalignment(&quantum_out, &self.target);

        let r_model = self.model_rotation();
        let prev = self.last.as_ref();
        let mut frame = LoopFrame {
            tick,
            sop_meas: prev.map_or(optical_out.to_array(), |f| f.sop_meas),
            dop: prev.map_or(0.0, |f| f.dop),
            px: prev.map_or(0, |f| f.px),
            py: prev.map_or(0, |f| f.py),
            v_cmd: Vec::new(),
            v_out: Vec::new(),
            misalign_rad: prev.map_or(std::f64::consts::PI, |f| f.misalign_rad),
            launch: prev.map_or(self.target.to_array(), |f| f.launch),
            target: self.target.to_array(),
            channel_est: prev.map_or(RotationQ::IDENTITY.to_array(), |f| f.channel_est),
            misalign_true_rad: misalign_true,
            paused: self.paused,
            applied,
            errors,
        };

        match self.pipeline.measure(&optical_out, &mut self.meas_rng) {
            Ok(m) => {
                let received = rotate(&r_model.inverse(), &m.sop);
                let ch_est = estimate_channel(&received, &self.cfg.reference_in);
                let launch = encode_inverse(&self.target, &(r_model * ch_est));
                frame.sop_meas = m.sop.to_array();
                frame.dop = m.dop;
                frame.px = m.point.px;
                frame.py = m.point.py;
                frame.misalign_rad = misalignment(&m.sop, &self.target);
                frame.launch = launch.to_array();
                frame.channel_est = ch_est.to_array();
                if !self.paused && (self.cfg.controller.feedback || !self.solved_once) {
                    let r = solve_retarder(&received, &self.target);
                    match split_stages(&r, &self.ctrl_cal, self.cfg.stage_count) {
                        Ok(cmd) => self.issue(cmd),
                        Err(e) => frame.errors.push(e.to_string()),
                    }
                    self.solved_once = true;
                }
            }
            Err(e) => frame.errors.push(e.to_string()),
        }

        if !self.paused {
            for (i, d) in self.drivers.iter_mut().enumerate() {
                driver::step(&mut d[0], self.cfg.tick_dt_us, &self.profile);
                driver::step(&mut d[1], self.cfg.tick_dt_us, &self.profile);
                let v = StageVoltages::new(d[0].v_out, d[1].v_out);
                if let Err(e) = self.plant.stages[i].apply(self.stage_alpha[i], &v) {
                    frame.errors.push(format!("stage {i}: {e}"));
                }
            }
        }
        frame.v_cmd = self.drivers.iter().map(|d| [d[0].v_cmd, d[1].v_cmd]).collect();
        frame.v_out = self.drivers.iter().map(|d| [d[0].v_out, d[1].v_out]).collect();
        self.last = Some(frame.clone());
        frame
    }
}

/// Runs `cfg.max_ticks` ticks, feeding every frame to `sink`.
pub fn run<F: FnMut(&LoopFrame)>(
    cfg: &LoopConfig,
    script: &EventScript,
    mut sink: F,
) -> Result<RunSummary, LoopError> {
    let mut lp = ControlLoop::new(cfg.clone())?;
    let mut summary = SummaryBuilder::new(cfg.settle_threshold_rad);
    let mut due = Vec::new();
    for t in 0..cfg.max_ticks {
        due.clear();
        due.extend(script.at(t).cloned());
        let f = lp.tick(&due);
        summary.push(&f);
        sink(&f);
    }
    Ok(summary.finish())
}

/// Collects every frame of a run.
pub fn run_frames(cfg: &LoopConfig, script: &EventScript) -> Result<(Vec<LoopFrame>, RunSummary), LoopError> {
    let mut frames = Vec::with_capacity(cfg.max_ticks as usize);
    let s = run(cfg, script, |f| frames.push(f.clone()))?;
    Ok((frames, s))
}

/// Independent runs, one per config.
pub fn run_batch(cfgs: &[LoopConfig], script: &EventScript, exec: Exec) -> Vec<Result<RunSummary, LoopError>> {
    exec.map(cfgs, |c| run(c, script, |_| {}))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ideal(ticks: u64) -> LoopConfig {
        LoopConfig { max_ticks: ticks, ..LoopConfig::ideal() }
    }

    #[test]
    fn ideal_loop_converges() {
        let (frames, s) = run_frames(&ideal(60), &EventScript::default()).unwrap();
        let last = frames.last().unwrap();
        assert!(last.misalign_rad < 1e-6, "{}", last.misalign_rad);
        assert!(last.misalign_true_rad < 1e-6);
        assert_eq!(s.error_count, 0);
        assert_eq!(s.settle_ticks.len(), 1);
    }

    #[test]
    fn deterministic() {
        let cfg = LoopConfig { max_ticks: 300, ..Default::default() };
        let cfg = LoopConfig { drift: DriftConfig { sigma: 0.01, ..cfg.drift }, ..cfg };
        let a: Vec<String> = run_frames(&cfg, &EventScript::default()).unwrap().0.iter().map(LoopFrame::to_json).collect();
        let b: Vec<String> = run_frames(&cfg, &EventScript::default()).unwrap().0.iter().map(LoopFrame::to_json).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn pause_repeats_state() {
        let mut lp = ControlLoop::new(ideal(0)).unwrap();
        for _ in 0..10 {
            lp.tick(&[]);
        }
        let before = lp.tick(&[Event::Pause]);
        let after = lp.tick(&[]);
        assert_eq!(after.tick, before.tick + 1);
        assert_eq!(after.sop_meas, before.sop_meas);
        assert_eq!(after.v_out, before.v_out);
        assert!(after.paused);
        let resumed = lp.tick(&[Event::Resume]);
        assert!(!resumed.paused);
        assert_eq!(resumed.applied, vec![Event::Resume]);
    }

    #[test]
    fn invalid_event_is_reported() {
        let mut lp = ControlLoop::new(ideal(0)).unwrap();
        let f = lp.tick(&[Event::SetDrift { sigma: -1.0 }]);
        assert!(f.applied.is_empty());
        assert_eq!(f.errors.len(), 1);
    }
}
