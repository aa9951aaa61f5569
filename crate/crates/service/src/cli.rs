use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use polswitch_core::batch::calibration_trial;
use polswitch_core::batch::item_rng;
use polswitch_core::control::{run, ControlLoop, EventScript, FrameWriter, LoopConfig, LoopError};
use polswitch_core::driver::{max_switch_rate, transition_time};
use polswitch_core::pcm::{
    read_calibration, render_calibration, split_stages, write_calibration, CalibrationParams,
    CalibrationSweep, PcmError,
};
use polswitch_core::polarization::{solve_retarder, Sop};
use serde::{Deserialize, Serialize};

use crate::serve::{self, ServeOptions};

pub const CONFIG_ENV: &str = "POLSWITCH_CONFIG";

/// Exit status: 2 for usage and input errors, 3 for domain errors.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        Self { code: 2, message: m.into() }
    }

    pub fn domain(m: impl Into<String>) -> Self {
        Self { code: 3, message: m.into() }
    }
}

impl From<LoopError> for CliError {
    fn from(e: LoopError) -> Self {
        match e {
            LoopError::Io(_) => CliError::domain(e.to_string()),
            _ => CliError::usage(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "polswitch", version, about = "Polarization switch and stabilizer simulator")]
pub struct Cli {
    /// Loop config file (TOML). Overrides $POLSWITCH_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Retarder and stage voltages taking one SOP onto another.
    Solve(SolveArgs),
    /// Calibrate the simulated PCM stages and write a calibration file.
    Calibrate(CalibrateArgs),
    /// Swing-versus-rate table for a driver profile.
    Ratecheck(RatecheckArgs),
    /// Batch closed-loop run writing JSONL frames.
    Simulate(SimulateArgs),
    /// Run the loop live and serve frames and commands over TCP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Current SOP then target SOP: s1 s2 s3 t1 t2 t3.
    #[arg(num_args = 6, value_names = ["S1", "S2", "S3", "T1", "T2", "T3"], allow_negative_numbers = true)]
    pub values: Vec<f64>,
    /// Calibration file; defaults to the config's controller calibration.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Readback noise σ per Stokes component.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Line-fit RMS limit, rad. Defaults to 1e-3, or 5e-3 with noise.
    #[arg(long)]
    pub fit_tol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct RatecheckArgs {
    #[arg(default_value = "default")]
    pub profile: String,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub ticks: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSONL event script: {"tick": N, "event": {...}} per line.
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Frame output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV summary; printed to stderr when absent.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub bind: String,
    /// Wall-clock ticks per second.
    #[arg(long, default_value_t = 1000.0)]
    pub tick_hz: f64,
    /// Stop after this many ticks.
    #[arg(long)]
    pub max_ticks: Option<u64>,
}

pub fn config_path(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
}

pub fn load_config(flag: Option<&Path>) -> Result<LoopConfig, CliError> {
    match config_path(flag) {
        Some(p) => Ok(LoopConfig::load(&p)?),
        None => Ok(LoopConfig::default()),
    }
}

pub fn run_cli(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Command::Solve(a) => solve(&cfg, a),
        Command::Calibrate(a) => calibrate(&cfg, a),
        Command::Ratecheck(a) => ratecheck(&cfg, a),
        Command::Simulate(a) => simulate(cfg, a),
        Command::Serve(a) => serve_cmd(cfg, a),
    }
}

/// Accepts vectors within 1e-3 of unit norm and renormalizes them.
pub fn parse_sop(v: &[f64]) -> Result<Sop, CliError> {
    let v = Vector3::new(v[0], v[1], v[2]);
    let n = v.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-3 {
        return Err(CliError::usage(format!(
            "SOP ({}, {}, {}) has norm {n}, expected 1 within 1e-3",
            v.x, v.y, v.z
        )));
    }
    Sop::normalized(v).map_err(|e| CliError::usage(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    pub alpha: f64,
    pub delta: f64,
    pub v_a: f64,
    pub v_b: f64,
    pub v_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutput {
    pub alpha: f64,
    pub delta: f64,
    pub active_stages: usize,
    pub stages: Vec<StageOutput>,
}

fn solve(cfg: &LoopConfig, a: SolveArgs) -> Result<(), CliError> {
    let current = parse_sop(&a.values[0..3])?;
    let target = parse_sop(&a.values[3..6])?;
    let n = a.stages.unwrap_or(cfg.stage_count);
    let cal = match &a.calib {
        Some(p) => read_calibration(p).map_err(|e| CliError::usage(e.to_string()))?,
        None => cfg.controller_params()?,
    };
    let cal = match cal.len() {
        1 => vec![cal[0]; n],
        k if k == n => cal,
        k => return Err(CliError::usage(format!("calibration has {k} stages, need 1 or {n}"))),
    };
    let r = solve_retarder(&current, &target);
    let cmd = split_stages(&r, &cal, n).map_err(|e| match e {
        PcmError::VoltageRangeExceeded { .. } | PcmError::Unsatisfiable { .. } => CliError::domain(e.to_string()),
        _ => CliError::usage(e.to_string()),
    })?;
    let out = SolveOutput {
        alpha: r.alpha(),
        delta: r.delta(),
        active_stages: cmd.active,
        stages: cmd
            .stages
            .iter()
            .map(|s| StageOutput {
                alpha: s.retarder.alpha(),
                delta: s.retarder.delta(),
                v_a: s.voltages.v_a,
                v_b: s.voltages.v_b,
                v_c: s.voltages.v_c,
            })
            .collect(),
    };
    if a.json {
        println!("{}", serde_json::to_string(&out).unwrap_or_default());
    } else {
        println!("alpha = {:.9} rad", out.alpha);
        println!("delta = {:.9}", out.delta);
        println!("active stages = {} of {}", out.active_stages, out.stages.len());
        for (i, s) in out.stages.iter().enumerate() {
            println!(
                "stage {i}: delta = {:.6}  V_a = {:.4} V  V_b = {:.4} V  V_c = {:.4} V",
                s.delta, s.v_a, s.v_b, s.v_c
            );
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateOutput {
    pub stages: Vec<CalibrationParams>,
    /// Largest relative error per stage against the simulated device.
    pub max_rel_err: Vec<f64>,
}

fn calibrate(cfg: &LoopConfig, a: CalibrateArgs) -> Result<(), CliError> {
    if !(a.noise >= 0.0) {
        return Err(CliError::usage("--noise must be >= 0"));
    }
    let sweep = CalibrationSweep {
        fit_tol: a.fit_tol.unwrap_or(if a.noise > 0.0 { 5e-3 } else { 1e-3 }),
        ..CalibrationSweep::default()
    };
    let truth = cfg.plant_params()?;
    let mut stages = Vec::new();
    let mut errs = Vec::new();
    for (i, t) in truth.iter().enumerate() {
        let trial = calibration_trial(*t, a.noise, &sweep, &mut item_rng(a.seed, i as u64));
        match trial.fitted {
            Some(f) => {
                stages.push(f);
                errs.push(trial.max_rel_err);
            }
            None => {
                return Err(CliError::domain(format!(
                    "stage {i}: {}",
                    trial.error.unwrap_or_default()
                )))
            }
        }
    }
    if let Some(p) = &a.out {
        write_calibration(p, &stages).map_err(|e| CliError::usage(e.to_string()))?;
    }
    if a.json {
        let out = CalibrateOutput { stages, max_rel_err: errs };
        println!("{}", serde_json::to_string(&out).unwrap_or_default());
    } else if a.out.is_none() {
        print!("{}", render_calibration(&stages));
    } else {
        for (i, e) in errs.iter().enumerate() {
            eprintln!("stage {i}: max relative error {e:.3e}");
        }
    }
    Ok(())
}

pub const RATE_SWINGS: [f64; 4] = [0.0, 10.0, 70.0, 140.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub profile: String,
    pub swing_v: f64,
    pub transition_us: f64,
    /// `None` for an unbounded rate (zero swing).
    pub max_rate_hz: Option<f64>,
}

pub fn rate_rows(cfg: &LoopConfig, profile: &str) -> Result<Vec<RateRow>, CliError> {
    let p = cfg
        .driver
        .lookup(profile)
        .map_err(|e| CliError::usage(e.to_string()))?;
    RATE_SWINGS
        .iter()
        .map(|&swing| {
            let t = transition_time(-0.5 * swing, 0.5 * swing, &p).map_err(|e| CliError::domain(e.to_string()))?;
            let r = max_switch_rate(swing, &p).map_err(|e| CliError::domain(e.to_string()))?;
            Ok(RateRow {
                profile: p.name.clone(),
                swing_v: swing,
                transition_us: t.full_ramp_us,
                max_rate_hz: r.is_finite().then_some(r),
            })
        })
        .collect()
}

fn ratecheck(cfg: &LoopConfig, a: RatecheckArgs) -> Result<(), CliError> {
    let rows = rate_rows(cfg, &a.profile)?;
    if a.json {
        println!("{}", serde_json::to_string(&rows).unwrap_or_default());
        return Ok(());
    }
    let mut w = csv::Writer::from_writer(io::stdout());
    let csv_err = |e: csv::Error| CliError::domain(e.to_string());
    w.write_record(["profile", "swing_v", "transition_us", "max_rate_hz"]).map_err(csv_err)?;
    for r in rows {
        let rate = r.max_rate_hz.map_or("inf".to_string(), |v| v.to_string());
        w.write_record([r.profile, r.swing_v.to_string(), r.transition_us.to_string(), rate])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::domain(e.to_string()))
}

fn simulate(mut cfg: LoopConfig, a: SimulateArgs) -> Result<(), CliError> {
    if let Some(t) = a.ticks {
        cfg.max_ticks = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let script = match &a.events {
        Some(p) => {
            let f = File::open(p).map_err(|e| io_err(p, e))?;
            EventScript::from_jsonl(BufReader::new(f))?
        }
        None => EventScript::default(),
    };
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(File::create(p).map_err(|e| io_err(p, e))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut writer = FrameWriter::new(BufWriter::new(sink));
    let mut write_err = None;
    let summary = run(&cfg, &script, |f| {
        if write_err.is_none() {
            if let Err(e) = writer.write(f) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    writer.finish()?;
    match &a.summary {
        Some(p) => {
            let f = File::create(p).map_err(|e| io_err(p, e))?;
            summary.write_csv(f)?;
        }
        None => summary.write_csv(io::stderr())?,
    }
    Ok(())
}

fn serve_cmd(cfg: LoopConfig, a: ServeArgs) -> Result<(), CliError> {
    if !(a.tick_hz > 0.0) {
        return Err(CliError::usage("--tick-hz must be > 0"));
    }
    let lp = ControlLoop::new(cfg)?;
    let opts = ServeOptions { tick_hz: a.tick_hz, max_ticks: a.max_ticks };
    let server = serve::start(lp, &a.bind, opts).map_err(|e| CliError::usage(format!("bind {}: {e}", a.bind)))?;
    println!("listening on {}", server.addr);
    let _ = io::stdout().flush();
    server.join();
    Ok(())
}
