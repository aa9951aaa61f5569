//! Batch workloads: many independent solves, calibration trials and paired
//! loop runs. Each item derives its randomness from `(seed, index)` so the
//! result does not depend on the execution strategy.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control::{random_axis, run, DriftConfig, EventScript, LoopConfig, LoopError, RunSummary};
use crate::exec::Exec;
use crate::pcm::{calibrate_stage, CalibrationParams, CalibrationSweep, PcmError, PcmStagePlant};
use crate::polarization::{misalignment, retarder_to_rotation, rotate, solve_retarder, LinearRetarder, Sop};

/// Per-item generator: `seed` picks the family, `index` the stream.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn random_sop<R: Rng + ?Sized>(rng: &mut R) -> Sop {
    Sop::from_vector(random_axis(rng)).unwrap_or(Sop::H)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveCheck {
    pub current: Sop,
    pub target: Sop,
    pub retarder: LinearRetarder,
    /// Misalignment between the rotated current SOP and the target.
    pub residual: f64,
}

/// Solves `n` random (current, target) pairs.
pub fn solve_batch(n: usize, seed: u64, exec: Exec) -> Vec<SolveCheck> {
    exec.map_range(n, |i| {
        let mut rng = item_rng(seed, i as u64);
        let current = random_sop(&mut rng);
        let target = random_sop(&mut rng);
        let retarder = solve_retarder(&current, &target);
        let out = rotate(&retarder_to_rotation(&retarder), &current);
        SolveCheck {
            current,
            target,
            retarder,
            residual: misalignment(&out, &target),
        }
    })
}

/// Hidden constants drawn from the ranges the calibration is rated for:
/// `v_pi ∈ [40, 120]`, `v_0 ∈ [20, 60]`, `|bias| ∈ [1, 10]` with random sign.
pub fn random_params<R: Rng + ?Sized>(rng: &mut R) -> CalibrationParams {
    let bias = |rng: &mut R| {
        let m: f64 = rng.random_range(1.0..=10.0);
        if rng.random::<bool>() { m } else { -m }
    };
    CalibrationParams {
        v_pi: rng.random_range(40.0..=120.0),
        v_0: rng.random_range(20.0..=60.0),
        v_bias_a: bias(rng),
        v_bias_c: bias(rng),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTrial {
    pub truth: CalibrationParams,
    pub fitted: Option<CalibrationParams>,
    pub error: Option<String>,
    /// Largest relative error over the four constants; infinite on failure.
    pub max_rel_err: f64,
}

impl CalibrationTrial {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn relative_errors(fit: &CalibrationParams, truth: &CalibrationParams) -> [f64; 4] {
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    [
        rel(fit.v_pi, truth.v_pi),
        rel(fit.v_0, truth.v_0),
        rel(fit.v_bias_a, truth.v_bias_a),
        rel(fit.v_bias_c, truth.v_bias_c),
    ]
}

/// Calibrates one simulated stage, with Gaussian readback noise `noise` added
/// per Stokes component before renormalization.
pub fn calibration_trial(
    truth: CalibrationParams,
    noise: f64,
    sweep: &CalibrationSweep,
    rng: &mut ChaCha8Rng,
) -> CalibrationTrial {
    let mut plant = PcmStagePlant::new(truth);
    let normal = Normal::new(0.0, noise.max(0.0)).ok();
    let mut readback = |s: &Sop| -> Sop {
        match (&normal, noise > 0.0) {
            (Some(n), true) => {
                let d = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
                Sop::normalized(s.as_vector() + d).unwrap_or(*s)
            }
            _ => *s,
        }
    };
    let res: Result<CalibrationParams, PcmError> =
        calibrate_stage(&mut plant, &Sop::R, sweep, &mut readback);
    match res {
        Ok(fit) => CalibrationTrial {
            truth,
            fitted: Some(fit),
            error: None,
            max_rel_err: relative_errors(&fit, &truth).into_iter().fold(0.0, f64::max),
        },
        Err(e) => CalibrationTrial {
            truth,
            fitted: None,
            error: Some(e.to_string()),
            max_rel_err: f64::INFINITY,
        },
    }
}

/// `n` calibration trials on random hidden constants.
pub fn calibration_monte_carlo(
    n: usize,
    seed: u64,
    noise: f64,
    sweep: &CalibrationSweep,
    exec: Exec,
) -> Vec<CalibrationTrial> {
    exec.map_range(n, |i| {
        let mut rng = item_rng(seed, i as u64);
        let truth = random_params(&mut rng);
        calibration_trial(truth, noise, sweep, &mut rng)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedRun {
    pub seed: u64,
    pub closed: RunSummary,
    pub open: RunSummary,
}

/// Closed and open loop on the same seeds and drift `sigma`.
pub fn paired_runs(
    base: &LoopConfig,
    sigma: f64,
    seeds: &[u64],
    exec: Exec,
) -> Result<Vec<PairedRun>, LoopError> {
    let script = EventScript::default();
    exec.map(seeds, |&seed| {
        let mut cfg = LoopConfig {
            seed,
            drift: DriftConfig { sigma, ..base.drift },
            ..base.clone()
        };
        cfg.controller.feedback = true;
        let closed = run(&cfg, &script, |_| {})?;
        cfg.controller.feedback = false;
        let open = run(&cfg, &script, |_| {})?;
        Ok(PairedRun { seed, closed, open })
    })
    .into_iter()
    .collect()
}
