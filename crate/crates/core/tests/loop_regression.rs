use std::f64::consts::FRAC_PI_2;

use polswitch_core::batch::item_rng;
use polswitch_core::control::{
    random_axis, run_frames, ChannelState, ControlLoop, DriftConfig, Event, EventScript, LoopConfig,
    LoopFrame, ScriptedEvent,
};
use polswitch_core::polarization::{misalignment, rotate, RotationQ, Sop};

fn at(tick: u64, event: Event) -> ScriptedEvent {
    ScriptedEvent { tick, event }
}

fn sop(a: [f64; 3]) -> Sop {
    Sop::new(a[0], a[1], a[2]).unwrap()
}

/// Expected cosine between a tracked SOP and its start after `n` isotropic
/// steps with angle ~ N(0, σ²): each step contributes
/// `1/3 + 2/3·E[cos φ] = 1/3 + 2/3·exp(−σ²/2)`.
fn drift_oracle(sigma: f64, n: u32) -> f64 {
    (1.0 / 3.0 + 2.0 / 3.0 * (-0.5 * sigma * sigma).exp()).powi(n as i32)
}

#[test]
fn drift_diffusion_matches_random_walk() {
    let sigma = 0.01;
    let walkers = 200;
    let checkpoints = [1000u32, 4000, 10_000];
    let mut sums = [0.0; 3];
    for w in 0..walkers {
        let mut ch = ChannelState::new(RotationQ::IDENTITY, sigma, w);
        let mut n = 0;
        for (k, &c) in checkpoints.iter().enumerate() {
            while n < c {
                ch.drift_step();
                n += 1;
            }
            sums[k] += rotate(&ch.q, &Sop::H).x();
        }
    }
    let mut prev = 0.0;
    for (k, &c) in checkpoints.iter().enumerate() {
        let mean_cos = sums[k] / walkers as f64;
        let spread = 1.0 - mean_cos;
        let expected = 1.0 - drift_oracle(sigma, c);
        assert!(
            (spread - expected).abs() <= 0.2 * expected,
            "n={c}: 1−E[cos] = {spread:.4}, oracle {expected:.4}"
        );
        assert!(spread > prev, "misalignment must grow");
        prev = spread;
    }
}

#[test]
fn settled_target_change_within_three_ticks() {
    // gain5 slews 140 V/µs, enough for any swing within one tick
    for target in [Sop::H, Sop::V, Sop::D, Sop::A, Sop::L] {
        let mut cfg = LoopConfig { max_ticks: 40, ..LoopConfig::ideal() };
        cfg.driver.profile = "gain5".into();
        let script = EventScript::new(vec![at(20, Event::SetTarget { sop: target })]).unwrap();
        let (frames, _) = run_frames(&cfg, &script).unwrap();
        assert!(frames[19].misalign_true_rad < 1e-6);
        assert!(frames[22].misalign_true_rad < 1e-3, "{target}: {}", frames[22].misalign_true_rad);
    }
    // default profile: moderate swings
    for target in [Sop::D, Sop::L] {
        let cfg = LoopConfig { max_ticks: 40, ..LoopConfig::ideal() };
        let script = EventScript::new(vec![at(20, Event::SetTarget { sop: target })]).unwrap();
        let (frames, _) = run_frames(&cfg, &script).unwrap();
        assert!(frames[22].misalign_true_rad < 1e-3);
    }
}

#[test]
fn convergence_is_monotone_after_settling() {
    let cfg = LoopConfig { max_ticks: 200, ..LoopConfig::ideal() };
    let (frames, _) = run_frames(&cfg, &EventScript::default()).unwrap();
    let settled = frames.iter().position(|f| f.v_out == f.v_cmd).unwrap();
    for w in frames[settled..].windows(2) {
        assert!(w[1].misalign_true_rad <= w[0].misalign_true_rad + 1e-15);
    }
    assert!(frames.last().unwrap().misalign_true_rad < 1e-6);
}

#[test]
fn jump_recovery_regression() {
    // ticks to fall below 0.01 rad after a π/2 jump at tick 100, seeds 0..5
    const FROZEN: [u64; 5] = [3, 2, 1, 5, 2];
    for (seed, expected) in FROZEN.iter().enumerate() {
        let seed = seed as u64;
        let cfg = LoopConfig { max_ticks: 300, seed, ..LoopConfig::default() };
        let axis = random_axis(&mut item_rng(seed, 99));
        let script = EventScript::new(vec![at(100, Event::InjectJump { axis: axis.into(), angle: FRAC_PI_2 })]).unwrap();
        let (frames, summary) = run_frames(&cfg, &script).unwrap();
        assert!(frames[100].misalign_rad > 0.5);
        assert_eq!(summary.settle_ticks[1], Some(*expected), "seed {seed}");
    }
}

#[test]
fn quiet_run_residual_is_quantization_limited() {
    let cfg = LoopConfig { max_ticks: 500, ..LoopConfig::default() };
    let (frames, summary) = run_frames(&cfg, &EventScript::default()).unwrap();
    let tail = &frames[100..];
    let mean_true = tail.iter().map(|f| f.misalign_true_rad).sum::<f64>() / tail.len() as f64;
    assert!(mean_true < 2e-3, "{mean_true}");
    assert!(mean_true > 0.0, "quantized chain should leave a residual");
    assert_eq!(summary.error_count, 0);
}

fn is_settled(f: &LoopFrame) -> bool {
    f.v_out == f.v_cmd
}

#[test]
fn encode_track_consistency() {
    // At settled ticks, the launch SOP sent through the true channel and PCM
    // lands on the target within the measured residual.
    let cfg = LoopConfig { max_ticks: 400, ..LoopConfig::ideal() };
    let script = EventScript::new(vec![
        at(100, Event::SetTarget { sop: Sop::D }),
        at(200, Event::InjectJump { axis: [0.0, 0.0, 1.0], angle: 1.0 }),
    ])
    .unwrap();
    let mut lp = ControlLoop::new(cfg.clone()).unwrap();
    let mut checked = 0;
    for t in 0..cfg.max_ticks {
        let events: Vec<Event> = script.at(t).cloned().collect();
        // the frame describes the optics before this tick's actuation
        let path = lp.plant().rotation() * lp.channel().q;
        let f = lp.tick(&events);
        if t > 0 && is_settled(&f) && f.applied.is_empty() {
            let out = rotate(&path, &sop(f.launch));
            let err = misalignment(&out, &sop(f.target));
            assert!(err <= f.misalign_rad + 1e-9, "tick {t}: {err} > {}", f.misalign_rad);
            checked += 1;
        }
    }
    assert!(checked > 300);
}

#[test]
fn reset_restores_initial_state() {
    let cfg = LoopConfig { max_ticks: 0, ..LoopConfig::ideal() };
    let mut lp = ControlLoop::new(cfg.clone()).unwrap();
    let first = lp.tick(&[]);
    for _ in 0..20 {
        lp.tick(&[Event::SetTarget { sop: Sop::L }]);
    }
    let f = lp.tick(&[Event::Reset]);
    assert_eq!(f.applied, vec![Event::Reset]);
    assert_eq!(f.target, cfg.target.to_array());
    assert_eq!(f.sop_meas, first.sop_meas);
}

#[test]
fn open_loop_holds_first_solution() {
    let mut cfg = LoopConfig { max_ticks: 300, ..LoopConfig::default() };
    cfg.controller.feedback = false;
    cfg.drift = DriftConfig { sigma: 0.01, ..cfg.drift };
    let (frames, _) = run_frames(&cfg, &EventScript::default()).unwrap();
    assert!(frames[1..].windows(2).all(|w| w[0].v_cmd == w[1].v_cmd));
}
