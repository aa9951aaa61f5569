use std::path::PathBuf;
use std::process::{Command, Output};

use polswitch::cli::{CalibrateOutput, RateRow, SolveOutput};
use polswitch_core::control::{run_frames, EventScript, LoopConfig, LoopFrame};
use polswitch_core::pcm::read_calibration;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_polswitch"));
    c.env_remove("POLSWITCH_CONFIG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("polswitch-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn solve_pole_to_h() {
    let o = run(&["solve", "0", "0", "1", "1", "0", "0", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let s: SolveOutput = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((s.alpha - std::f64::consts::PI).abs() < 1e-12);
    assert!((s.delta - 0.25).abs() < 1e-12);
    assert_eq!(s.active_stages, 1);
    assert!((s.stages[0].v_a - 21.0).abs() < 1e-9 && (s.stages[0].v_c - 16.0).abs() < 1e-9);
    assert_eq!(s.stages[0].v_b, 0.0);
    // round trip
    let again: SolveOutput = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
    assert_eq!(again, s);
}

#[test]
fn solve_identity_gives_bias() {
    let o = run(&["solve", "1", "0", "0", "1", "0", "0", "--json"]);
    let s: SolveOutput = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(s.delta, 0.0);
    assert!(s.stages.iter().all(|st| (st.v_a, st.v_b, st.v_c) == (3.0, 0.0, -2.0)));
}

#[test]
fn solve_text_and_negative_values() {
    let o = run(&["solve", "0", "0", "-1", "0", "-1", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("alpha = "));
}

#[test]
fn solve_renormalizes_near_unit() {
    let o = run(&["solve", "0", "0", "1.0005", "1", "0", "0", "--json"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn solve_usage_errors() {
    assert_eq!(run(&["solve", "0", "0", "1.01", "1", "0", "0"]).status.code(), Some(2));
    assert_eq!(run(&["solve", "0", "0", "1", "1", "0"]).status.code(), Some(2));
    assert_eq!(run(&["solve", "0", "zero", "1", "1", "0", "0"]).status.code(), Some(2));
    assert_eq!(run(&["solve", "1", "0", "0", "1", "0", "0", "--calib", "/nonexistent"]).status.code(), Some(2));
}

#[test]
fn solve_domain_error_when_unsplittable() {
    let cal = tmp("weak.toml");
    std::fs::write(&cal, "schema = 1\n[[stage]]\nv_pi = 150.0\nv_0 = 10.0\nv_bias_a = 0.0\nv_bias_c = 0.0\n").unwrap();
    // δ = 0.9 along α = 0 needs 135 V on one stage
    let c = "1"; let s = "0";
    let target = {
        use polswitch_core::polarization::*;
        let r = LinearRetarder::new(0.0, 0.9).unwrap();
        rotate(&retarder_to_rotation(&r), &Sop::R).to_array()
    };
    let args: Vec<String> = [s, s, c].iter().map(|x| x.to_string())
        .chain(target.iter().map(|x| format!("{x}")))
        .collect();
    let mut cmd = bin();
    cmd.arg("solve").args(&args).args(["--stages", "1", "--calib"]).arg(&cal);
    assert_eq!(cmd.output().unwrap().status.code(), Some(3));
    let mut cmd = bin();
    cmd.arg("solve").args(&args).args(["--stages", "2", "--json", "--calib"]).arg(&cal);
    let o = cmd.output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let out: SolveOutput = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(out.active_stages, 2);
}

#[test]
fn ratecheck_table() {
    let o = run(&["ratecheck"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "profile,swing_v,transition_us,max_rate_hz");
    assert_eq!(lines[1], "default,0,0,inf");
    assert_eq!(lines[4], "default,140,8,125000");
    let o = run(&["ratecheck", "gain5"]);
    assert!(stdout(&o).contains("gain5,140,1,1000000"));
    assert_eq!(run(&["ratecheck", "nope"]).status.code(), Some(2));
}

#[test]
fn ratecheck_json_round_trip() {
    let o = run(&["ratecheck", "gain14", "--json"]);
    let rows: Vec<RateRow> = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].max_rate_hz, None);
    assert!((rows[3].max_rate_hz.unwrap() - 8000.0).abs() < 1e-6);
}

#[test]
fn ratecheck_custom_profile_from_env_config() {
    let cfg = tmp("custom.toml");
    std::fs::write(&cfg, "schema = 1\n[[driver.profiles]]\nname = \"slow\"\ngain = 14.0\nslew_rate = 0.7\nsupply = 70.0\nsettle_band = 0.01\npre_amp_gain = 1.0\n").unwrap();
    let o = bin().args(["ratecheck", "slow"]).env("POLSWITCH_CONFIG", &cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("slow,140,200,5000"));
    // the flag wins over the environment
    let o = bin().args(["--config", "/nonexistent.toml", "ratecheck"]).env("POLSWITCH_CONFIG", &cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn calibrate_writes_readable_file() {
    let out = tmp("cal.toml");
    let o = bin().args(["calibrate", "--seed", "4", "--out"]).arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let stages = read_calibration(&out).unwrap();
    assert_eq!(stages.len(), 3);
    assert!((stages[0].v_pi - 72.0).abs() < 1e-3);

    let o = run(&["calibrate", "--noise", "0.001", "--json"]);
    let c: CalibrateOutput = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(c.max_rel_err.iter().all(|e| *e < 0.05));

    // a calibrated file drives `solve`
    let mut cmd = bin();
    cmd.args(["solve", "0", "0", "1", "1", "0", "0", "--calib"]).arg(&out);
    assert_eq!(cmd.output().unwrap().status.code(), Some(0));
}

#[test]
fn simulate_matches_library_run() {
    let events = tmp("events.jsonl");
    std::fs::write(
        &events,
        "{\"tick\": 10, \"event\": {\"kind\": \"SetTarget\", \"sop\": [1, 0, 0]}}\n{\"tick\": 20, \"event\": {\"kind\": \"SetDrift\", \"sigma\": 0.01}}\n",
    )
    .unwrap();
    let frames_path = tmp("frames.jsonl");
    let summary_path = tmp("summary.csv");
    let o = bin()
        .args(["simulate", "--ticks", "50", "--seed", "7", "--events"])
        .arg(&events)
        .arg("--out")
        .arg(&frames_path)
        .arg("--summary")
        .arg(&summary_path)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&frames_path).unwrap();
    let cli_frames: Vec<LoopFrame> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let cfg = LoopConfig { max_ticks: 50, seed: 7, ..LoopConfig::default() };
    let script = EventScript::from_jsonl(std::fs::read_to_string(&events).unwrap().as_bytes()).unwrap();
    let (lib_frames, _) = run_frames(&cfg, &script).unwrap();
    assert_eq!(cli_frames, lib_frames);
    let summary = std::fs::read_to_string(&summary_path).unwrap();
    assert!(summary.starts_with("metric,value\nticks,50\n"));
    for key in ["tick", "sop_meas", "dop", "px", "py", "v_cmd", "v_out", "misalign_rad", "launch"] {
        assert!(text.lines().next().unwrap().contains(&format!("\"{key}\":")));
    }
}

#[test]
fn simulate_rejects_bad_script() {
    let events = tmp("bad.jsonl");
    std::fs::write(&events, "{\"tick\": 1, \"event\": {\"kind\": \"Warp\"}}\n").unwrap();
    let o = bin().args(["simulate", "--ticks", "5", "--events"]).arg(&events).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
