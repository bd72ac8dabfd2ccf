use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use iguide_core::io;
use iguide_core::pipeline::{
    run_estimate, Dataset, DatasetPaths, RunConfig, FRAMES_FILE, TRACKS_FILE, TRAJECTORY_FILE, TRUTH_FILE,
};

fn iguide(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iguide")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, scenario: &str, seed: &str) {
    let out = iguide(&["synth", "--scenario", scenario, "--seed", seed, "--out", s(dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn estimate_matches_library_golden() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    synth(&fx, "pure-translation", "2");
    let out = iguide(&["estimate", "--dataset", s(&fx), "--seed", "5", "--alpha", "0.95"]);
    assert!(out.status.success(), "{}", stderr(&out));

    let mut config = RunConfig {
        seed: 5,
        ..RunConfig::default()
    };
    config.estimator.guidance.alpha = 0.95;
    let dataset = Dataset::load(&DatasetPaths::in_dir(&fx)).unwrap();
    let expected = io::format_results_csv(&run_estimate(&dataset, &config).unwrap().rows);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), expected);
}

#[test]
fn json_output_carries_the_same_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    synth(&fx, "rotation", "3");
    let (csv, json) = (tmp.path().join("r.csv"), tmp.path().join("r.json"));
    for out in [&csv, &json] {
        let o = iguide(&["estimate", "--dataset", s(&fx), "--seed", "1", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let from_csv = io::read_results(&csv).unwrap();
    let from_json = io::read_results(&json).unwrap();
    assert_eq!(from_csv.len(), from_json.len());
    for (a, b) in from_csv.iter().zip(&from_json) {
        assert_eq!((a.frame, a.track, a.x_mean, a.sxy), (b.frame, b.track, b.x_mean, b.sxy));
        assert!(b.visual.is_some() && b.mode.is_some());
    }
}

#[test]
fn imu_replaces_missing_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    synth(&fx, "rotation", "6");
    let with_traj = iguide(&["estimate", "--dataset", s(&fx), "--seed", "2"]);
    fs::remove_file(fx.join(TRAJECTORY_FILE)).unwrap();
    let with_imu = iguide(&["estimate", "--dataset", s(&fx), "--seed", "2"]);
    assert!(with_imu.status.success(), "{}", stderr(&with_imu));
    let a = io::parse_results_csv(&String::from_utf8(with_traj.stdout).unwrap(), "traj").unwrap();
    let b = io::parse_results_csv(&String::from_utf8(with_imu.stdout).unwrap(), "imu").unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x.mean() - y.mean()).norm() < 1e-6);
    }
}

#[test]
fn missing_frame_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    synth(&fx, "pure-translation", "1");
    let frames = fs::read_to_string(fx.join(FRAMES_FILE)).unwrap();
    let kept: Vec<&str> = frames.lines().filter(|l| !l.starts_with("2,")).collect();
    fs::write(fx.join(FRAMES_FILE), kept.join("\n") + "\n").unwrap();
    let out = iguide(&["estimate", "--dataset", s(&fx), "--seed", "1"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing frame 2"), "{}", stderr(&out));
}

#[test]
fn malformed_tracks_report_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    synth(&fx, "pure-translation", "1");
    let tracks = fs::read_to_string(fx.join(TRACKS_FILE)).unwrap();
    let mut lines: Vec<String> = tracks.lines().map(String::from).collect();
    lines[2] = "0,1,abc,4.0".into();
    fs::write(fx.join(TRACKS_FILE), lines.join("\n") + "\n").unwrap();
    let out = iguide(&["estimate", "--dataset", s(&fx), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("tracks.csv:3"), "{err}");
}

#[test]
fn seed_is_required() {
    let tmp = tempfile::tempdir().unwrap();
    let out = iguide(&["estimate", "--dataset", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--seed"));
    let out = iguide(&["synth", "--scenario", "rotation", "--out", s(tmp.path())]);
    assert!(!out.status.success());
}

#[test]
fn unknown_scenario_lists_options() {
    let tmp = tempfile::tempdir().unwrap();
    let out = iguide(&["synth", "--scenario", "sunset", "--seed", "1", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    for name in ["pure-translation", "blurred-edge", "rotation"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn config_file_errors_carry_position() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        "{\n  \"estimator\": {\n    \"guidance\": {\"alpha\": \"high\"}\n  }\n}\n",
    )
    .unwrap();
    let out = iguide(&[
        "estimate",
        "--dataset",
        s(tmp.path()),
        "--seed",
        "1",
        "--config",
        s(&cfg),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("cfg.json:3:"), "{}", stderr(&out));
}

#[test]
fn eval_and_overlay_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    synth(&fx, "blurred-edge", "9");
    let results = tmp.path().join("r.csv");
    let o = iguide(&["estimate", "--dataset", s(&fx), "--seed", "9", "--out", s(&results)]);
    assert!(o.status.success());

    let metrics = tmp.path().join("m.json");
    let o = iguide(&[
        "eval",
        "--results",
        s(&results),
        "--truth",
        s(&fx.join(TRUTH_FILE)),
        "--out",
        s(&metrics),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m["matched"], 10);

    let svg = tmp.path().join("o.svg");
    let image = fx.join("images/frame_0001.pgm");
    let o = iguide(&[
        "overlay",
        "--image",
        s(&image),
        "--results",
        s(&results),
        "--out",
        s(&svg),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--frame"));
    let o = iguide(&[
        "overlay",
        "--image",
        s(&image),
        "--results",
        s(&results),
        "--frame",
        "1",
        "--out",
        s(&svg),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read(&svg).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).matches("class=\"track\"").count(), 5);
    let o = iguide(&[
        "overlay",
        "--image",
        s(&image),
        "--results",
        s(&results),
        "--frame",
        "1",
        "--out",
        s(&svg),
    ]);
    assert!(o.status.success());
    assert_eq!(fs::read(&svg).unwrap(), first);

    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, format!("{}\n", io::RESULTS_HEADER)).unwrap();
    let o = iguide(&[
        "overlay",
        "--image",
        s(&image),
        "--results",
        s(&empty),
        "--out",
        s(&svg),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&svg).unwrap();
    assert!(text.contains("<image") && !text.contains("<ellipse"));
}

#[test]
fn remote_server_flag() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let (addr, _h) = rt
        .block_on(iguide_service::spawn("127.0.0.1:0".parse().unwrap()))
        .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let out = iguide(&[
        "--server",
        &format!("http://{addr}"),
        "synth",
        "--scenario",
        "rotation",
        "--seed",
        "1",
        "--out",
        s(tmp.path()),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join(TRUTH_FILE).exists());
}
