use std::path::Path;
use std::process::{Command, Output};

use driftlab_core::Ensemble;
use serde_json::Value;

fn driftlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftlab"))
        .args(args)
        .env_remove("DRIFTLAB_THREADS")
        .output()
        .unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    serde_json::from_str(line).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn solid_rotation_preset_closes_the_orbit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "rot.json",
        r#"{"flow": {"family": "solid_rotation"}, "grid": {"k_steps": 40}, "simulate": {"seeds_km": [[160, 100]]}}"#,
    );
    let out = dir.path().join("sim");
    let o = driftlab(&["--config", &cfg, "--out", out.to_str().unwrap(), "simulate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let e = Ensemble::read(&out.join("ensemble.dtrj")).unwrap();
    let worst = e.trajectories[0]
        .positions
        .iter()
        .map(|p| ((p.0 - 160.0).hypot(p.1 - 160.0) - 60.0).abs() / 60.0)
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "radius drift {worst:e}");
    // 40 steps of 6 h cover the 240 h period.
    assert!(e.trajectories[0].positions[40].0 - 160.0 < 1e-4);
}

#[test]
fn reference_against_itself_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let o = driftlab(&[
        "--out",
        sim.to_str().unwrap(),
        "--seed",
        "3",
        "simulate",
        "--nx",
        "16",
        "--ny",
        "16",
        "--radius-km",
        "15",
        "--n-per-seed",
        "6",
    ]);
    assert!(o.status.success());
    let ens = sim.join("ensemble.dtrj");
    let eval = dir.path().join("eval");
    let o = driftlab(&[
        "--out",
        eval.to_str().unwrap(),
        "evaluate",
        "--reference",
        ens.to_str().unwrap(),
        "--simulated",
        ens.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["liu_index"], 0.0);
    assert_eq!(metrics["final_separation_mean_km"], 0.0);
    let csv = std::fs::read_to_string(eval.join("separation.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cols[2..].iter().all(|v| *v == 0.0), "{line}");
    }
}

#[test]
fn snapshot_records_version_and_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f");
    let o = driftlab(&["--out", out.to_str().unwrap(), "--seed", "11", "gen-field", "--nx", "8", "--ny", "8"]);
    assert!(o.status.success());
    let snap: Value = serde_json::from_str(&std::fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(snap["tool_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(snap["seed"], 11);
    assert_eq!(snap["grid"]["nx"], 8);
    assert_eq!(snap["train"]["seed"], 11);
    assert!(out.join("field.drft").exists());
    assert!(out.join("vorticity_t0.svg").exists());
}

#[test]
fn missing_file_exits_with_2() {
    let o = driftlab(&["--config", "/nonexistent/config.json", "gen-field"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"]["kind"], "missing_file");

    let dir = tempfile::tempdir().unwrap();
    let o = driftlab(&[
        "--out",
        dir.path().to_str().unwrap(),
        "evaluate",
        "--reference",
        "/nonexistent/a.dtrj",
        "--simulated",
        "/nonexistent/b.dtrj",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    for text in [r#"{"grid": {"nx": "many"}}"#, r#"{"unknown": 1}"#, "{not json", r#"{"grid": {"nx": 0}}"#] {
        let cfg = write(dir.path(), "bad.json", text);
        let o = driftlab(&["--config", &cfg, "gen-field"]);
        assert_eq!(o.status.code(), Some(3), "{text}");
        assert_eq!(error_line(&o)["error"]["exit_code"], 3);
    }
}

#[test]
fn numerical_abort_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "tiny.json",
        r#"{"grid": {"nx": 8, "ny": 8, "k_steps": 3}, "dataset": {"n_traj": 20}, "train": {"epochs": 1, "batch_size": 4}}"#,
    );
    let out = dir.path().join("o");
    let o = driftlab(&["--config", &cfg, "--out", out.to_str().unwrap(), "train", "--lr", "1e300"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(error_line(&o)["error"]["kind"], "numerical_abort");
}

#[test]
fn usage_errors_exit_with_64() {
    let o = driftlab(&["simulate", "--integrator", "leapfrog"]);
    assert_eq!(o.status.code(), Some(64));
    let o = driftlab(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn thread_count_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str, name: &str| {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_driftlab"))
            .args(["--out", out.to_str().unwrap(), "simulate", "--nx", "16", "--ny", "16", "--radius-km", "20", "--n-per-seed", "30"])
            .env("DRIFTLAB_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success());
        std::fs::read(out.join("ensemble.dtrj")).unwrap()
    };
    assert_eq!(run("1", "a"), run("3", "b"));
    let o = Command::new(env!("CARGO_BIN_EXE_driftlab"))
        .args(["selftest"])
        .env("DRIFTLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn oracle_inversion_writes_the_report_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "inv.json",
        r#"{"grid": {"nx": 16, "ny": 16, "h_km": 20.0, "k_steps": 8},
            "flow": {"family": "double_gyre",
                     "anomaly": [{"center_km": [150.0, 170.0], "radius_km": 50.0, "peak_speed": 0.8}]},
            "simulate": {"seeds_km": [[140.0, 130.0]]},
            "inversion": {"n_steps": 40, "time_constant": true}}"#,
    );
    let out = dir.path().join("inv");
    let o = driftlab(&["--config", &cfg, "--out", out.to_str().unwrap(), "invert"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["anomaly.drft", "loss.csv", "trajectories.csv", "vorticity_anomaly.svg", "vorticity_corrected.svg", "inversion.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("inversion.json")).unwrap()).unwrap();
    assert!(report["best_loss"].as_f64().unwrap() < report["initial_loss"].as_f64().unwrap());
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 41);
}
