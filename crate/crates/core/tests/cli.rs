use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn gridbase(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridbase"))
        .args(args)
        .env_remove("GRIDBASE_PARAMS")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn synth_matches_shipped_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    for day in ["hot", "moderate", "cold"] {
        let path = dir.path().join(format!("{day}.csv"));
        let out = gridbase(&["synth", "--day", day, "--seed", "1", "--out", s(&path)]);
        assert!(out.status.success());
        let written = std::fs::read(&path).unwrap();
        let shipped = std::fs::read(fixture(&format!("{day}.csv"))).unwrap();
        assert_eq!(written, shipped, "{day} fixture drifted from the generator");
    }
}

#[test]
fn run_day_writes_one_row_per_hour() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("hot.csv");
    let out = gridbase(&[
        "run-day",
        "--profile",
        s(&fixture("hot.csv")),
        "--mask",
        "T_oa",
        "--alpha",
        "0.05",
        "--out",
        s(&out_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(&out_path).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(&headers[0], "hour");
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 7);
    for (row, hour) in rows.iter().zip(9..) {
        assert_eq!(row[0].parse::<u32>().unwrap(), hour);
        let j0: f64 = row[1].parse().unwrap();
        assert!(j0.is_finite() && j0 > 0.0);
    }
}

#[test]
fn json_export_is_an_array_of_hours() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("cold.json");
    let out = gridbase(&[
        "run-day",
        "--profile",
        s(&fixture("cold.csv")),
        "--mask",
        "c_f",
        "--alpha",
        "0.05",
        "--format",
        "json",
        "--samples",
        "500",
        "--out",
        s(&out_path),
    ]);
    assert!(out.status.success());
    let doc: Value = serde_json::from_slice(&std::fs::read(&out_path).unwrap()).unwrap();
    let hours = doc.as_array().expect("array");
    assert_eq!(hours.len(), 7);
    for h in hours {
        let beta_half = h["beta_holder"].as_f64().unwrap();
        let k = h["k_plus"].as_f64().unwrap().abs().max(h["k_minus"].as_f64().unwrap().abs());
        assert!(beta_half.is_finite() && k.is_finite());
        assert!(h["j0"].as_f64().unwrap() > 0.0);
        assert!(k <= h["beta_sample"].as_f64().unwrap());
    }
}

#[test]
fn solve_reports_kkt_point_with_metadata() {
    let doc = stdout_json(&gridbase(&["solve", "--profile", s(&fixture("moderate.csv")), "--hour", "12"]));
    assert_eq!(doc["metadata"]["hour"], 12);
    assert_eq!(doc["metadata"]["prng"], "ChaCha8Rng");
    assert!(doc["metadata"]["tool_version"].as_str().unwrap().starts_with("gridbase "));
    let kkt = &doc["kkt"];
    assert!(kkt["stationarity_residual"].as_f64().unwrap() <= 1e-6);
    assert!(kkt["feasibility_violation"].as_f64().unwrap() <= 1e-8);
    let x0 = kkt["x0"].as_object().unwrap();
    assert_eq!(x0.len(), 9);
    assert!(x0["q_h"].as_f64().unwrap().min(x0["q_c"].as_f64().unwrap()) <= 1e-6 * 40_833.4);
}

#[test]
fn sensitivity_and_bounds_are_consistent() {
    let p = fixture("hot.csv");
    let base = ["--profile", s(&p), "--hour", "13", "--mask", "T_oa", "--alpha", "0.05"];
    let mut args = vec!["sensitivity"];
    args.extend(base);
    let sens = stdout_json(&gridbase(&args));
    assert_eq!(sens["g"].as_array().unwrap().len(), 1);

    let bound = |method: &str| {
        let mut args = vec!["bound", "--method", method];
        args.extend(base);
        stdout_json(&gridbase(&args))["bound"]["beta_W"].as_f64().unwrap()
    };
    let (half, literal, sample) = (bound("holder"), bound("holder-literal"), bound("sample"));
    assert!(half > 0.0 && half <= literal);
    assert!(sample <= literal * (1.0 + 1e-9));
}

#[test]
fn usage_errors_exit_two() {
    let out = gridbase(&["solve", "--profile", "/nonexistent/day.csv", "--hour", "9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    let out = gridbase(&["solve", "--profile", s(&fixture("hot.csv")), "--hour", "3"]);
    assert_eq!(out.status.code(), Some(2));

    let out = gridbase(&["sensitivity", "--profile", s(&fixture("hot.csv")), "--hour", "9", "--mask", "T_x", "--alpha", "0.05"]);
    assert_ne!(out.status.code(), Some(0));

    let out = gridbase(&["run-day", "--profile", s(&fixture("hot.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_profile_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    let text = std::fs::read_to_string(fixture("hot.csv")).unwrap();
    let broken: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 4 { l.replacen(",22,", ",warm,", 1) } else { l.to_string() })
        .collect();
    std::fs::write(&path, broken.join("\n")).unwrap();
    let out = gridbase(&["solve", "--profile", s(&path), "--hour", "9"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("line 5"), "{msg}");
}

#[test]
fn params_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.json");
    std::fs::write(&path, r#"{"alpha_el": 2.5}"#).unwrap();
    let p = fixture("hot.csv");
    let base = stdout_json(&gridbase(&["solve", "--profile", s(&p), "--hour", "9"]));
    let custom = stdout_json(&gridbase(&["solve", "--profile", s(&p), "--hour", "9", "--params", s(&path)]));
    let j = |d: &Value| d["kkt"]["j0_W"].as_f64().unwrap();
    assert!(j(&custom) < j(&base));
    assert_eq!(custom["metadata"]["parameters"]["alpha_el"], 2.5);
}

#[test]
fn validate_passes_on_defaults() {
    let out = gridbase(&["validate"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.contains("[PASS]"));
    assert!(!text.contains("[FAIL]"));
}
