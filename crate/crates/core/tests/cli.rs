use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gmm_sce::simlab::{simulate_units, ArModel, FittedDGP};
use nalgebra::DMatrix;
use serde_json::Value;
use tempfile::TempDir;

/// Long-format panel: TGT treated from period 61 with effect 1; X and Y
/// treated too; A..G never treated.
fn fixture() -> (TempDir, PathBuf) {
    #[rustfmt::skip]
    let mu = DMatrix::from_row_slice(2, 10, &[
        0.6, 1.0, 0.2, 0.9, 0.4, 1.3, 0.1, 0.7, 1.1, 0.5,
        0.5, 0.1, 0.9, 0.4, 0.8, 0.3, 1.2, 0.6, 0.2, 1.0,
    ]);
    let ids = ["TGT", "A", "B", "C", "D", "E", "F", "G", "X", "Y"].map(String::from).to_vec();
    let dgp = FittedDGP::from_parts(
        Some(ids),
        mu,
        vec![ArModel::ar(0.5, vec![0.5], 1.0), ArModel::white_noise(1.0, 1.0)],
        vec![0.2; 10],
    )
    .unwrap();
    let units: Vec<usize> = (0..10).collect();
    let treated: Vec<bool> = units.iter().map(|&u| u == 0 || u >= 8).collect();
    let sim = simulate_units(&dgp, &units, &treated, 60, 15, Some(&[1.0; 15]), 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("panel.csv");
    sim.panel.write_long(fs::File::create(&panel).unwrap()).unwrap();
    (dir, panel)
}

fn gmmsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmmsc")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) {
    let o = gmmsc(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn uniform_weights_are_a_quarter_each() {
    let (dir, panel) = fixture();
    let out = dir.path().join("u");
    run_ok(&["estimate", "--panel", s(&panel), "--unit", "TGT", "--controls", "A,B,C,D", "--method", "uniform", "--out-dir", s(&out)]);
    let v = json(&out.join("estimate.json"));
    let w = v["result"]["estimate"]["weights"].as_array().unwrap();
    assert_eq!(w.len(), 4);
    for x in w {
        assert_eq!(x["weight"].as_f64().unwrap(), 0.25);
    }
    assert_eq!(v["command"], "estimate");
}

#[test]
fn unknown_unit_is_a_usage_error_naming_the_id() {
    let (dir, panel) = fixture();
    let o = gmmsc(&["estimate", "--panel", s(&panel), "--unit", "TGT", "--instruments", "NOPE", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("NOPE"));
    assert!(!dir.path().join("estimate.json").exists());
}

#[test]
fn select_then_estimate_matches_estimate_with_select() {
    let (dir, panel) = fixture();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["select", "--panel", s(&panel), "--unit", "TGT", "--method", "sequential", "--estimate", "gmm", "--out-dir", s(&a)]);
    run_ok(&["estimate", "--panel", s(&panel), "--unit", "TGT", "--select", "sequential", "--out-dir", s(&b)]);
    let (ea, eb) = (json(&a.join("estimate.json")), json(&b.join("estimate.json")));
    assert_eq!(ea["result"]["estimate"], eb["result"]["estimate"]);
    assert_eq!(ea["result"]["selection"], eb["result"]["selection"]);
    assert_eq!(ea["result"]["selection"], json(&a.join("selection.json"))["result"]["selection"]);
}

#[test]
fn selection_trace_lists_statistics_and_critical_values() {
    // Upper 5% points of the chi-squared distribution.
    let table = [3.841458820694124, 5.991464547107979, 7.814727903251178, 9.487729036781154, 11.070497693516351, 12.591587243743977, 14.067140449340169, 15.50731305586545, 16.918977604620448, 18.307038053275146];
    let (dir, panel) = fixture();
    run_ok(&["select", "--panel", s(&panel), "--unit", "TGT", "--out-dir", s(dir.path())]);
    let text = fs::read_to_string(dir.path().join("selection_trace.csv")).unwrap();
    assert!(text.starts_with("# command=select\n"));
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    assert_eq!(rdr.headers().unwrap(), vec!["step", "controls", "instruments", "df", "sh_statistic", "chi2_critical"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert!(!rows.is_empty());
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), k);
        let j = row[1].split(' ').count();
        let kk = row[2].split(' ').filter(|x| !x.is_empty()).count();
        let df: usize = row[3].parse().unwrap();
        assert_eq!(df, (kk + 1).saturating_sub(j).max(1));
        let crit: f64 = row[5].parse().unwrap();
        assert!((crit - table[df - 1]).abs() < 1e-6, "df {df}: {crit}");
        assert!(row[4].parse::<f64>().unwrap() >= 0.0);
    }
    // Every step but the last was rejected.
    for row in &rows[..rows.len() - 1] {
        assert!(row[4].parse::<f64>().unwrap() >= row[5].parse::<f64>().unwrap());
    }
}

#[test]
fn invalid_settings_exit_with_usage_code() {
    let (dir, panel) = fixture();
    let d = s(dir.path());
    let p = s(&panel);
    let cases: Vec<Vec<&str>> = vec![
        vec!["select", "--panel", p, "--unit", "TGT", "--alpha", "1.5", "--out-dir", d],
        vec!["select", "--panel", p, "--unit", "TGT", "--alpha", "0", "--out-dir", d],
        vec!["infer", "--panel", p, "--unit", "TGT", "--instruments", "F,G,X,Y", "--m", "61", "--out-dir", d],
        vec!["infer", "--panel", p, "--unit", "TGT", "--instruments", "F,G,X,Y", "--draws", "10", "--out-dir", d],
        vec!["estimate", "--panel", p, "--unit", "TGT", "--threads", "0", "--out-dir", d],
        vec!["estimate", "--panel", p, "--unit", "TGT", "--no-such-flag", "--out-dir", d],
        vec!["estimate", "--panel", "/nonexistent/panel.csv", "--unit", "TGT", "--out-dir", d],
    ];
    for args in cases {
        assert_eq!(gmmsc(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn zero_reps_is_a_usage_error() {
    let (dir, panel) = fixture();
    let fit = dir.path().join("fit");
    run_ok(&["fit-dgp", "--panel", s(&panel), "--out-dir", s(&fit)]);
    let dgp = json(&fit.join("dgp.json"));
    // Only never-treated units enter the fit.
    assert_eq!(dgp["result"]["dropped_units"], serde_json::json!(["TGT", "X", "Y"]));
    let o = gmmsc(&["simulate", "--dgp", s(&fit.join("dgp.json")), "--reps", "0", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn wider_level_nests_narrower() {
    let (dir, panel) = fixture();
    let mut bounds = Vec::new();
    for level in ["0.10", "0.05"] {
        let out = dir.path().join(level);
        run_ok(&["infer", "--panel", s(&panel), "--unit", "TGT", "--instruments", "F,G,X,Y", "--level", level, "--draws", "400", "--seed", "7", "--out-dir", s(&out)]);
        let v = json(&out.join("ci.json"));
        let ci = &v["result"]["interval"];
        bounds.push((ci["lower"].as_f64().unwrap(), ci["upper"].as_f64().unwrap(), ci["point"].as_f64().unwrap()));
    }
    let ((l90, u90, p90), (l95, u95, p95)) = (bounds[0], bounds[1]);
    assert_eq!(p90, p95);
    assert!(l95 <= l90 && u90 <= u95 && l90 < u90);
}

#[test]
fn seed_controls_the_draws() {
    let (dir, panel) = fixture();
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let draws = out.join("draws.csv");
        run_ok(&["infer", "--panel", s(&panel), "--unit", "TGT", "--instruments", "F,G,X,Y", "--seed", seed, "--draws", "200", "--draws-out", s(&draws), "--out-dir", s(&out)]);
        fs::read_to_string(draws).unwrap()
    };
    let (a, b, c) = (run("1", "a"), run("1", "b"), run("2", "c"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().filter(|l| !l.starts_with('#')).count(), 201);
}

#[test]
fn gap_csv_carries_provenance_and_all_role_periods() {
    let (dir, panel) = fixture();
    run_ok(&["estimate", "--panel", s(&panel), "--unit", "TGT", "--instruments", "F,G,X,Y", "--out-dir", s(dir.path())]);
    let text = fs::read_to_string(dir.path().join("gap.csv")).unwrap();
    let comments: Vec<&str> = text.lines().take_while(|l| l.starts_with('#')).collect();
    assert_eq!(comments.len(), 4);
    assert!(comments[0] == "# command=estimate" && comments[2].starts_with("# input_sha256="));
    let est = json(&dir.path().join("estimate.json"));
    assert_eq!(comments[2], format!("# input_sha256={}", est["input_sha256"].as_str().unwrap()));
    let body: Vec<&str> = text.lines().skip(4).collect();
    assert_eq!(body[0], "period,actual,synthetic,gap");
    assert_eq!(body.len(), 1 + 75);
    for line in &body[1..] {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((f[1] - f[2] - f[3]).abs() < 1e-12);
    }
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let (dir, panel) = fixture();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, format!(r#"{{"panel": "{}", "unit": "TGT", "controls": ["A", "B"], "method": "ols"}}"#, s(&panel))).unwrap();
    let out = dir.path().join("o");
    run_ok(&["estimate", "--config", s(&cfg), "--method", "uniform", "--out-dir", s(&out)]);
    let v = json(&out.join("estimate.json"));
    assert_eq!(v["result"]["estimate"]["method"], "uniform");
    assert_eq!(v["config"]["controls"], serde_json::json!(["A", "B"]));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"colour": 1}"#).unwrap();
    assert_eq!(gmmsc(&["estimate", "--config", s(&bad), "--out-dir", s(&out)]).status.code(), Some(2));
}
