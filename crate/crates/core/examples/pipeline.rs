//! The batch commands driven from Rust: simulate a panel, write it as CSV, and
//! run `estimate`, `select`, `infer`, `fit-dgp` and `simulate` on it. The same
//! argument lists work with the `gmmsc` binary.

use std::fs;

use gmm_sce::cli;
use gmm_sce::simlab::{simulate_units, ArModel, FittedDGP};
use nalgebra::DMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("gmm_sce_pipeline_{}", std::process::id()));
    fs::create_dir_all(&dir)?;

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
    )?;
    let units: Vec<usize> = (0..10).collect();
    let treated: Vec<bool> = units.iter().map(|&u| u == 0 || u >= 8).collect();
    let sim = simulate_units(&dgp, &units, &treated, 80, 20, Some(&[1.0; 20]), 9)?;
    let panel = dir.join("panel.csv");
    sim.panel.write_long(fs::File::create(&panel)?)?;

    let panel = panel.to_str().unwrap();
    let out = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let runs: Vec<Vec<String>> = vec![
        vec!["estimate", "--panel", panel, "--unit", "TGT", "--instruments", "F,G,X,Y", "--out-dir", &out("est")],
        vec!["select", "--panel", panel, "--unit", "TGT", "--method", "two-step", "--estimate", "gmm", "--out-dir", &out("sel")],
        vec!["infer", "--panel", panel, "--unit", "TGT", "--select", "two-step", "--seed", "1", "--draws-out", &out("inf/draws.csv"), "--out-dir", &out("inf")],
        vec!["fit-dgp", "--panel", panel, "--out-dir", &out("fit")],
    ]
    .into_iter()
    .map(|a| a.into_iter().map(String::from).collect())
    .collect();
    for args in &runs {
        let code = cli::run(std::iter::once("gmmsc".to_string()).chain(args.iter().cloned()));
        println!("gmmsc {} -> exit {code}", args[0]);
    }

    let design = dir.join("design.json");
    fs::write(&design, r#"{"t0": [40], "t1": 20, "n0": [5], "n1": 1, "reps": 50, "estimators": ["gmm", "ols", "uniform"]}"#)?;
    let code = cli::run([
        "gmmsc", "simulate", "--dgp", &out("fit/dgp.json"), "--design", design.to_str().unwrap(), "--seed", "3", "--out-dir", &out("sim"),
    ]);
    println!("gmmsc simulate -> exit {code}");

    // Unknown ids are usage errors (exit 2).
    let code = cli::run(["gmmsc", "estimate", "--panel", panel, "--unit", "TGT", "--instruments", "NOPE", "--out-dir", &out("bad")]);
    println!("unknown instrument -> exit {code}");

    let ci: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("inf/ci.json"))?)?;
    println!("\ninterval {}", ci["result"]["interval"]);
    for line in fs::read_to_string(dir.join("sim/sim_report.csv"))?.lines().filter(|l| !l.starts_with('#')) {
        println!("{line}");
    }
    fs::remove_dir_all(&dir)?;
    Ok(())
}
