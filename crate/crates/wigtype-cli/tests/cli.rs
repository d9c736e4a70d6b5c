use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn wigtype(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wigtype")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = wigtype(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect()
}

fn sidecar(dir: &Path, command: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(format!("{command}.json"))).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn constant_profile_density_is_the_semicircle() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["spectrum", "--fixture", "constant", "--n", "400", "--out", out]);
    let rows = read_csv(&dir.path().join("density.csv"));
    assert_eq!(rows.len(), 801);
    for r in &rows {
        let exact = if r[0].abs() < 2.0 { (4.0 - r[0] * r[0]).sqrt() / (2.0 * PI) } else { 0.0 };
        assert!((r[1] - exact).abs() <= 1e-6, "rho({}) = {} vs {exact}", r[0], r[1]);
    }
    let q = read_csv(&dir.path().join("quantiles.csv"));
    assert_eq!(q.len(), 400);
    assert!(q.windows(2).all(|w| w[0][1] < w[1][1]));

    let s = sidecar(dir.path(), "spectrum");
    assert!((s["result"]["beta"].as_f64().unwrap() - 2.0).abs() <= s["result"]["grid_step"].as_f64().unwrap());
    assert_eq!(s["manifest"]["command"], "spectrum");
    assert_eq!(s["manifest"]["inputs"]["profile"]["name"], "constant");
    assert_eq!(s["manifest"]["spectrum"]["grid_points"], 801);
}

#[test]
fn rerunning_the_recorded_arguments_reproduces_the_bundle() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["spectrum", "--fixture", "three_block", "--n", "120", "--grid.points", "401", "--out", out]);
    let first: Vec<Vec<u8>> = ["density.csv", "quantiles.csv", "spectrum.json"].iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
    let args: Vec<String> = sidecar(dir.path(), "spectrum")["manifest"]["args"]
        .as_array()
        .unwrap()
        .iter()
        .skip(1)
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    for f in ["density.csv", "quantiles.csv", "spectrum.json"] {
        fs::remove_file(dir.path().join(f)).unwrap();
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run_ok(&refs);
    for (f, bytes) in ["density.csv", "quantiles.csv", "spectrum.json"].iter().zip(first) {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn input_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad = write(dir.path(), "bad.json", "{\"kind\": \"constant\", ");
    let r = wigtype(&["spectrum", "--profile", &bad, "--out", out]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!r.stderr.is_empty());

    let r = wigtype(&["spectrum", "--fixture", "two_block", "--n", "0", "--out", out]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("DegenerateInput"));

    let asym = write(dir.path(), "asym.json", r#"{"kind": "equal_blocks", "n": 10, "values": [[1, 2], [3, 1]]}"#);
    assert_eq!(wigtype(&["spectrum", "--profile", &asym, "--out", out]).status.code(), Some(2));

    let dense = write(dir.path(), "dense.json", r#"{"kind": "dense", "values": [[1, 1], [1, 1]]}"#);
    assert_eq!(wigtype(&["spectrum", "--profile", &dense, "--n", "4", "--out", out]).status.code(), Some(2));

    assert_eq!(wigtype(&["spectrum", "--out", out]).status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = TempDir::new().unwrap();
    let r = wigtype(&["spectrum", "--fixture", "constant", "--n", "100", "--tol.qve", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("NonConvergence"));
}

#[test]
fn variance_reports() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let zero = write(dir.path(), "zero.json", r#"{"kind": "zero"}"#);
    run_ok(&["variance", "--fixture", "two_block", "--n", "1000", "--testfn", &zero, "--out", out]);
    assert_eq!(sidecar(dir.path(), "variance")["result"]["value"].as_f64(), Some(0.0));

    // Bump of scale t = 1e-2 with descent width (beta - alpha) / 20 on the two-block fixture.
    let c = 2.0 * 2.142745384432 / 20.0;
    let bump = write(
        dir.path(),
        "bump.json",
        &format!(r#"{{"kind": "half_regular_bump", "t": 0.01, "M": 10, "E0": 0, "E1": {c}, "cprime": {c}, "Cprime": 200}}"#),
    );
    run_ok(&["variance", "--fixture", "two_block", "--n", "1000", "--testfn", &bump, "--out", out]);
    let base = sidecar(dir.path(), "variance")["result"].clone();
    let v = base["value"].as_f64().unwrap();
    assert!((v - 0.01f64.ln().abs() / (PI * PI)).abs() <= 0.15, "{v}");

    run_ok(&["variance", "--fixture", "two_block", "--n", "1000", "--testfn", &bump, "--refine", "8", "--out", out]);
    let fine = sidecar(dir.path(), "variance")["result"]["value"].as_f64().unwrap();
    assert!((fine - v).abs() <= base["error_estimate"].as_f64().unwrap(), "{v} {fine}");
    assert_eq!(read_csv(&dir.path().join("variance.csv"))[0][0], fine);
}

#[test]
fn expectation_vanishes_for_the_zero_function() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let zero = write(dir.path(), "zero.json", r#"{"kind": "zero"}"#);
    run_ok(&["expectation", "--fixture", "three_block", "--n", "200", "--testfn", &zero, "--out", out]);
    assert_eq!(sidecar(dir.path(), "expectation")["result"]["total"].as_f64(), Some(0.0));
}

#[test]
fn deterministic_subcommands_produce_tables() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();

    run_ok(&["qve", "--fixture", "two_block", "--n", "100", "--grid.points", "5", "--eta", "0.01,0.1", "--out", out]);
    let q = read_csv(&dir.path().join("qve.csv"));
    assert_eq!(q.len(), 5 * 2 * 2);
    assert!(q.iter().all(|r| r[4] > 0.0 && r[5] < 1e-9));

    run_ok(&["freeconv", "--fixture", "constant", "--n", "200", "--t", "0.21", "--out", out]);
    let f = sidecar(dir.path(), "freeconv")["result"].clone();
    assert!((f["spectrum"]["beta"].as_f64().unwrap() - 2.2).abs() <= 1e-4);

    run_ok(&["stability-scan", "--fixture", "three_block", "--n", "90", "--grid.points", "9", "--out", out]);
    let s = read_csv(&dir.path().join("stability.csv"));
    assert_eq!(s.len(), 9);
    assert!(s.iter().all(|r| r[1] <= 1.0 + 1e-12 && r[2] > 0.0));

    run_ok(&["dbm", "--fixture", "goe", "--n", "30", "--t", "0.02", "--dt", "0.001", "--mode", "sde-euler", "--record-every", "10", "--seed", "4", "--out", out]);
    let d = read_csv(&dir.path().join("dbm.csv"));
    assert_eq!(d.len(), 3 * 30);
    for snap in d.chunks(30) {
        assert!(snap.windows(2).all(|w| w[0][2] < w[1][2]));
    }
}

const MANIFEST: &str = r#"{
    "statistic": [{"name": "sev"}, {"name": "gap"}, {"name": "lss", "testfn": {"kind": "regular", "E0": 0.3, "t": 0.8}}],
    "ensemble": {"profile": {"kind": "fixture", "name": "two_block", "n": 60}, "entry_law": {"law": "rademacher_scaled"}},
    "samples": 48,
    "seed": 21
}"#;

#[test]
fn empty_simulation_writes_an_empty_bundle() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let m = write(dir.path(), "m.json", &MANIFEST.replace("\"samples\": 48", "\"samples\": 0"));
    run_ok(&["simulate", "--manifest", &m, "--out", out]);
    let s = sidecar(dir.path(), "simulate");
    let stats = s["result"].as_array().unwrap();
    assert_eq!(stats.len(), 3);
    for st in stats {
        assert_eq!(st["accepted"], 0);
        assert!(read_csv(&dir.path().join(st["samples_file"].as_str().unwrap())).is_empty());
    }
}

#[test]
fn simulation_bundles_do_not_depend_on_worker_count() {
    let dir = TempDir::new().unwrap();
    let m = write(dir.path(), "m.json", MANIFEST);
    let mut bundles = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(format!("w{workers}"));
        run_ok(&["simulate", "--manifest", &m, "--workers", workers, "--out", out.to_str().unwrap()]);
        let mut s = sidecar(&out, "simulate");
        let files: Vec<Vec<u8>> = s["files"].as_array().unwrap().iter().map(|f| fs::read(out.join(f.as_str().unwrap())).unwrap()).collect();
        bundles.push((s["result"].take(), files));
    }
    assert_eq!(bundles[0], bundles[1]);
    let hist = read_csv(&dir.path().join("w1").join("histogram_0_sev.csv"));
    assert_eq!(hist.len(), 40);
    assert_eq!(hist.iter().map(|r| r[2]).sum::<f64>(), 48.0);

    // The seed flag overrides the manifest seed.
    let out = dir.path().join("seeded");
    run_ok(&["simulate", "--manifest", &m, "--seed", "22", "--out", out.to_str().unwrap()]);
    assert_eq!(sidecar(&out, "simulate")["result"][0]["seed"], 22);
}

#[test]
fn goe_single_eigenvalue_variance_is_in_the_band() {
    let dir = TempDir::new().unwrap();
    let m = write(
        dir.path(),
        "sev.json",
        r#"{"statistic": {"name": "sev"}, "ensemble": {"profile": {"kind": "fixture", "name": "goe", "n": 1000}, "entry_law": {"law": "gaussian"}}, "samples": 400, "seed": 31}"#,
    );
    run_ok(&["simulate", "--manifest", &m, "--out", dir.path().to_str().unwrap()]);
    let v = sidecar(dir.path(), "simulate")["result"][0]["summary"]["variance"].as_f64().unwrap();
    assert!((0.07..=0.14).contains(&v), "variance {v}, target 1/pi^2");
}
