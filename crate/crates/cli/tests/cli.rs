use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const FAST: &str = r#"
[dgp]
n = 400

[net.train]
max_epochs = 150
"#;

fn cdml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdml")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn ok(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn theta_hat(v: &Value) -> f64 {
    v["result"]["theta_hat"].as_f64().unwrap()
}

#[test]
fn simulate_writes_rows_and_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[dgp]\nn = 2000\n");
    let out = dir.path().join("a");
    ok(&cdml(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "5"]));
    let text = fs::read_to_string(out.join("data.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2001);
    assert_eq!(lines[0].split(',').count(), 12);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 12));
    let truth: Value = serde_json::from_str(&fs::read_to_string(out.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["n"], 2000);
}

#[test]
fn simulate_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[dgp]\nn = 1\n");
    let out = dir.path().join("one");
    ok(&cdml(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]));
    assert_eq!(fs::read_to_string(out.join("data.csv")).unwrap().lines().count(), 2);
}

#[test]
fn simulate_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[dgp]\nn = 300\n");
    for name in ["a", "b"] {
        ok(&cdml(&["simulate", "--config", &cfg, "--out", dir.path().join(name).to_str().unwrap(), "--seed", "9"]));
    }
    for f in ["data.csv", "truth.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn estimate_reads_simulated_csv_with_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[dgp]\nn = 600\n");
    let sim = dir.path().join("sim");
    ok(&cdml(&["simulate", "--config", &cfg, "--out", sim.to_str().unwrap(), "--seed", "2"]));
    let body = format!(
        "[data]\ncsv = {:?}\ntruth = {:?}\n",
        sim.join("data.csv").to_str().unwrap(),
        sim.join("truth.json").to_str().unwrap()
    );
    let cfg2 = write_config(dir.path(), &body);
    let from_csv = ok(&cdml(&["estimate", "--config", &cfg2, "--oracle", "--seed", "2", "--out", dir.path().join("e1").to_str().unwrap()]));
    let direct = ok(&cdml(&["estimate", "--config", &cfg, "--oracle", "--seed", "2", "--out", dir.path().join("e2").to_str().unwrap()]));
    assert!((theta_hat(&from_csv) - theta_hat(&direct)).abs() < 1e-12);
    assert!((theta_hat(&direct) - 1.0).abs() < 0.3);
}

#[test]
fn oracle_flag_requires_truth() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    fs::write(&csv, "x0,D,Y\n0.1,1.0,2.0\n0.2,0.5,1.0\n0.3,0.1,0.4\n0.4,0.9,1.1\n").unwrap();
    let cfg = write_config(dir.path(), &format!("[data]\ncsv = {:?}\n", csv.to_str().unwrap()));
    let out = cdml(&["estimate", "--config", &cfg, "--oracle", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn forest_estimate_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[dgp]\nn = 400\n[forest]\nn_trees = 20\n");
    let v = ok(&cdml(&["estimate", "--config", &cfg, "--method", "dml_rf", "--out", dir.path().join("rf").to_str().unwrap()]));
    assert!(theta_hat(&v).is_finite());
    assert!(dir.path().join("rf/estimate.json").exists());
}

#[test]
fn cdml_zero_grid_matches_shared_stopping_dml() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{FAST}\n[net]\nstopping = \"shared\"\n\n[cdml]\nraw_grid = [0.0]\nscale_l0 = false\n");
    let cfg = write_config(dir.path(), &body);
    let nn = ok(&cdml(&["estimate", "--config", &cfg, "--method", "dml_nn", "--seed", "4", "--out", dir.path().join("nn").to_str().unwrap()]));
    let cd = ok(&cdml(&["estimate", "--config", &cfg, "--method", "cdml", "--seed", "4", "--out", dir.path().join("cd").to_str().unwrap()]));
    assert!((theta_hat(&nn) - theta_hat(&cd)).abs() < 1e-9, "{} vs {}", theta_hat(&nn), theta_hat(&cd));
    let table = fs::read_to_string(dir.path().join("cd/gamma_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn gamma_grid_flag_without_zero_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), FAST);
    let out = cdml(&["estimate", "--config", &cfg, "--method", "cdml", "--gamma-grid", "0.1,1", "--out", dir.path().join("g").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "colour = 1\n");
    assert_eq!(cdml(&["simulate", "--config", &cfg]).status.code(), Some(1));
    assert_eq!(cdml(&["simulate", "--config", "/nonexistent/x.toml"]).status.code(), Some(1));
}

#[test]
fn experiment_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{FAST}\n[experiment]\nmethods = [\"dml_oracle\", \"dml_nn\"]\nsweep = {{ param = \"rho\", values = [0.1, 0.8] }}\n");
    let cfg = write_config(dir.path(), &body);
    for (name, workers) in [("a", "1"), ("b", "3")] {
        let out = dir.path().join(name);
        ok(&cdml(&["experiment", "--config", &cfg, "--reps", "2", "--workers", workers, "--out", out.to_str().unwrap()]));
    }
    let a = fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a.lines().count(), 1 + 2 * 2 * 2);
    assert!(a.lines().skip(1).all(|l| l.ends_with(",ok")));
    let strip = |s: String| -> Value {
        let mut v: Value = serde_json::from_str(&s).unwrap();
        v["config"]["workers"] = Value::Null;
        v["config"]["out"] = Value::Null;
        v
    };
    assert_eq!(a, b);
    assert_eq!(
        strip(fs::read_to_string(dir.path().join("a/summary.json")).unwrap()),
        strip(fs::read_to_string(dir.path().join("b/summary.json")).unwrap())
    );
}

#[test]
fn bias_verify_writes_scatter_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{FAST}\n[bias]\nmc_n = 10000\nsigma_l = [0.0, 10.0]\n");
    let cfg = write_config(dir.path(), &body);
    let out = dir.path().join("bv");
    let v = ok(&cdml(&["bias-verify", "--config", &cfg, "--method", "dml_nn", "--reps", "3", "--out", out.to_str().unwrap()]));
    let scatter = fs::read_to_string(out.join("bias_scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 1 + 3 * 2);
    let sums = v["result"]["summaries"].as_array().unwrap();
    assert_eq!(sums.len(), 2);
    assert!(sums[1]["fit"]["slope"].as_f64().unwrap().is_finite());
}

#[test]
fn bootstrap_reports_one_interval_per_subset() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[dgp]\nn = 600\n[bootstrap]\nn_resamples = 50\nsubset_sizes = [200, 600]\n";
    let cfg = write_config(dir.path(), body);
    let v = ok(&cdml(&["bootstrap", "--config", &cfg, "--method", "dml_oracle", "--out", dir.path().join("bs").to_str().unwrap()]));
    let rows = v["result"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let ci = &r["ci"];
        assert!(ci["lower"].as_f64().unwrap() <= ci["upper"].as_f64().unwrap());
    }
    let reseeded = cdml(&["bootstrap", "--config", &cfg, "--method", "dml_oracle", "--out", dir.path().join("x").to_str().unwrap(), "--seed", "1"]);
    assert!(reseeded.status.success());
    let cfg2 = write_config(dir.path(), "[dgp]\nn = 100\n[bootstrap]\nsubset_sizes = [200]\n");
    assert_eq!(cdml(&["bootstrap", "--config", &cfg2, "--out", dir.path().join("y").to_str().unwrap()]).status.code(), Some(1));
}
