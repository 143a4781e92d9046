use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn plap(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plap"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn plap")
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap()
}

const BANDS_2D: &str = r#"{"dimension":2,"j_max":4,"grid_n":16,"num_bands":4}"#;
const LADDER_1D: &str = r#"{"dimension":1,"j_max":32,"lambda":5.29,"direction":[1],
  "eval_points":[[0.5],[1.0]],"epsilon_ladder":[0.2,0.1,0.05],"n_alpha":4096}"#;

#[test]
fn bands_row_count_and_header() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "c.json", BANDS_2D);
    let out = plap(&["bands", "--config", "c.json", "--out", "o"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(tmp.path(), "o/bands.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "alpha1,alpha2,band,mu,dmu1,dmu2");
    assert_eq!(lines.count(), 16 * 16 * 4);
}

#[test]
fn bands_json_format() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "c.json", BANDS_2D);
    let out = plap(&["bands", "--config", "c.json", "--out", "o", "--format", "json"], tmp.path());
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&read(tmp.path(), "o/bands.json")).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 1024);
    let keys: Vec<&String> = rows[0].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["alpha1", "alpha2", "band", "mu", "dmu1", "dmu2"]);
}

#[test]
fn malformed_config_exits_2() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "c.json", "{not json");
    let out = plap(&["bands", "--config", "c.json", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn invalid_values_exit_2() {
    let tmp = TempDir::new().unwrap();
    for (i, cfg) in [
        r#"{"dimension":2,"j_max":0}"#,
        r#"{"dimension":3,"j_max":4}"#,
        r#"{"dimension":1,"j_max":4,"unknown":1}"#,
        r#"{"dimension":1,"j_max":4,"direction":[0]}"#,
    ]
    .iter()
    .enumerate()
    {
        let name = format!("c{i}.json");
        write(tmp.path(), &name, cfg);
        let out = plap(&["bands", "--config", &name, "--out", "o"], tmp.path());
        assert_eq!(out.status.code(), Some(2), "{cfg}");
    }
}

#[test]
fn missing_config_and_usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(plap(&["bands"], tmp.path()).status.code(), Some(2));
    assert_eq!(plap(&["frobnicate"], tmp.path()).status.code(), Some(2));
    assert_eq!(plap(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn solve_without_lambda_exits_2() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "c.json", r#"{"dimension":1,"j_max":8,"direction":[1],"eval_points":[[1.0]]}"#);
    let out = plap(&["solve", "--config", "c.json", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn converge_empty_ladder_exits_2() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "c.json",
        r#"{"dimension":1,"j_max":8,"lambda":1.0,"direction":[1],"eval_points":[[1.0]]}"#,
    );
    let out = plap(&["converge", "--config", "c.json", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn converge_single_epsilon_one_row() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "c.json",
        r#"{"dimension":1,"j_max":16,"lambda":5.29,"direction":[1],"eval_points":[[0.5]],
            "epsilon_ladder":[0.1],"n_alpha":1024}"#,
    );
    let out = plap(&["converge", "--config", "c.json", "--out", "o"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(tmp.path(), "o/convergence.csv");
    assert_eq!(csv.lines().next().unwrap(), "epsilon,max_abs_error");
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn converge_errors_decrease() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "c.json", LADDER_1D);
    let out = plap(&["converge", "--config", "c.json", "--out", "o"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let errs: Vec<f64> = read(tmp.path(), "o/convergence.csv")
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(errs.len(), 3);
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
}

#[test]
fn solve_outputs_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "c.json", LADDER_1D);
    for dir in ["a", "b"] {
        let out = plap(&["solve", "--config", "c.json", "--out", dir, "--threads", "2"], tmp.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["solution.csv", "diagnostics.json"] {
        assert_eq!(read(tmp.path(), &format!("a/{f}")), read(tmp.path(), &format!("b/{f}")), "{f}");
    }
    let csv = read(tmp.path(), "a/solution.csv");
    assert!(csv.starts_with("x1,"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn fermi_writes_all_tables() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "c.json",
        r#"{"dimension":2,"j_max":4,"grid_n":16,"lambda":0.09,"direction":[1,0]}"#,
    );
    let out = plap(&["fermi", "--config", "c.json", "--out", "o"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fermi = read(tmp.path(), "o/fermi.csv");
    assert!(fermi.lines().count() > 10);
    assert!(fermi.lines().skip(1).all(|l| l.ends_with("plus") || l.ends_with("minus") || l.ends_with("degenerate")));
    let reg: serde_json::Value = serde_json::from_str(&read(tmp.path(), "o/regularity.json")).unwrap();
    assert_eq!(reg["lambda"], 0.09);
    assert!(tmp.path().join("o/fermi_complex.csv").exists());
}

#[test]
fn medium_file_resolved_relative_to_config() {
    let tmp = TempDir::new().unwrap();
    let sub = tmp.path().join("cfg");
    fs::create_dir(&sub).unwrap();
    write(&sub, "c.json", r#"{"dimension":1,"j_max":4,"grid_n":8,"medium":"missing.json"}"#);
    let out = plap(&["bands", "--config", "cfg/c.json", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}
