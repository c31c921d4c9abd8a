//! End-to-end checks of the `symbranch` binary: golden rows, config-format
//! parity, seeded reproducibility, and the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_symbranch")
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("symbranch-golden-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

/// Everything except the timestamp line, which is the only part of an
/// output allowed to differ between identical runs.
fn stable_content(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.contains("timestamp"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn body_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

const GREEN_TOML: &str = r#"
kind = "green"
[kernel]
family = "single_site"
[model]
rho = -0.5
gamma = 1.0
horizon = 5.0
seed = 42
"#;

#[test]
fn green_single_site_emits_the_closed_form_row() {
    let dir = scratch("green");
    let cfg = write_config(&dir, "green.toml", GREEN_TOML);
    let out = run(&["green", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let body = body_lines(&dir.join("green.csv"));
    assert_eq!(body[0], "horizon,j,k,green");
    assert_eq!(body[1], "5,0,0,5.0");
}

#[test]
fn dual_audit_single_site_hits_the_closed_form() {
    let dir = scratch("dual");
    let cfg = write_config(
        &dir,
        "dual.toml",
        r#"
kind = "dual_audit"
[kernel]
family = "single_site"
[model]
rho = -0.5
gamma = 1.0
replicas = 2000
seed = 7
record_times = [1.0]
"#,
    );
    let out = run(&["dual_audit", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let body = body_lines(&dir.join("dual.csv"));
    assert_eq!(body[0], "time,a,b,estimator,se,oracle,|z-score|");
    let cells: Vec<&str> = body[1].split(',').collect();
    let oracle: f64 = cells[5].parse().unwrap();
    let z: f64 = cells[6].parse().unwrap();
    assert!((oracle - 0.60653).abs() < 1e-5, "oracle {oracle}");
    assert!(z <= 3.0, "|z| = {z}");
}

#[test]
fn json_and_toml_configs_produce_identical_bodies() {
    let dir = scratch("parity");
    let toml_cfg = write_config(&dir, "run.toml", GREEN_TOML);
    let json_cfg = write_config(
        &dir,
        "run.json",
        r#"{
  "kind": "green",
  "kernel": { "family": "single_site" },
  "model": { "rho": -0.5, "gamma": 1.0, "horizon": 5.0, "seed": 42 }
}"#,
    );
    let t_dir = dir.join("from_toml");
    let j_dir = dir.join("from_json");
    assert!(run(&["green", "--config", &toml_cfg, "--out", t_dir.to_str().unwrap()])
        .status
        .success());
    assert!(run(&["green", "--config", &json_cfg, "--out", j_dir.to_str().unwrap()])
        .status
        .success());
    // Bodies (and everything below the config line) agree; the embedded
    // out_dir differs by construction, so compare from the seed line down.
    let strip = |p: &Path| {
        stable_content(p)
            .lines()
            .filter(|l| !l.starts_with("# config"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&t_dir.join("green.csv")), strip(&j_dir.join("green.csv")));
}

#[test]
fn reruns_with_equal_seeds_are_byte_identical_outside_the_timestamp() {
    let dir = scratch("repro");
    let cfg = write_config(
        &dir,
        "exit.toml",
        r#"
kind = "exitq"
[kernel]
family = "single_site"
[model]
rho = -0.5
gamma = 1.0
replicas = 500
seed = 11
[exit]
start = [1.0, 1.0]
step_dt = 1e-3
cap = 50.0
"#,
    );
    let a = dir.join("a");
    let b = dir.join("b");
    for out in [&a, &b] {
        let r = run(&["exitq", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    }
    for name in ["exit.csv", "exponent.json"] {
        let left = stable_content(&a.join(name)).replace("/a", "/");
        let right = stable_content(&b.join(name)).replace("/b", "/");
        assert_eq!(left, right, "{name} differs between identical runs");
    }

    // A --seed override must change the outcome and be recorded in the header.
    let c = dir.join("c");
    assert!(run(&[
        "exitq",
        "--config",
        &cfg,
        "--out",
        c.to_str().unwrap(),
        "--seed",
        "12"
    ])
    .status
    .success());
    let text = std::fs::read_to_string(c.join("exit.csv")).unwrap();
    assert!(text.contains("# seed: 12"));
    assert_ne!(
        body_lines(&a.join("exit.csv")),
        body_lines(&c.join("exit.csv"))
    );
}

#[test]
fn exit_code_contract_holds() {
    let dir = scratch("codes");

    // Usage: config file missing.
    let out = run(&["green", "--config", dir.join("nope.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let record = String::from_utf8_lossy(&out.stderr);
    assert!(record.contains("\"error\":\"usage\""), "record: {record}");

    // Usage: unknown field, reported with its path.
    let cfg = write_config(
        &dir,
        "typo.toml",
        r#"
kind = "green"
[kernel]
family = "single_site"
[model]
rho = -0.5
gamma = 1.0
horizont = 5.0
seed = 1
"#,
    );
    let out = run(&["green", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizont"));

    // Usage: kind/config mismatch.
    let cfg = write_config(&dir, "green.toml", GREEN_TOML);
    let out = run(&["simulate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));

    // Precondition: infinite gamma under kind=simulate.
    let cfg = write_config(
        &dir,
        "inf.toml",
        r#"
kind = "simulate"
[kernel]
family = "complete_graph"
n = 2
[model]
rho = -0.5
gamma = "inf"
dt = 0.001
horizon = 0.5
replicas = 10
seed = 1
"#,
    );
    let out = run(&["simulate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"error\":\"precondition\""));

    // Precondition: exitq at rho >= 0 without a cap.
    let cfg = write_config(
        &dir,
        "nocap.toml",
        r#"
kind = "exitq"
[kernel]
family = "single_site"
[model]
rho = 0.0
gamma = 1.0
replicas = 10
seed = 1
[exit]
start = [1.0, 1.0]
step_dt = 1e-3
"#,
    );
    let out = run(&["exitq", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn censored_exit_rows_have_empty_coordinates() {
    let dir = scratch("censor");
    let cfg = write_config(
        &dir,
        "tight.toml",
        r#"
kind = "exitq"
[kernel]
family = "single_site"
[model]
rho = 0.0
gamma = 1.0
replicas = 400
seed = 3
[exit]
start = [1.0, 1.0]
step_dt = 1e-3
cap = 50.0
"#,
    );
    let out = run(&["exitq", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let body = body_lines(&dir.join("exit.csv"));
    let censored: Vec<&String> = body.iter().filter(|l| l.ends_with(",,")).collect();
    assert!(
        !censored.is_empty(),
        "expected some censored walks at this cap"
    );
    for line in censored {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[1], "50.0", "censored tau pinned to the cap: {line}");
    }
}
