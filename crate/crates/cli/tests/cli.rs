use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const INDICATOR: &str = r#"{
  "lattice": { "depth": 2, "dt": 1.0, "mode": "history" },
  "cost": { "kind": "terminal", "name": "indicator_ge", "params": [1.0] },
  "measure": [ { "t": 1, "w": 0.5 }, { "t": 2, "w": 0.5 } ],
  "solver": { "resolution": 40 },
  "seed": 11,
  "simulate": { "paths": 50000 }
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn dcstop(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcstop"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("DCSTOP_OUT_DIR")
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn solve_indicator_example() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", INDICATOR);
    let out = dir.path().join("out");
    let o = dcstop(&["solve", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out.join("result.json"));
    assert_eq!(r["value"].as_f64(), Some(0.5));
    assert_eq!(r["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(r["version"], env!("CARGO_PKG_VERSION"));
    let csv = std::fs::read_to_string(out.join("table.csv")).unwrap();
    assert!(csv.starts_with("# version="));
    assert!(csv.contains("config_sha256="));
}

#[test]
fn compare_passes_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", INDICATOR);
    let out = dir.path().join("out");
    let o = dcstop(&["compare", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0));
    let r = json(&out.join("result.json"));
    assert!(r["gap"].as_f64().unwrap() <= 1e-3);

    // off-grid resolution with zero tolerance: the solver sits below the oracle
    let strict = INDICATOR.replace("\"seed\": 11", "\"seed\": 11, \"compare\": { \"tolerance\": 0.0 }");
    let cfg = write_config(dir.path(), "strict.json", &strict);
    let o = dcstop(&["compare", cfg.to_str().unwrap(), "--resolution", "5"], &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gap"));
}

#[test]
fn malformed_configs_exit_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = write_config(
        dir.path(),
        "m.json",
        r#"{"lattice":{"depth":2,"dt":1},"cost":{"kind":"terminal","name":"abs"}}"#,
    );
    let o = dcstop(&["solve", missing.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("measure"));

    let typed = write_config(dir.path(), "t.json", &INDICATOR.replace("[1.0]", "[\"one\"]"));
    let o = dcstop(&["validate", typed.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cost.params[0]"));

    let off_grid = write_config(dir.path(), "g.json", &INDICATOR.replace("\"t\": 2,", "\"t\": 2.5,"));
    let o = dcstop(&["solve", off_grid.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", INDICATOR);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for cmd in ["solve", "simulate", "policy"] {
        assert_eq!(dcstop(&[cmd, cfg.to_str().unwrap()], &a).status.code(), Some(0));
        assert_eq!(dcstop(&[cmd, cfg.to_str().unwrap()], &b).status.code(), Some(0));
    }
    for f in ["result.json", "table.csv", "policy.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let r = json(&a.join("result.json"));
    assert_eq!(r["seed"], 11);
    assert_eq!(r["consistent"], true);

    let c = dir.path().join("c");
    dcstop(&["simulate", cfg.to_str().unwrap(), "--seed", "12"], &c);
    assert_ne!(json(&c.join("result.json"))["mean"], r["mean"]);
}

#[test]
fn policy_round_trips_through_validate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", INDICATOR);
    let out = dir.path().join("out");
    assert_eq!(dcstop(&["policy", cfg.to_str().unwrap()], &out).status.code(), Some(0));
    let policy = out.join("policy.json");
    let p = json(&policy);
    assert_eq!(p["realized_value"].as_f64(), Some(0.5));
    assert_eq!(p["validation"]["ok"], true);

    let o = dcstop(&["validate", cfg.to_str().unwrap(), "--policy", policy.to_str().unwrap()], &dir.path().join("v"));
    assert_eq!(o.status.code(), Some(0));

    // break the martingale property at the root
    let text = std::fs::read_to_string(&policy).unwrap();
    let mut doc: Value = serde_json::from_str(&text).unwrap();
    doc["mvm"]["nodes"][1]["weights"] = serde_json::json!([0.9, 0.1]);
    let broken = write_config(dir.path(), "broken.json", &doc.to_string());
    let o = dcstop(&["validate", cfg.to_str().unwrap(), "--policy", broken.to_str().unwrap()], &dir.path().join("v"));
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn oracle_and_stability_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let text = INDICATOR.replace(
        "\"params\": [1.0] }",
        "\"params\": [1.0], \"holder2_constant\": \"lattice\" }",
    );
    let cfg = write_config(dir.path(), "c.json", &text);
    let out = dir.path().join("out");
    let o = dcstop(&["oracle", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&out.join("result.json"))["value"].as_f64(), Some(0.5));

    let o = dcstop(&["stability", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("stability.csv")).unwrap();
    assert!(csv.contains("n,w1_gap,value,bound"));
    assert_eq!(json(&out.join("result.json"))["pass"], true);
}

#[test]
fn env_var_sets_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", INDICATOR);
    let out = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_dcstop"))
        .args(["solve", cfg.to_str().unwrap()])
        .env("DCSTOP_OUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("result.json").exists());
}
