//! End-to-end checks of the `pwevent` binary: generate a dataset, run an
//! experiment on it from a JSON config, and re-audit a dumped trace.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pwevent"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pwevent_cli_{tag}_{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn gen_then_ingest_roundtrip() {
    let dir = workdir("gen");
    let csv = dir.join("sin.csv");
    let out = bin()
        .args(["gen", "--dataset", "sin", "--slots", "40", "--users", "12", "--seed", "9"])
        .arg("--out")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("user,slot,bucket"));
    assert_eq!(text.lines().count(), 1 + 40 * 12);

    // The emitted CSV round-trips through the category ingestion path.
    let config = serde_json::json!({
        "dataset": {
            "kind": "csv",
            "path": csv,
            "schema": {
                "mode": "category",
                "user_col": "user",
                "time_col": "slot",
                "category_col": "bucket"
            },
            "slot_width": 1.0
        },
        "users": 0,
        "mechanism": "pbd",
        "budgets": [0.8],
        "windows": [6],
        "ratios": [0.5],
        "high_budget": 1.0,
        "small_window": 4,
        "backward_window": 1,
        "backward_budget": 10.0,
        "domain_assignment": {"kind": "two_point"},
        "schedule": {"kind": "constant"},
        "absorption_window": "declared_cover",
        "repeats": 2,
        "seed": 5,
        "out": dir.join("csv_run.jsonl"),
        "dump_traces": null
    });
    let cfg_path = dir.join("csv_cfg.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let out = bin().args(["run", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(dir.join("csv_run.jsonl")).unwrap().lines().count(), 2);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn run_flags_override_and_audit_roundtrip() {
    let dir = workdir("run");
    let jsonl = dir.join("run.jsonl");
    let traces = dir.join("traces");
    let out = bin()
        .env("PWEVENT_THREADS", "2")
        .args([
            "run",
            "--mechanism",
            "dpba",
            "--dataset",
            "log",
            "--slots",
            "60",
            "--users",
            "10",
            "--budget-list",
            "0.5,1.0",
            "--window-list",
            "8",
            "--ratio",
            "0.5",
            "--repeats",
            "2",
            "--seed",
            "3",
        ])
        .arg("--out")
        .arg(&jsonl)
        .arg("--dump-traces")
        .arg(&traces)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = fs::read_to_string(&jsonl).unwrap();
    assert_eq!(lines.lines().count(), 4, "2 budgets x 2 repeats");
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["mechanism"], "dpba");
        assert_eq!(v["audit_ok"], true);
    }
    assert!(pwevent::harness::summary_path(&jsonl).exists());

    // Every dumped trace re-audits clean through the audit subcommand.
    let mut trace_files: Vec<PathBuf> =
        fs::read_dir(&traces).unwrap().map(|e| e.unwrap().path()).collect();
    trace_files.sort();
    assert_eq!(trace_files.len(), 4);
    let out = bin().args(["audit", "--trace"]).arg(&trace_files[0]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("audit: PASS"));

    // A tampered ledger is caught and the exit code changes.
    let mut saved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&trace_files[0]).unwrap()).unwrap();
    let eps2 = saved["trace"]["ledger"]["eps2"][0].as_array().unwrap().clone();
    let mut bumped = eps2.clone();
    bumped[0] = serde_json::json!(50.0);
    saved["trace"]["ledger"]["eps2"][0] = serde_json::Value::Array(bumped);
    // Keep the prefix sums consistent with the tampered entries.
    let mut acc = 0.0;
    let mut prefix = vec![serde_json::json!(0.0)];
    for v in saved["trace"]["ledger"]["eps2"][0].as_array().unwrap() {
        acc += v.as_f64().unwrap();
        prefix.push(serde_json::json!(acc));
    }
    saved["trace"]["ledger"]["prefix2"][0] = serde_json::Value::Array(prefix);
    let tampered = dir.join("tampered.json");
    fs::write(&tampered, serde_json::to_string(&saved).unwrap()).unwrap();
    let out = bin().args(["audit", "--trace"]).arg(&tampered).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("audit: FAIL"));
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn usage_errors_exit_nonzero() {
    let out = bin().args(["run", "--mechanism", "nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown mechanism"));
}
