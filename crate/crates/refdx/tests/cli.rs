use std::path::Path;
use std::process::{Command, Output};

use refdx::demo::{write_demo_bundle, CONFIG, QUERIES, SCORED, VALIDATION};
use refdx_harness::oracle::sweep_oracle;
use serde_json::{json, Value};

fn refdx(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refdx")).current_dir(dir).args(args).output().unwrap()
}

fn json_out(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn demo() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_demo_bundle(dir.path(), 7).unwrap();
    dir
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(refdx(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(refdx(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(refdx(dir.path(), &["calibrate"]).status.code(), Some(2));
    assert_eq!(refdx(dir.path(), &["--format", "xml", "build"]).status.code(), Some(2));
    assert_eq!(refdx(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(refdx(dir.path(), &["--version"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = refdx(dir.path(), &["build", "--library", "missing.grdl"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["code"], "IO_FAILURE");
    assert!(err["message"].as_str().unwrap().contains("missing.grdl"));
}

#[test]
fn diagnose_prints_top_labels_per_query() {
    let dir = demo();
    let out = json_out(&refdx(dir.path(), &["--config", CONFIG, "diagnose", QUERIES]));
    let results = out.as_array().unwrap();
    assert_eq!(results.len(), 30);
    for r in results {
        let labels = r["ranked_labels"].as_array().unwrap();
        assert!(!labels.is_empty() && labels.len() <= 5);
        assert!(r["query_id"].is_u64());
    }
    let table = refdx(dir.path(), &["--config", CONFIG, "--format", "table", "diagnose", QUERIES]);
    assert!(String::from_utf8(table.stdout).unwrap().starts_with("query 0"));
}

#[test]
fn calibrate_matches_sweep_oracle() {
    let dir = demo();
    let out = json_out(&refdx(dir.path(), &["--config", CONFIG, "calibrate", "--scored", SCORED, "--dry-run"]));
    let (theta, j) = sweep_oracle(&[(0.8, true), (0.6, true), (0.7, false), (0.3, false)]).unwrap();
    assert_eq!(out["theta_star"].as_f64().unwrap(), theta);
    assert_eq!(out["j_star"].as_f64().unwrap(), j);
    assert_eq!(out["applied"], false);
    assert!(!dir.path().join("library.grdl.state.json").exists());

    let out = json_out(&refdx(dir.path(), &["--config", CONFIG, "calibrate", "--validation", VALIDATION]));
    assert_eq!(out["applied"], true);
    let state: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("library.grdl.state.json")).unwrap()).unwrap();
    assert_eq!(state["theta_star"], out["theta_star"]);

    // the stored threshold is picked up by later runs
    let out = json_out(&refdx(dir.path(), &["--config", CONFIG, "diagnose", "--confident", QUERIES]));
    assert_eq!(out[0]["theta"], state["theta_star"]);
}

#[test]
fn eval_accuracies_are_monotone() {
    let dir = demo();
    let out = json_out(&refdx(dir.path(), &["--config", CONFIG, "eval", QUERIES, "--cutoffs", "1,3,5"]));
    let acc: Vec<f64> = ["1", "3", "5"].iter().map(|k| out["topk"][k].as_f64().unwrap()).collect();
    assert!(acc[0] <= acc[1] && acc[1] <= acc[2]);
    assert_eq!(out["n"], 30);
}

#[test]
fn flags_and_environment_override_config() {
    let dir = demo();
    let out = Command::new(env!("CARGO_BIN_EXE_refdx"))
        .current_dir(dir.path())
        .env("ENGINE_K_NEIGHBORS", "7")
        .args(["--config", CONFIG, "diagnose", QUERIES])
        .output()
        .unwrap();
    assert_eq!(json_out(&out)[0]["neighbors_used"], 7);
    let out = json_out(&refdx(dir.path(), &["--config", CONFIG, "--k", "3", "diagnose", QUERIES]));
    assert_eq!(out[0]["neighbors_used"], 3);
    let bad = Command::new(env!("CARGO_BIN_EXE_refdx"))
        .current_dir(dir.path())
        .env("ENGINE_NOT_A_KEY", "1")
        .args(["--config", CONFIG, "build"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn ingest_retrieve_and_review_files() {
    let dir = demo();
    let merged = json_out(&refdx(dir.path(), &["ingest", "site.jsonl", "merged.grdl", "--base", "library.grdl", "--site", "site-a"]));
    assert_eq!(merged["items"], 265);
    let out = json_out(&refdx(dir.path(), &["--config", CONFIG, "retrieve", QUERIES, "--cases", "10"]));
    let cases = out[0]["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 10);

    let candidates: Vec<u64> = cases.iter().map(|c| c["item_id"].as_u64().unwrap()).collect();
    let mut verdicts = vec![vec![false; 10]; 3];
    verdicts[0][0] = true;
    verdicts[1][3] = true;
    let sheet = json!({"reviewers": ["a", "b", "c"], "queries": [{"query_id": "0", "candidates": candidates, "verdicts": verdicts}]});
    std::fs::write(dir.path().join("sheet.json"), sheet.to_string()).unwrap();
    let rates = json_out(&refdx(dir.path(), &["review", "hit-rate", "sheet.json"]));
    assert_eq!(rates["per_reviewer"]["a"]["1"], 1.0);
    assert_eq!(rates["per_reviewer"]["b"]["3"], 0.0);
    assert_eq!(rates["per_reviewer"]["b"]["5"], 1.0);
    assert_eq!(rates["per_reviewer"]["c"]["10"], 0.0);

    let log = json!({"entries": [{
        "case_id": "q-17", "generation": 0,
        "ranked_labels": [{"label": "class-00", "class_id": 0, "score": 3.2}],
        "cscore": 0.41, "reliable": false, "decision": "relabel", "new_label": "class-02",
        "decided_at": "2026-10-18T09:30:00Z"
    }]});
    std::fs::write(dir.path().join("log.json"), log.to_string()).unwrap();
    assert_eq!(json_out(&refdx(dir.path(), &["review", "check-log", "log.json"]))["entries"], 1);
}

#[test]
fn harness_run_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = json!({"clusters": {"n_classes": 6, "ref_per_class": 20, "query_per_class": 5, "dim": 16}});
    std::fs::write(dir.path().join("exp.json"), config.to_string()).unwrap();
    let out = refdx(
        dir.path(),
        &["--config", "exp.json", "--seed", "4", "harness", "run", "topk_curve", "--out", "r.json", "--csv", "r.csv", "--require-pass"],
    );
    let report = json_out(&out);
    assert_eq!(report["seed"], 4);
    assert_eq!(report["passed"], true);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(saved["metrics"], report["metrics"]);
    assert!(std::fs::read_to_string(dir.path().join("r.csv")).unwrap().starts_with("table,row,column,value\n"));

    let out = refdx(dir.path(), &["harness", "run", "no_such_experiment"]);
    assert_eq!(out.status.code(), Some(1));
}
