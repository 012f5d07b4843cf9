use std::path::Path;
use std::process::{Command, Output};

fn treenav(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_treenav")).current_dir(dir).args(args).output().expect("binary runs");
    assert!(out.status.success(), "treenav {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn generate_build_eval_query_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    treenav(dir, &["generate", "data", "--docs", "4"]);
    assert!(dir.join("data/documents.jsonl").exists());
    treenav(dir, &["--config", "data/treenav.toml", "build", "data/documents.jsonl", "--out", "kb"]);
    assert!(dir.join("kb/tree.planted-00.json").exists());

    let report = dir.join("full.json");
    let out = treenav(dir, &["--config", "data/treenav.toml", "eval", "data/qa.jsonl", "--store", "kb", "--report", report.to_str().unwrap()]);
    assert!(stdout(&out).contains("Recall@1 1.0000"), "{}", stdout(&out));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["aggregates"]["queries"], 4);
    assert!(dir.join("kb/traces").is_dir());

    let out = treenav(dir, &["--config", "data/treenav.toml", "eval", "data/qa.jsonl", "--store", "kb", "--mode", "no-tree"]);
    assert!(stdout(&out).contains("Recall@1 0.0000"), "{}", stdout(&out));

    let qa = std::fs::read_to_string(dir.join("data/qa.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(qa.lines().next().unwrap()).unwrap();
    let question = first["question"].as_str().unwrap();
    let out = treenav(dir, &["--config", "data/treenav.toml", "query", "kb/tree.planted-00.json", question, "--json", "--memory"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let gold = first["gold_answers"][0].as_str().unwrap();
    assert!(v["answer"].as_str().unwrap().contains(gold.split(' ').next().unwrap()), "{v}");
    assert!(v["memory"].is_object());

    let out = treenav(dir, &["inspect", "kb/tree.planted-00.json", "--summaries"]);
    assert!(stdout(&out).contains("Harbor Commerce"), "{}", stdout(&out));
}

#[test]
fn bad_backend_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_treenav")).current_dir(tmp.path()).args(["--backend", "nope", "inspect", "x.json"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown backend"));
}
