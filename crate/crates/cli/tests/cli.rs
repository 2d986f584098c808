use assert_cmd::Command;

fn exrec(dir: &std::path::Path) -> Command {
    let mut cmd = Command::cargo_bin("exrec").unwrap();
    cmd.current_dir(dir).env("RUST_LOG", "warn");
    cmd
}

#[test]
fn toy_corpus_then_run_then_cached_rerun() {
    let dir = tempfile::tempdir().unwrap();
    exrec(dir.path()).args(["toy-corpus", "--out", "reviews.jsonl"]).assert().success();
    let first = exrec(dir.path()).args(["run", "--out", "run"]).assert().success();
    let out = String::from_utf8(first.get_output().stdout.clone()).unwrap();
    assert_eq!(out.lines().filter(|l| l.contains(" ran ")).count(), 9, "{out}");
    let second = exrec(dir.path()).args(["run", "--out", "run"]).assert().success();
    let out = String::from_utf8(second.get_output().stdout.clone()).unwrap();
    assert_eq!(out.lines().filter(|l| l.contains(" cached ")).count(), 9, "{out}");
    assert!(dir.path().join("run/manifest.json").is_file());

    exrec(dir.path())
        .args(["evaluate", "--refs", "run/references.jsonl", "--cands", "run/generations.jsonl", "--report", "r.json"])
        .assert()
        .success();
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 40);
}

#[test]
fn retrieve_flags_become_overrides() {
    let dir = tempfile::tempdir().unwrap();
    exrec(dir.path()).args(["toy-corpus", "--out", "reviews.jsonl"]).assert().success();
    exrec(dir.path())
        .args(["retrieve", "--out", "run", "--query-type", "latent", "--top-q", "3"])
        .assert()
        .success();
    let line = std::fs::read_to_string(dir.path().join("run/retrieval.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(first["result"]["q"], 3);
    assert!(!dir.path().join("run/adapter.json").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = exrec(dir.path()).args(["run", "--set", "retrieval.bogus=1"]).assert().failure();
    let err = String::from_utf8(out.get_output().stderr.clone()).unwrap();
    assert!(err.contains("retrieval.bogus"), "{err}");
}

#[test]
fn split_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    exrec(dir.path()).args(["toy-corpus", "--out", "reviews.jsonl"]).assert().success();
    exrec(dir.path())
        .args(["split", "--input", "reviews.jsonl", "--out", "parts", "--seed", "3"])
        .assert()
        .success();
    assert!(dir.path().join("parts/split.json").is_file());
    let out = exrec(dir.path())
        .args(["bench-retrieval", "--rows", "500", "--dim", "16", "--queries", "5"])
        .assert()
        .success();
    let report: serde_json::Value = serde_json::from_slice(&out.get_output().stdout).unwrap();
    assert_eq!(report["rows"], 500);
}
