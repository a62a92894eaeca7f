use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mmtree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmtree"))
        .args(args)
        .env_remove("MMTREE_PROVIDER_URL")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mmtree(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    let mut a = vec!["--json"];
    a.extend_from_slice(args);
    serde_json::from_str(&ok(&a)).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    corpus: PathBuf,
    index: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let index = tmp.path().join("idx");
    ok(&["synth", "--out", s(&corpus), "--docs", "6", "--pages-per-doc", "3", "--topics", "3", "--queries", "20"]);
    ok(&["ingest", "--manifest", s(&corpus.join("manifest.jsonl")), "--out", s(&index)]);
    ok(&["build", "--index", s(&index)]);
    Fixture {
        _tmp: tmp,
        corpus,
        index,
    }
}

#[test]
fn query_feedback_round() {
    let f = fixture();
    let idx = s(&f.index);
    let text = ok(&["query", "--index", idx, "How do I reach the exit steps?", "--phase", "rescue"]);
    assert!(text.starts_with("query_id  q-"), "{text}");
    assert!(text.contains("routing   phase=rescue"));
    assert!(text.contains("response"));
    assert!(!text.contains("elapsed"));

    let v = json(&["query", "--index", idx, "what is the valve", "--id", "mine", "--top-k", "3"]);
    assert_eq!(v["query_id"], "mine");
    assert_eq!(v["items"].as_array().unwrap().len(), 3);
    assert!(v.get("elapsed_ms").is_none());
    let first = v["items"][0]["node_id"].as_str().unwrap().to_string();
    assert!(v["response"]["citations"].as_array().unwrap().iter().all(|c| c.is_string()));

    let fb = json(&["feedback", "--index", idx, "--query-id", "mine", "--reward", "1.0"]);
    let (before, after) = (fb["before"].as_f64().unwrap(), fb["after"].as_f64().unwrap());
    assert!((after - (0.9 * before + 0.1)).abs() < 1e-9);

    let forced = json(&["query", "--index", idx, "what is the valve", "--strategy", "multimodal", "--timings"]);
    assert_eq!(forced["routing"]["overridden"], true);
    assert_eq!(forced["strategy"], "multimodal_fusion");
    assert!(forced["elapsed_ms"].is_number());
    assert!(!first.is_empty());
}

#[test]
fn queries_are_deterministic() {
    let f = fixture();
    let idx = s(&f.index);
    let a = ok(&["query", "--index", idx, "why did the wall crack"]);
    let b = ok(&["query", "--index", idx, "why did the wall crack"]);
    assert_eq!(a, b);
}

#[test]
fn feedback_from_judgments() {
    let f = fixture();
    let idx = s(&f.index);
    let first_query = std::fs::read_to_string(f.corpus.join("queries.jsonl")).unwrap();
    let q: Value = serde_json::from_str(first_query.lines().next().unwrap()).unwrap();
    let id = q["id"].as_str().unwrap();
    let text = q["text"].as_str().unwrap();
    ok(&["query", "--index", idx, text, "--id", id]);
    let fb = json(&[
        "feedback",
        "--index",
        idx,
        "--query-id",
        id,
        "--judgments",
        s(&f.corpus.join("judgments.jsonl")),
    ]);
    let r = fb["reward"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r) && r > 0.0);
}

#[test]
fn eval_writes_reports() {
    let f = fixture();
    let out = f.index.parent().unwrap().join("report");
    let v = json(&[
        "eval",
        "--index",
        s(&f.index),
        "--queries",
        s(&f.corpus.join("queries.jsonl")),
        "--judgments",
        s(&f.corpus.join("judgments.jsonl")),
        "--out",
        s(&out),
    ]);
    let configs = v["report"]["configurations"].as_array().unwrap();
    assert_eq!(configs.len(), 4);
    for name in ["report.txt", "report.json", "traces.jsonl"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let table = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(table.contains("multimodal/agentic"));

    let again = json(&[
        "eval",
        "--index",
        s(&f.index),
        "--queries",
        s(&f.corpus.join("queries.jsonl")),
        "--judgments",
        s(&f.corpus.join("judgments.jsonl")),
    ]);
    assert_eq!(v["digest"], again["digest"]);
}

#[test]
fn export_is_dot() {
    let f = fixture();
    let dot = ok(&["export", "--index", s(&f.index)]);
    assert!(dot.starts_with("digraph"));
    assert!(dot.trim_end().ends_with('}'));
}

#[test]
fn errors_exit_nonzero() {
    let f = fixture();
    let idx = s(&f.index);
    let manifest = f.corpus.join("manifest.jsonl");

    let again = mmtree(&["ingest", "--manifest", s(&manifest), "--out", idx]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["ingest", "--manifest", s(&manifest), "--out", idx, "--force"]);

    let unbuilt = mmtree(&["query", "--index", idx, "anything"]);
    assert!(!unbuilt.status.success());
    assert!(String::from_utf8_lossy(&unbuilt.stderr).contains("build"));

    ok(&["build", "--index", idx]);
    let phase = mmtree(&["query", "--index", idx, "x", "--phase", "panic"]);
    assert!(!phase.status.success());
    assert!(String::from_utf8_lossy(&phase.stderr).contains("valid phases"));

    let missing = mmtree(&["--json", "feedback", "--index", idx, "--query-id", "nope", "--reward", "0.5"]);
    assert!(!missing.status.success());
    let v: Value = serde_json::from_slice(&missing.stdout).unwrap();
    assert!(v["error"].as_str().unwrap().contains("nope"));

    let no_index = mmtree(&["query", "--index", s(&f.corpus), "x"]);
    assert!(!no_index.status.success());
}

#[test]
fn scaling_probe_runs() {
    let v = json(&["eval", "--scale", "--sizes", "60,90"]);
    let points = v["scaling"].as_array().unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[0]["chunks"], 60);
    assert_eq!(points[1]["chunks"], 90);
}
