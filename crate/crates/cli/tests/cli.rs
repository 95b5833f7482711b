mod support;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use serde_json::{json, Value};

use panoptic_core::analytics::corpus_stats;
use panoptic_core::workspace::read_jsonl;
use panoptic_core::Region;
use support::*;

fn forge(ws: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("PANOPTIC_FORGE_CONFIG", ws.join("forge.json"))
        .current_dir(ws)
        .output()
        .unwrap()
}

fn workspace(seed: u64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"workspace": "data", "seed": seed});
    std::fs::write(dir.path().join("forge.json"), cfg.to_string()).unwrap();
    dir
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = workspace(7);
    let out = forge(dir.path(), &["annotate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");
}

#[test]
fn bad_config_exits_with_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("forge.json"), r#"{"t_iou": 3.0}"#).unwrap();
    let out = forge(dir.path(), &["annotate"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string(), "{err}");
}

#[test]
fn annotating_twice_gives_the_same_corpus_hash() {
    let hash = || {
        let dir = workspace(11);
        ok_json(&forge(dir.path(), &["ingest", "--synthetic", "4"]));
        ok_json(&forge(dir.path(), &["annotate"]))["corpus_hash"].clone()
    };
    let a = hash();
    assert!(a.is_string());
    assert_eq!(a, hash());
}

#[test]
fn identity_loop_without_verification_keeps_the_corpus() {
    let dir = workspace(3);
    ok_json(&forge(dir.path(), &["ingest", "--synthetic", "3"]));
    let manifests = ok_json(&forge(
        dir.path(),
        &["loop", "--iterations", "1", "--finetune", "identity", "--verifier", "none"],
    ));
    let steps = manifests.as_array().unwrap();
    let stages: Vec<&str> = steps.iter().map(|m| m["stage"].as_str().unwrap()).collect();
    assert_eq!(stages.first(), Some(&"annotated"));
    assert_eq!(stages.last(), Some(&"annotated"));
    let hashes: std::collections::BTreeSet<&str> = steps.iter().map(|m| m["corpus_hash"].as_str().unwrap()).collect();
    assert_eq!(hashes.len(), 1, "{manifests:#}");
}

#[test]
fn stats_on_a_missing_corpus_file_fails_cleanly() {
    let dir = workspace(7);
    let out = forge(dir.path(), &["stats", "--corpus", "nope.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn demo_corpus_stats_match_the_golden_file() {
    let corpus = data_dir().join("demo_corpus.jsonl");
    let golden = data_dir().join("demo_stats.json");
    if std::env::var_os("PANOPTIC_REGENERATE_DEMO").is_some() {
        let tmp = tempfile::tempdir().unwrap();
        let regions = build_demo_corpus(tmp.path());
        let mut text = String::new();
        for r in &regions {
            text.push_str(&serde_json::to_string(r).unwrap());
            text.push('\n');
        }
        std::fs::write(&corpus, text).unwrap();
        // the golden comes from the oracle, never from the engine
        let expected = stats_oracle(&read_records(&corpus));
        std::fs::write(&golden, serde_json::to_string_pretty(&expected).unwrap() + "\n").unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin())
        .args(["stats", "--corpus"])
        .arg(&corpus)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    let got = ok_json(&out);
    let expected: Value = serde_json::from_str(&std::fs::read_to_string(&golden).unwrap()).unwrap();
    let mut diffs = vec![];
    diff_json(&got, &expected, 1e-12, "$", &mut diffs);
    assert!(diffs.is_empty(), "{diffs:#?}");
    for f in ["stats.json", "stats.txt", "concepts.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let regions: Vec<Region> = read_jsonl(&corpus).unwrap();
    let direct = serde_json::to_value(corpus_stats(&regions)).unwrap();
    let mut diffs = vec![];
    diff_json(&direct, &got, 1e-15, "$", &mut diffs);
    assert!(diffs.is_empty(), "{diffs:#?}");
}

struct Server(Child, String);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_verify(ws: &Path) -> Server {
    let mut child = Command::new(bin())
        .args(["serve-verify", "--addr", "127.0.0.1:0"])
        .env("PANOPTIC_FORGE_CONFIG", ws.join("forge.json"))
        .current_dir(ws)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let v: Value = serde_json::from_str(&line).unwrap();
    Server(child, v["listening"].as_str().unwrap().to_string())
}

fn call(method: &str, url: &str, body: Option<Value>) -> (u16, Value) {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let resp = match (method, body) {
        ("GET", _) => agent.get(url).call(),
        (_, Some(b)) => agent.post(url).send_json(b),
        (_, None) => agent.post(url).send_empty(),
    }
    .unwrap();
    let status = resp.status().as_u16();
    let text = resp.into_body().read_to_string().unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::Null))
}

#[test]
fn verification_service_contract() {
    let dir = workspace(5);
    ok_json(&forge(dir.path(), &["ingest", "--synthetic", "3"]));
    ok_json(&forge(dir.path(), &["annotate"]));
    ok_json(&forge(dir.path(), &["clean"]));
    let sampled = ok_json(&forge(dir.path(), &["sample-verify", "--budget", "8"]));
    assert!(sampled["tasks"].as_u64().unwrap() > 0, "{sampled}");

    let server = start_verify(dir.path());
    let base = &server.1;

    let (s, task) = call("POST", &format!("{base}/api/tasks/lease"), Some(json!({"worker_id": "w1", "kind": "tag_filter"})));
    assert_eq!(s, 200, "{task}");
    assert_eq!(task["state"], "leased");
    let id = task["task_id"].as_str().unwrap().to_string();
    let top = task["candidates"][0].clone();

    let (s, ctx) = call("GET", &format!("{base}/api/regions/{}/context", task["region_id"].as_str().unwrap()), None);
    assert_eq!(s, 200, "{ctx}");

    let submit = |worker: &str| {
        call(
            "POST",
            &format!("{base}/api/tasks/{id}/submit"),
            Some(json!({"worker_id": worker, "result": {"selected": [top.clone()]}})),
        )
    };
    assert_eq!(submit("w2").0, 403);
    assert_eq!(submit("w1").0, 200);
    let (s, again) = submit("w1");
    assert_eq!(s, 409, "{again}");
    assert!(again["error"].is_string());

    let (s, t) = call("GET", &format!("{base}/api/tasks/{id}"), None);
    assert_eq!((s, t["state"].clone()), (200, json!("submitted")));
    assert_eq!(call("GET", &format!("{base}/api/tasks/nope"), None).0, 404);
    assert_eq!(call("POST", &format!("{base}/api/tasks/lease"), Some(json!({"kind": "tag_filter"}))).0 / 100, 4);

    let (s, m) = call("GET", &format!("{base}/api/metrics"), None);
    assert_eq!(s, 200, "{m}");
    let (s, p) = call("GET", &format!("{base}/api/packages"), None);
    assert_eq!(s, 200);
    assert!(p.is_array(), "{p}");
    drop(server);

    // submissions are durable across restarts
    let server = start_verify(dir.path());
    let (_, t) = call("GET", &format!("{}/api/tasks/{id}", server.1), None);
    assert_eq!(t["state"], "submitted");
}
