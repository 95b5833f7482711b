//! Shared test helpers: an independent statistics oracle working on raw
//! JSON, and the generator for the bundled demo corpus.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};

use panoptic_core::demo::world_truth;
use panoptic_core::iteration::{drive_board, OracleVerifier, Verifier};
use panoptic_core::store::ConceptIndex;
use panoptic_core::verify::{
    sample_for_verification, Board, BoardConfig, ManualClock, SamplingLedger, SamplingParams, VerificationTask,
    VqaOutcome,
};
use panoptic_core::workspace::Workspace;
use panoptic_core::{Config, QaPair, Region};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_panoptic-forge")
}

const EDGES: [f64; 5] = [20.0, 40.0, 100.0, 200.0, 500.0];
const BUCKETS: [&str; 6] = ["tiny", "small", "medium", "large", "xlarge", "huge"];
const PROPOSALS: [&str; 4] = ["class_agnostic", "closed_set_a", "closed_set_b", "grounding"];
const COLUMNS: [&str; 5] = ["llm", "magnifier", "closed_set", "grounding", "ocr"];

fn column(source: &str) -> &'static str {
    match source {
        "spotter" | "imaginator" | "splitter" => "llm",
        "magnifier" => "magnifier",
        "closed_set_detector" => "closed_set",
        "grounding_detector" => "grounding",
        "ocr" => "ocr",
        other => panic!("unknown tag source {other}"),
    }
}

fn bucket_of(bbox: &Value) -> usize {
    let b: Vec<f64> = bbox.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let area = (b[2] - b[0]) * (b[3] - b[1]);
    let mut i = 0;
    while i < EDGES.len() && area >= EDGES[i] * EDGES[i] {
        i += 1;
    }
    i
}

fn share(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn tokens(text: &str) -> usize {
    text.split(|c: char| c.is_whitespace()).filter(|t| !t.is_empty()).count()
}

fn text_stats(texts: &[String]) -> Value {
    let count = texts.len();
    let total: usize = texts.iter().map(|t| tokens(t)).sum();
    json!({"count": count, "tokens": total, "average": share(total, count)})
}

/// Recomputes the statistics report from raw record JSON, touching none of
/// the engine's types.
pub fn stats_oracle(records: &[Value]) -> Value {
    if records.is_empty() {
        return json!({"empty": true});
    }
    let n = records.len();
    let mut bucket_count = [0usize; 6];
    let mut bucket_sources = vec![BTreeMap::<&str, usize>::new(); 6];
    let mut proposal_count = BTreeMap::<String, usize>::new();
    let mut images = BTreeSet::new();
    let mut concepts = BTreeSet::new();
    let (mut questions, mut answers, mut captions) = (vec![], vec![], vec![]);
    let (mut filters, mut top1, mut shown, mut confirmed) = (0usize, 0usize, 0usize, 0usize);
    let mut outcomes = BTreeMap::<&str, usize>::new();

    for r in records {
        images.insert(r["image_id"].as_str().unwrap().to_string());
        let b = bucket_of(&r["bbox"]);
        bucket_count[b] += 1;
        if let Some(top) = r["matched"].as_array().and_then(|m| m.first()) {
            *bucket_sources[b].entry(column(top["source"].as_str().unwrap())).or_default() += 1;
            concepts.insert(top["text"].as_str().unwrap().to_string());
        }
        *proposal_count.entry(r["proposal_source"].as_str().unwrap().to_string()).or_default() += 1;
        for qa in r["qa"].as_array().unwrap() {
            questions.push(qa["q"].as_str().unwrap().to_string());
            answers.push(qa["a"].as_str().unwrap().to_string());
            let key = match qa["status"].as_str().unwrap() {
                "unverified" => continue,
                "correct" => "correct",
                "wrong_answer" | "human_corrected" => "wrong_answer",
                "unanswerable" => "unanswerable",
                "wrong_semantic" => "wrong_semantic",
                s => panic!("unknown QA status {s}"),
            };
            *outcomes.entry(key).or_default() += 1;
        }
        if let Some(c) = r["caption"].as_str() {
            captions.push(c.to_string());
        }
        let v = &r["verification"];
        let shown_list: Vec<&str> = v["shown"].as_array().map(|a| a.iter().map(|x| x.as_str().unwrap()).collect()).unwrap_or_default();
        if v["status"] == "human_verified" && !shown_list.is_empty() {
            let conf: Vec<&str> = v["confirmed"].as_array().unwrap().iter().map(|x| x.as_str().unwrap()).collect();
            filters += 1;
            top1 += conf.contains(&shown_list[0]) as usize;
            shown += shown_list.len();
            confirmed += conf.len();
        }
    }

    let buckets: Vec<Value> = (0..6)
        .map(|i| {
            let tagged: usize = bucket_sources[i].values().sum();
            let sources: serde_json::Map<String, Value> = COLUMNS
                .iter()
                .map(|c| (c.to_string(), json!(share(*bucket_sources[i].get(c).unwrap_or(&0), tagged))))
                .collect();
            json!({
                "bucket": BUCKETS[i],
                "count": bucket_count[i],
                "proportion": share(bucket_count[i], n),
                "tagged": tagged,
                "sources": sources,
            })
        })
        .collect();
    let proposals: Vec<Value> = PROPOSALS
        .iter()
        .map(|p| {
            let c = *proposal_count.get(*p).unwrap_or(&0);
            json!({"source": p, "count": c, "proportion": share(c, n)})
        })
        .collect();
    let vqa_count: usize = outcomes.values().sum();
    let verification = if filters == 0 && vqa_count == 0 {
        json!({"empty": true})
    } else {
        let opt = |a: usize, b: usize| if b == 0 { Value::Null } else { json!(a as f64 / b as f64) };
        let frac = |k: &str| outcomes.get(k).copied().unwrap_or(0) as f64 / vqa_count as f64;
        json!({
            "top1_accuracy": opt(top1, filters),
            "tag_accuracy": opt(confirmed, shown),
            "vqa": if vqa_count == 0 { Value::Null } else { json!({
                "correct": frac("correct"),
                "wrong_answer": frac("wrong_answer"),
                "unanswerable": frac("unanswerable"),
                "wrong_semantic": frac("wrong_semantic"),
            })},
            "tag_filter_count": filters,
            "vqa_count": vqa_count,
        })
    };
    json!({
        "regions": n,
        "images": images.len(),
        "concepts": concepts.len(),
        "buckets": buckets,
        "proposal_sources": proposals,
        "descriptions": {
            "questions": text_stats(&questions),
            "answers": text_stats(&answers),
            "captions": text_stats(&captions),
        },
        "verification": verification,
    })
}

/// Field-by-field comparison; numbers must agree within `tol`. Returns the
/// paths that differ.
pub fn diff_json(a: &Value, b: &Value, tol: f64, path: &str, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            if (x - y).abs() > tol {
                out.push(format!("{path}: {x} vs {y}"));
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                match (x.get(k), y.get(k)) {
                    (Some(p), Some(q)) => diff_json(p, q, tol, &format!("{path}.{k}"), out),
                    _ => out.push(format!("{path}.{k}: present on one side only")),
                }
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            if x.len() != y.len() {
                out.push(format!("{path}: length {} vs {}", x.len(), y.len()));
                return;
            }
            for (i, (p, q)) in x.iter().zip(y).enumerate() {
                diff_json(p, q, tol, &format!("{path}[{i}]"), out);
            }
        }
        _ => {
            if a != b {
                out.push(format!("{path}: {a} vs {b}"));
            }
        }
    }
}

pub fn read_records(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Oracle verifier that also exercises the other QA outcomes on a fixed
/// share of questions.
struct DemoVerifier(OracleVerifier);

fn bucket_hash(text: &str) -> u32 {
    text.bytes().fold(2166136261u32, |h, b| (h ^ b as u32).wrapping_mul(16777619))
}

impl Verifier for DemoVerifier {
    fn filter_tags(&self, region: &Region, candidates: &[String]) -> Vec<String> {
        self.0.filter_tags(region, candidates)
    }

    fn check_answer(&self, region: &Region, concept: &str, qa: &QaPair) -> VqaOutcome {
        match self.0.check_answer(region, concept, qa) {
            VqaOutcome::Correct => match bucket_hash(&format!("{}{}", region.region_id, qa.question)) % 10 {
                0 => VqaOutcome::WrongAnswer,
                1 => VqaOutcome::Unanswerable,
                _ => VqaOutcome::Correct,
            },
            other => other,
        }
    }

    fn correct_answer(&self, _region: &Region, qa: &QaPair) -> String {
        format!("{} (corrected)", qa.answer.trim_end_matches('.'))
    }

    fn review(&self, _task: &VerificationTask, _region: &Region) -> bool {
        true
    }
}

/// Builds the 200-region demo corpus: full mock annotation of seed-7
/// images, cleaning, then one scripted verification round.
pub fn build_demo_corpus(dir: &Path) -> Vec<Region> {
    let cfg = Config {
        workspace: dir.to_path_buf(),
        ..Config::with_seed(7)
    };
    let ws = Workspace::open(cfg).unwrap();
    ws.ingest_synthetic(40).unwrap();
    ws.annotate().unwrap();
    ws.clean().unwrap();
    let mut regions = ws.corpus().unwrap();
    regions.truncate(200);
    assert_eq!(regions.len(), 200, "not enough regions for the demo corpus");

    let mut ledger = SamplingLedger::default();
    let samples = sample_for_verification(&ConceptIndex::build(&regions), 60, &mut ledger, &SamplingParams::default());
    let mut board = Board::new(BoardConfig::default(), Arc::new(ManualClock::new(0)));
    let by_id: BTreeMap<String, Region> = regions.iter().map(|r| (r.region_id.clone(), r.clone())).collect();
    board.add_samples(&samples, |id| by_id.get(id));
    let verifier = DemoVerifier(OracleVerifier::new(world_truth(ws.world(), &ws.images().unwrap())));
    drive_board(&mut board, &verifier, 2).unwrap();
    for r in regions.iter_mut() {
        if let Some(u) = board.region(&r.region_id) {
            *r = u.clone();
        }
    }
    regions
}
