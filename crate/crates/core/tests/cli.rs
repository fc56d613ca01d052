//! The `prism` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use prism::annotate::{AnnotatorRole, LabelStore, SplitAssignment};
use prism::bundle::{Bundle, Split};
use prism::conversation::StanceLabel;
use prism::pipeline::{read_jsonl, PredictionLine};
use prism::stance::{SupervisionKind, SupervisionRecord};

fn prism(args: &[&str], paths: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_prism"));
    let mut it = paths.iter();
    for a in args {
        if *a == "{}" {
            cmd.arg(it.next().unwrap());
        } else {
            cmd.arg(a);
        }
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn corpus() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/synthetic/raw.jsonl")
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "ingest",
        "preannotate",
        "annotate-serve",
        "finalize",
        "persona",
        "caption",
        "infer",
        "emit-supervision",
        "evaluate",
    ] {
        let out = ok(prism(&[sub, "--help"], &[]));
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
    assert_eq!(prism(&["frobnicate"], &[]).status.code(), Some(2));
    assert_eq!(prism(&["ingest", "--input", "/nope.jsonl", "--out", "/tmp/x"], &[]).status.code(), Some(1));
}

#[test]
fn annotate_finalize_supervise() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bundle = d.join("bundle.jsonl");
    let store = d.join("store");
    ok(prism(&["ingest", "--input", "{}", "--out", "{}"], &[&corpus(), &bundle]));
    let b = Bundle::load(&bundle).unwrap();

    ok(prism(&["preannotate", "--bundle", "{}", "--store", "{}"], &[&bundle, &store]));
    assert_eq!(prism(&["preannotate", "--bundle", "{}", "--store", "{}"], &[&bundle, &store]).status.code(), Some(1));
    {
        let s = LabelStore::open(&store).unwrap();
        let items = s.items();
        assert!(items.iter().all(|r| r.item.pre_annotation.is_some()));
        for r in items.iter().skip(1) {
            let l = r.item.pre_annotation.unwrap();
            s.submit_label(&r.item.id, "a1", l, AnnotatorRole::Regular).unwrap();
            s.submit_label(&r.item.id, "a2", l, AnnotatorRole::Regular).unwrap();
        }
        s.compact().unwrap();
    }

    let dataset = d.join("dataset.jsonl");
    let out = ok(prism(&["finalize", "--store", "{}", "--out", "{}"], &[&store, &dataset]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("excluded=1"));
    let ds = Bundle::load(&dataset).unwrap();
    assert_eq!(ds.conversations.len(), b.conversations.len() - 1);
    assert!(ds.conversations.iter().all(|e| e.gold.is_some() && e.split.is_some()));
    let assignment: SplitAssignment =
        serde_json::from_str(&std::fs::read_to_string(d.join("dataset.split.json")).unwrap()).unwrap();
    assert_eq!(assignment.assignments.len(), ds.conversations.len());

    let personas = d.join("personas.jsonl");
    let captions = d.join("captions.jsonl");
    ok(prism(&["persona", "--bundle", "{}", "--out", "{}"], &[&dataset, &personas]));
    ok(prism(&["caption", "--bundle", "{}", "--out", "{}"], &[&dataset, &captions]));

    let sup = d.join("sup.jsonl");
    ok(prism(
        &["emit-supervision", "--bundle", "{}", "--personas", "{}", "--captions", "{}", "--lambda", "0.6", "--out", "{}"],
        &[&dataset, &personas, &captions, &sup],
    ));
    let recs: Vec<SupervisionRecord> = read_jsonl(&sup).unwrap();
    assert_eq!(recs.len(), 2 * ds.conversations.len());
    assert!(recs.iter().all(|r| r.lambda == 0.6));
    assert_eq!(recs.iter().filter(|r| r.kind == SupervisionKind::Generation).count(), ds.conversations.len());

    let sup_nm = d.join("sup_nm.jsonl");
    ok(prism(
        &["emit-supervision", "--bundle", "{}", "--personas", "{}", "--captions", "{}", "--ablate", "no-mutual", "--split", "train", "--out", "{}"],
        &[&dataset, &personas, &captions, &sup_nm],
    ));
    let train = ds.conversations.iter().filter(|e| e.split == Some(Split::Train)).count();
    let recs: Vec<SupervisionRecord> = read_jsonl(&sup_nm).unwrap();
    assert_eq!(recs.len(), train);
    assert!(recs.iter().all(|r| r.kind == SupervisionKind::Classification && !r.flags.use_mutual));

    let preds = d.join("preds.jsonl");
    ok(prism(
        &["infer", "--bundle", "{}", "--personas", "{}", "--captions", "{}", "--split", "test", "--out", "{}"],
        &[&dataset, &personas, &captions, &preds],
    ));
    let lines: Vec<PredictionLine> = read_jsonl(&preds).unwrap();
    let test = ds.conversations.iter().filter(|e| e.split == Some(Split::Test)).count();
    assert_eq!(lines.len(), test);

    let base = d.join("base.jsonl");
    ok(prism(
        &["infer", "--bundle", "{}", "--ablate", "no-persona", "--ablate", "no-intent", "--split", "test", "--out", "{}"],
        &[&dataset, &base],
    ));
    let report = d.join("report.json");
    let out = ok(prism(
        &["evaluate", "--preds", "{}", "--significance", "{}", "--iterations", "500", "--group", "depth", "--out", "{}"],
        &[&preds, &base, &report],
    ));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("paired bootstrap"), "{table}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["significance"]["iterations"], 500);
}

#[test]
fn inference_fills_cache_misses_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bundle = d.join("b.jsonl");
    let out = ok(prism(&["ingest", "--input", "{}", "--target", "tesla", "--out", "{}"], &[&corpus(), &bundle]));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config="));
    let b = Bundle::load(&bundle).unwrap();
    assert!(!b.conversations.is_empty());
    assert!(b.conversations.iter().all(|e| e.conversation.target_id() == "tesla"));

    let (personas, captions) = (d.join("per.jsonl"), d.join("cap.jsonl"));
    ok(prism(&["persona", "--bundle", "{}", "--out", "{}"], &[&bundle, &personas]));
    ok(prism(&["caption", "--bundle", "{}", "--out", "{}"], &[&bundle, &captions]));
    let (cached, cold) = (d.join("cached.jsonl"), d.join("cold.jsonl"));
    ok(prism(
        &["infer", "--bundle", "{}", "--personas", "{}", "--captions", "{}", "--out", "{}"],
        &[&bundle, &personas, &captions, &cached],
    ));
    ok(prism(&["infer", "--bundle", "{}", "--out", "{}"], &[&bundle, &cold]));
    let a: Vec<PredictionLine> = read_jsonl(&cached).unwrap();
    assert_eq!(a.len(), b.conversations.len());
    assert!(a.iter().all(|l| l.error.is_none() && l.gold.is_some()));
    assert_eq!(std::fs::read(&cached).unwrap(), std::fs::read(&cold).unwrap());
    assert!(a.iter().any(|l| l.predicted.label() == Some(StanceLabel::Favor)));
}
