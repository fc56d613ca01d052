//! Annotation REST API round trip against a live server.

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use common::kappa_oracle;
use prism::annotate::{spawn_server, AnnotationStatus, LabelStore, ServeOptions};
use prism::bundle::{build_bundle, IngestOptions};
use prism::conversation::StanceLabel;
use prism::synthetic::demo_corpus;

struct Api {
    client: Client,
    base: String,
}

impl Api {
    fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().unwrap();
        (r.status(), r.json().unwrap_or(Value::Null))
    }

    fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).json(&body).send().unwrap();
        (r.status(), r.json().unwrap_or(Value::Null))
    }

    fn label(&self, item: &str, annotator: &str, label: &str) -> (StatusCode, Value) {
        self.post(
            &format!("/api/items/{item}/labels"),
            json!({"annotator_id": annotator, "label": label}),
        )
    }
}

#[test]
fn annotation_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = demo_corpus(42);
    corpus.write(&dir.path().join("corpus")).unwrap();
    let opts = IngestOptions {
        images_root: Some(dir.path().join("corpus")),
        ..Default::default()
    };
    let (bundle, _) = build_bundle(&corpus.records, &opts).unwrap();
    let ids: Vec<String> = bundle.conversations.iter().map(|e| e.conversation.id().to_string()).collect();
    let with_image = bundle
        .conversations
        .iter()
        .find(|e| !e.conversation.images().is_empty())
        .map(|e| e.conversation.id().to_string())
        .unwrap();

    let store_dir = dir.path().join("store");
    let store = Arc::new(LabelStore::create(&store_dir, bundle, &BTreeMap::new()).unwrap());
    let serve = ServeOptions {
        images_root: Some(dir.path().join("corpus")),
        ui_dir: None,
    };
    let server = spawn_server(store.clone(), "127.0.0.1:0".parse().unwrap(), &serve).unwrap();
    let api = Api {
        client: Client::new(),
        base: server.url(),
    };

    let (code, page) = api.get("/api/items?per_page=10&status=&target=");
    assert_eq!(code, StatusCode::OK);
    assert_eq!(page["total"], 50);
    assert_eq!(page["items"].as_array().unwrap().len(), 10);
    assert!(page["items"][0]["conversation"]["post"].is_object());

    let first = &ids[0];
    let (code, item) = api.label(first, "a1", "Favor");
    assert_eq!(code, StatusCode::OK);
    assert_eq!(item["status"], "labeled");
    assert_eq!(store.item(first).unwrap().labels.len(), 1);
    let (_, todo) = api.get("/api/items?annotator=a1");
    assert_eq!(todo["total"], 49);

    let (_, item) = api.label(first, "a2", "Against");
    assert_eq!(item["status"], "disputed");
    let (_, queue) = api.get("/api/items?status=disputed");
    assert_eq!(queue["total"], 1);
    assert_eq!(queue["items"][0]["item"]["id"], first.as_str());

    let (code, _) = api.post(
        &format!("/api/items/{first}/resolve"),
        json!({"annotator_id": "a3", "label": "Against"}),
    );
    assert_eq!(code, StatusCode::FORBIDDEN);
    let (code, _) = api.post(
        &format!("/api/items/{}/resolve", ids[1]),
        json!({"annotator_id": "s", "role": "senior", "label": "Favor"}),
    );
    assert_eq!(code, StatusCode::CONFLICT);

    let (code, item) = api.post(
        &format!("/api/items/{first}/resolve"),
        json!({"annotator_id": "s", "role": "senior", "label": "Against"}),
    );
    assert_eq!(code, StatusCode::OK);
    assert_eq!(item["status"], "resolved");
    assert_eq!(item["final_label"], "Against");
    let (_, queue) = api.get("/api/items?status=disputed");
    assert_eq!(queue["total"], 0);
    let (code, _) = api.label(first, "a4", "None");
    assert_eq!(code, StatusCode::CONFLICT);

    let a1 = ["Favor", "Against", "None", "Favor", "Against", "Favor", "None", "Against"];
    let a2 = ["Favor", "Against", "None", "Against", "Against", "Favor", "Favor", "Against"];
    for (i, (x, y)) in a1.iter().zip(&a2).enumerate() {
        assert_eq!(api.label(&ids[i + 1], "a1", x).0, StatusCode::OK);
        assert_eq!(api.label(&ids[i + 1], "a2", y).0, StatusCode::OK);
    }

    let (_, agreement) = api.get("/api/stats/agreement");
    assert!(agreement["error"].is_null());
    let parse = |s: &&str| match *s {
        "Favor" => StanceLabel::Favor,
        "Against" => StanceLabel::Against,
        _ => StanceLabel::None,
    };
    let mut ga: Vec<StanceLabel> = vec![StanceLabel::Favor];
    let mut gb: Vec<StanceLabel> = vec![StanceLabel::Against];
    ga.extend(a1.iter().map(parse));
    gb.extend(a2.iter().map(parse));
    let expected = kappa_oracle(&ga, &gb).unwrap();
    let got = agreement["stats"]["mean_pairwise_kappa"].as_f64().unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    assert_eq!(agreement["stats"]["pairs"][0]["items"], 9);
    assert_eq!(
        serde_json::to_value(store.agreement().unwrap()).unwrap(),
        agreement["stats"]
    );

    let (_, progress) = api.get("/api/stats/progress");
    let disputed = a1.iter().zip(&a2).filter(|(x, y)| x != y).count();
    assert_eq!(progress["total"], 50);
    assert_eq!(progress["by_status"]["resolved"], 9 - disputed);
    assert_eq!(progress["by_status"]["disputed"], disputed);
    assert_eq!(progress["by_status"]["pending"], 41);

    let (code, conv) = api.get(&format!("/api/conversations/{with_image}"));
    assert_eq!(code, StatusCode::OK);
    let url = conv["images"][0]["url"].as_str().unwrap();
    let uri = conv["images"][0]["uri"].as_str().unwrap();
    let bytes = api.client.get(format!("{}{url}", api.base)).send().unwrap().bytes().unwrap();
    assert_eq!(bytes.as_ref(), std::fs::read(dir.path().join("corpus").join(uri)).unwrap());

    assert_eq!(api.get("/api/conversations/nope").0, StatusCode::NOT_FOUND);
    assert_eq!(api.label("nope", "a1", "Favor").0, StatusCode::NOT_FOUND);
    assert_eq!(api.get("/api/items?status=bogus").0, StatusCode::BAD_REQUEST);

    server.stop().unwrap();
    drop(store);
    let reopened = LabelStore::open(&store_dir).unwrap();
    let r = reopened.item(first).unwrap();
    assert_eq!(r.item.status, AnnotationStatus::Resolved);
    assert_eq!(r.item.final_label, Some(StanceLabel::Against));
    assert_eq!(reopened.progress().total, 50);
}
