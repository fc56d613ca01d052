//! Pre-annotation, double labeling, dispute resolution, agreement and the
//! thread-level split. Pass `--serve` to also query the REST API.
//!
//! cargo run --example annotation_workflow [-- --serve]

use std::collections::BTreeMap;
use std::sync::Arc;

use prism::annotate::{
    finalize_and_split, preannotate_batch, spawn_server, AnnotationStatus, AnnotatorRole, ItemQuery, LabelStore,
    ServeOptions, SplitRatio,
};
use prism::bundle::{build_bundle, IngestOptions};
use prism::synthetic::demo_corpus;
use prism::{MockBackend, StanceLabel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let corpus = demo_corpus(42);
    let (bundle, _) = build_bundle(&corpus.records, &IngestOptions::default())?;
    let gold: BTreeMap<String, StanceLabel> = bundle
        .conversations
        .iter()
        .filter_map(|e| Some((e.conversation.id().to_string(), e.gold?)))
        .collect();

    let convs: Vec<_> = bundle.conversations.iter().map(|e| &e.conversation).collect();
    let suggestions = preannotate_batch(&convs, &MockBackend::new(42), 4);
    let store = Arc::new(LabelStore::create(&dir.path().join("store"), bundle.clone(), &suggestions)?);
    println!("store with {} items, {} suggestions", store.items().len(), suggestions.len());

    // Annotator a1 agrees with gold; a2 slips on every fifth item.
    for (i, (id, g)) in gold.iter().enumerate() {
        store.submit_label(id, "a1", *g, AnnotatorRole::Regular)?;
        let l = if i % 5 == 0 { StanceLabel::ALL[(g.index() + 1) % 3] } else { *g };
        store.submit_label(id, "a2", l, AnnotatorRole::Regular)?;
    }
    let disputed = ItemQuery {
        status: Some(AnnotationStatus::Disputed),
        ..Default::default()
    };
    let (queue, n) = store.query(&disputed);
    println!("dispute queue: {n} items");
    for r in &queue {
        store.submit_label(&r.item.id, "senior", gold[&r.item.id], AnnotatorRole::Senior)?;
    }
    println!("after senior review: {:?}", store.progress().by_status);

    let stats = store.agreement()?;
    println!("mean pairwise kappa {:.4} over {} pair(s)", stats.mean_pairwise_kappa, stats.pairs.len());

    let (dataset, split, report) = finalize_and_split(&store, SplitRatio::default(), 42);
    println!(
        "finalized {} items ({} excluded), threads per split {:?}",
        dataset.conversations.len(),
        report.excluded.len(),
        split.thread_counts()
    );

    if std::env::args().any(|a| a == "--serve") {
        let server = spawn_server(store.clone(), "127.0.0.1:0".parse()?, &ServeOptions::default())?;
        let body = reqwest::blocking::get(format!("{}/api/stats/progress", server.url()))?.text()?;
        println!("GET /api/stats/progress -> {body}");
        server.stop()?;
    }
    Ok(())
}
