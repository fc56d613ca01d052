//! Filters a raw corpus and materializes one conversation per comment.
//!
//! cargo run --example ingest_filter [-- path/to/raw.jsonl]

use std::path::PathBuf;

use prism::bundle::{build_bundle, IngestOptions};
use prism::ingest::{filter_records, load_raw, raw_depths, FilterPolicy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/filter_stress/raw.jsonl"));
    let loaded = load_raw(&path, false)?;
    println!("{} records, {} malformed lines", loaded.records.len(), loaded.errors.len());

    let deepest = raw_depths(&loaded.records).into_values().max().unwrap_or(0);
    println!("deepest comment before filtering: {deepest}");

    let policy = FilterPolicy::default();
    let (kept, report) = filter_records(&loaded.records, &policy);
    println!(
        "kept {} of {}: author status -{}, short text -{}, depth -{}",
        report.retained, report.input, report.dropped_author_status, report.dropped_short_text, report.dropped_depth
    );
    println!("deepest comment after filtering: {}", raw_depths(&kept).into_values().max().unwrap_or(0));

    let opts = IngestOptions {
        targets: vec!["tesla".into(), "bitcoin".into()],
        ..Default::default()
    };
    let (bundle, _) = build_bundle(&loaded.records, &opts)?;
    println!(
        "tesla + bitcoin: {} conversations, {} users, {} histories",
        bundle.conversations.len(),
        bundle.users.len(),
        bundle.histories.len()
    );
    if let Some(e) = bundle.conversations.iter().max_by_key(|e| e.depth) {
        println!("deepest view {} has {} turns", e.conversation.id(), e.conversation.comments().len() + 1);
    }
    Ok(())
}
