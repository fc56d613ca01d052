//! Distills Big Five profiles from user histories, with a cache.
//!
//! cargo run --example persona_distill

use std::sync::Arc;

use prism::bundle::{build_bundle, IngestOptions};
use prism::persona::{render_history, PersonaCache, PersonaDistiller};
use prism::synthetic::demo_corpus;
use prism::MockBackend;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = demo_corpus(42);
    let (bundle, _) = build_bundle(&corpus.records, &IngestOptions::default())?;
    let backend = Arc::new(MockBackend::new(42));
    let cache = Arc::new(PersonaCache::new());
    let distiller = PersonaDistiller::new(backend.clone(), cache.clone()).budget(600);

    for user in bundle.final_authors().iter().take(4) {
        let history = &bundle.histories[user];
        let profile = distiller.distill(history)?;
        println!("{user}: {profile}  ({} history items)", history.items.len());
    }
    let calls = backend.calls();
    let user = &bundle.final_authors()[0];
    distiller.distill(&bundle.histories[user])?;
    println!("\nrepeat lookup hit the cache: {}", backend.calls() == calls);
    println!("cache holds {} profiles", cache.len());

    println!("\nrendered history for {user} (600 char budget):");
    println!("{}", render_history(&bundle.histories[user], 600));
    Ok(())
}
