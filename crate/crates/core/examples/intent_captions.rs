//! Two-stage image grounding: a context-free description, then the
//! image's role in the conversation.
//!
//! cargo run --example intent_captions

use std::sync::Arc;

use prism::bundle::{build_bundle, IngestOptions};
use prism::conversation::{serialize_context, Upto};
use prism::grounding::{CaptionCache, Captioner, ContextMode};
use prism::synthetic::demo_corpus;
use prism::MockBackend;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let corpus = demo_corpus(42);
    corpus.write(dir.path())?;
    let opts = IngestOptions {
        images_root: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let (bundle, _) = build_bundle(&corpus.records, &opts)?;
    let entry = bundle
        .conversations
        .iter()
        .max_by_key(|e| e.conversation.images().len())
        .ok_or("empty bundle")?;
    let conv = &entry.conversation;

    let backend = Arc::new(MockBackend::new(42));
    let cache = Arc::new(CaptionCache::new());
    let captioner = Captioner::new(backend.clone(), cache.clone(), dir.path()).context_mode(ContextMode::Prefix);
    let outcome = captioner.caption_conversation(conv)?;
    for c in outcome.captions.iter() {
        println!("{}\n  description: {}\n  intent:      {}", c.key, c.objective.text, c.intent);
    }
    println!("\n{}", serialize_context(conv, &Upto::All, Some(&outcome.captions))?);

    let calls = backend.calls();
    captioner.caption_conversation(conv)?;
    println!("\nsecond pass made {} backend calls ({} cached captions)", backend.calls() - calls, cache.len());
    Ok(())
}
