//! The whole pipeline on the bundled synthetic corpus through the library
//! API, comparing the full model with each ablation.
//!
//! cargo run --example full_pipeline

use std::path::PathBuf;
use std::sync::Arc;

use prism::backend::BackendConfig;
use prism::bundle::{build_bundle, IngestOptions};
use prism::config::PipelineConfig;
use prism::eval::{evaluate_run, Grouping};
use prism::grounding::CaptionCache;
use prism::ingest::load_raw;
use prism::persona::PersonaCache;
use prism::pipeline::{run_captions, run_inference, run_personas, StageContext};
use prism::AblationFlags;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/synthetic");
    let cfg = PipelineConfig::default();
    eprintln!("{}", cfg.header());

    let raw = load_raw(&data.join("raw.jsonl"), true)?;
    let opts = IngestOptions {
        images_root: Some(data.clone()),
        ..Default::default()
    };
    let (bundle, report) = build_bundle(&raw.records, &opts)?;
    println!("ingest: {} conversations, {} records dropped", bundle.conversations.len(), report.dropped());

    let ctx = StageContext {
        backend: BackendConfig { seed: cfg.seed, ..cfg.backend.clone() }.build()?,
        images_root: data,
        persona: cfg.persona.clone(),
        grounding: cfg.grounding.clone(),
        max_parallel: cfg.backend.max_parallel,
    };
    let personas = Arc::new(PersonaCache::new());
    let captions = Arc::new(CaptionCache::new());
    let p = run_personas(&ctx, &bundle, personas.clone())?;
    let c = run_captions(&ctx, &bundle, captions.clone())?;
    println!("persona: {} profiles; caption: {} captions\n", p.done, c.done);

    for flags in [
        AblationFlags::default(),
        AblationFlags { use_persona: false, ..Default::default() },
        AblationFlags { use_intent: false, ..Default::default() },
    ] {
        let lines = run_inference(&ctx, &bundle, personas.clone(), captions.clone(), flags, None)?;
        let records: Vec<_> = lines.iter().filter_map(|l| l.record()).collect();
        let report = evaluate_run(&records)?;
        println!("== {}", flags.describe());
        print!("{}", report.render_table(Grouping::Depth));
        println!();
    }
    Ok(())
}
