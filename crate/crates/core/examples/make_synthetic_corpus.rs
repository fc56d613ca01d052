//! Writes the bundled demo corpus and the filter stress corpus.
//!
//! ```text
//! cargo run --example make_synthetic_corpus -- [out-dir]
//! ```
//! Without an argument both corpora are regenerated in place under
//! `data/`.

use std::path::PathBuf;

use prism::synthetic::{demo_corpus, filter_stress_corpus};

fn main() -> std::io::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data"));
    demo_corpus(42).write(&out.join("synthetic"))?;
    filter_stress_corpus(42).write(&out.join("filter_stress"))?;
    println!("wrote {}", out.display());
    Ok(())
}
