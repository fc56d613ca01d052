//! Classification prompts, prediction, supervision records and the joint
//! loss for one conversation, with each ablation switch.
//!
//! cargo run --example stance_supervision

use std::sync::Arc;

use prism::backend::{ChatMessage, MockReply, MockRule};
use prism::bundle::{build_bundle, IngestOptions};
use prism::grounding::{CaptionCache, Captioner};
use prism::persona::{PersonaCache, PersonaDistiller};
use prism::stance::{
    assemble_cls_input, combine_losses, emit_supervision, nll_from_logprobs, Reduction, StancePredictor, DEFAULT_LAMBDA,
};
use prism::synthetic::demo_corpus;
use prism::{AblationFlags, ChatBackend, ChatRequest, MockBackend, Target};

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
        .find(|e| e.depth == 3 && !e.conversation.images().is_empty())
        .ok_or("no suitable conversation")?;
    let conv = &entry.conversation;
    let gold = entry.gold.ok_or("unlabeled")?;
    let target = Target::from_id(conv.target_id());

    let backend = Arc::new(MockBackend::new(42).rule(MockRule::tag("^stance/", MockReply::Text("Stance: Against.".into()))));
    let captions = Captioner::new(backend.clone(), Arc::new(CaptionCache::new()), dir.path())
        .caption_conversation(conv)?
        .captions;
    let author = &conv.final_comment().ok_or("no final comment")?.author;
    let persona = PersonaDistiller::new(backend.clone(), Arc::new(PersonaCache::new())).distill(&bundle.histories[author])?;

    let cls = assemble_cls_input(conv, Some(&persona), &captions, &target, AblationFlags::default())?;
    println!("--- classification prompt ---\n{}\n", cls.prompt);
    let (label, raw) = StancePredictor::new(backend.clone()).predict(&cls)?;
    println!("predicted {label:?} from {raw:?}, gold {gold:?}\n");

    for flags in [
        AblationFlags::default(),
        AblationFlags { use_persona: false, ..Default::default() },
        AblationFlags { use_intent: false, ..Default::default() },
        AblationFlags { use_mutual: false, ..Default::default() },
    ] {
        let out = emit_supervision(conv, Some(&persona), &captions, gold, &target, flags, DEFAULT_LAMBDA)?;
        let chars: Vec<usize> = out.records.iter().map(|r| r.prompt.len()).collect();
        println!("{:<11} {} record(s), prompt chars {:?}", flags.describe(), out.records.len(), chars);
    }

    // Score both records with the mock's logprobs to get a joint loss.
    let out = emit_supervision(conv, Some(&persona), &captions, gold, &target, AblationFlags::default(), DEFAULT_LAMBDA)?;
    let mut losses = Vec::new();
    for rec in &out.records {
        let req = ChatRequest::new(
            format!("score/{:?}", rec.kind),
            vec![ChatMessage::user(rec.prompt.clone()), ChatMessage::assistant(rec.completion.clone())],
        )
        .with_logprobs();
        let lps: Vec<f64> = backend
            .complete(&req)?
            .token_logprobs
            .unwrap_or_default()
            .iter()
            .map(|t| t.logprob)
            .collect();
        losses.push(nll_from_logprobs(&lps, Reduction::Mean)?);
    }
    let joint = combine_losses(losses[0], losses[1], DEFAULT_LAMBDA)?;
    println!(
        "\nl_cls={:.4} l_gen={:.4} lambda={} -> l_total={:.4}",
        joint.l_cls, joint.l_gen, joint.lambda, joint.l_total
    );
    Ok(())
}
