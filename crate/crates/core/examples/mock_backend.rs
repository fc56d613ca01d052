//! The deterministic mock backend: default replies, scripted rules,
//! logprobs and bounded batches.
//!
//! cargo run --example mock_backend

use prism::backend::{complete_batch, ChatMessage, MockReply, MockRule};
use prism::{ChatBackend, ChatRequest, MockBackend};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mock = MockBackend::new(7)
        .rule(MockRule::tag("^stance/", MockReply::Text("Against".into())).containing("refund"))
        .rule(MockRule::tag("^flaky/", MockReply::Fail("simulated outage".into())));

    let persona = ChatRequest::new("persona/u1", vec![ChatMessage::user("history goes here")]);
    println!("persona default: {}", mock.complete(&persona)?.text);
    println!("same again:      {}", mock.complete(&persona)?.text);

    let scripted = ChatRequest::new("stance/c1", vec![ChatMessage::user("I want a refund")]);
    println!("scripted stance: {}", mock.complete(&scripted)?.text);

    let scored = ChatRequest::new("stance/c2", vec![ChatMessage::user("Love it")]).with_logprobs();
    let r = mock.complete(&scored)?;
    println!("logprobs for {:?}: {:?}", r.text, r.token_logprobs);

    let batch: Vec<ChatRequest> = (0..6)
        .map(|i| {
            let tag = if i == 3 { "flaky/x".to_string() } else { format!("stance/b{i}") };
            ChatRequest::new(tag, vec![ChatMessage::user(format!("turn {i}"))])
        })
        .collect();
    for (i, r) in complete_batch(&mock, &batch, 3).into_iter().enumerate() {
        match r {
            Ok(resp) => println!("batch[{i}] = {}", resp.text),
            Err(e) => println!("batch[{i}] failed: {e}"),
        }
    }
    println!("{} calls logged", mock.calls());
    Ok(())
}
