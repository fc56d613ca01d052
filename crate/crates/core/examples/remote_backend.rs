//! Talking to an OpenAI-compatible endpoint. Without `PRISM_ENDPOINT` set
//! this only prints the request body that would be sent.
//!
//! PRISM_ENDPOINT=https://api.openai.com/v1 PRISM_MODEL=gpt-4o-mini \
//! OPENAI_API_KEY=... cargo run --example remote_backend

use prism::backend::{openai_request_body, BackendKind, ChatMessage, ContentPart, ImageData, RemoteBackend, Role};
use prism::synthetic::png_bytes;
use prism::{BackendConfig, ChatBackend, ChatRequest};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let image = ImageData::from_bytes("chart.png", "image/png", png_bytes(8, 8, [200, 40, 40]));
    let request = ChatRequest::new(
        "caption/describe/example",
        vec![
            ChatMessage::system("Describe the image objectively in one sentence."),
            ChatMessage::new(Role::User, vec![ContentPart::Image(image)]),
        ],
    )
    .max_output_tokens(60);

    let model = std::env::var("PRISM_MODEL").unwrap_or_else(|_| "gpt-4o-mini".into());
    let Ok(endpoint) = std::env::var("PRISM_ENDPOINT") else {
        let body = openai_request_body(&model, &request);
        println!("{}", serde_json::to_string_pretty(&body)?);
        eprintln!("set PRISM_ENDPOINT to send it");
        return Ok(());
    };
    let backend = RemoteBackend::from_config(&BackendConfig {
        kind: BackendKind::Remote,
        endpoint: Some(endpoint),
        model: Some(model),
        max_parallel: 2,
        ..Default::default()
    })?;
    let resp = backend.complete(&request)?;
    println!("{} ({:?}): {}", resp.backend_id, resp.latency, resp.text);
    Ok(())
}
