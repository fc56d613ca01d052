//! Stance detection over multimodal social media conversations.
//!
//! The modules follow the pipeline: [`ingest`] raw records into a
//! [`bundle`], collect labels with [`annotate`], distill [`persona`]s,
//! caption images with [`grounding`], predict with [`stance`], and score
//! with [`eval`]. [`pipeline`] runs the model-facing stages over a bundle
//! and [`cli`] wires everything into the `prism` binary.

pub mod annotate;
pub mod backend;
pub mod bundle;
pub mod cli;
pub mod config;
pub mod conversation;
pub mod digest;
pub mod eval;
pub mod grounding;
pub mod ingest;
pub mod persona;
pub mod pipeline;
pub mod stance;
pub mod synthetic;

pub use backend::{BackendConfig, ChatBackend, ChatRequest, ChatResponse, MockBackend};
pub use conversation::{build_thread, Comment, Conversation, ImageRef, Post, StanceLabel, Target, UserHistory};
pub use persona::PersonaProfile;
pub use stance::AblationFlags;
