//! Stance prediction: conditioning-set assembly, backend calls, label
//! parsing, multitask supervision records and loss arithmetic.

mod loss;
mod supervision;

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatMessage, ChatRequest, ContentPart, ImageData, Role};
use crate::conversation::{comment_depth, serialize_context, Conversation, ImageRef, StanceLabel, Target, ThreadError, Upto};
use crate::grounding::CaptionSet;
use crate::persona::PersonaProfile;

pub use loss::{combine_losses, nll_from_logprobs, LossBreakdown, Reduction, DEFAULT_LAMBDA};
pub use supervision::{
    assemble_gen_input, emit_supervision, GenBundle, SupervisionKind, SupervisionOutcome, SupervisionRecord, WeightRole,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StanceError {
    #[error("captions missing for image {0} and it is not marked unavailable")]
    IncompleteCaptions(String),
    #[error("persona required when use_persona is set")]
    MissingPersona,
    #[error("conversation {0} has no final comment")]
    NoFinalComment(String),
    #[error("response names more than one stance: {0:?}")]
    Ambiguous(Vec<StanceLabel>),
    #[error("response names no stance label")]
    NoLabelFound,
    #[error("stance output unparseable after reprompt: {0}")]
    ParseFailure(Box<StanceError>),
    #[error("final comment text is empty")]
    EmptyUtterance,
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("loss {0} is negative or not finite")]
    InvalidLoss(f64),
    #[error("empty logprob sequence")]
    EmptySequence,
    #[error("logprob {value} at position {index} is positive")]
    PositiveLogprob { index: usize, value: f64 },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Thread(#[from] ThreadError),
}

/// Ablation switches. All on reproduces the full model; each off drops one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_persona: bool,
    pub use_intent: bool,
    /// Only affects supervision emission.
    pub use_mutual: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_persona: true,
            use_intent: true,
            use_mutual: true,
        }
    }
}

impl AblationFlags {
    pub fn describe(&self) -> String {
        let mut off = Vec::new();
        if !self.use_persona {
            off.push("no-persona");
        }
        if !self.use_intent {
            off.push("no-intent");
        }
        if !self.use_mutual {
            off.push("no-mutual");
        }
        if off.is_empty() {
            "full".into()
        } else {
            off.join(",")
        }
    }
}

pub const STANCE_INSTRUCTION: &str = "You analyse stance in social media conversations. Read the conversation \
and decide which stance the author of the final comment expresses toward the target. Images appear as <img j> \
markers, with an interpretation of the image when available. The possible labels are Favor, Against and None.";

pub const STANCE_REMINDER: &str = "Your previous answer could not be parsed. Answer with exactly one word: Favor, Against, or None.";

pub(crate) fn target_block(target: &Target) -> String {
    format!("Target: {}", target.name)
}

pub(crate) fn persona_block(alias: &str, persona: &PersonaProfile) -> String {
    format!("Persona of {alias} (Big Five, 1-5): {persona}")
}

/// Stance-classification conditioning set: target, persona of the final
/// author, the full conversation, and the intent-aware captions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClsBundle {
    pub conversation_id: String,
    pub target: Target,
    pub persona: Option<PersonaProfile>,
    pub conversation_text: String,
    pub captions: CaptionSet,
    pub prompt: String,
    pub flags: AblationFlags,
    pub final_alias: String,
    #[serde(skip)]
    pub images: Vec<ImageRef>,
}

pub(crate) fn check_captions(conv: &Conversation, captions: &CaptionSet) -> Result<(), StanceError> {
    for (key, _) in conv.images() {
        if captions.get(&key).is_none() && !captions.is_unavailable(&key) {
            return Err(StanceError::IncompleteCaptions(key.to_string()));
        }
    }
    Ok(())
}

/// Builds the classification prompt. Blocks are separated by blank lines:
/// instruction, target, persona (iff `use_persona`), conversation (with
/// caption markers iff `use_intent`), question.
pub fn assemble_cls_input(
    conv: &Conversation,
    persona: Option<&PersonaProfile>,
    captions: &CaptionSet,
    target: &Target,
    flags: AblationFlags,
) -> Result<ClsBundle, StanceError> {
    let final_comment = conv
        .final_comment()
        .ok_or_else(|| StanceError::NoFinalComment(conv.id().to_string()))?;
    let depth = comment_depth(conv, &final_comment.id)?;
    let alias = conv.alias_of(&final_comment.author).unwrap_or_default();
    if flags.use_intent {
        check_captions(conv, captions)?;
    }
    let persona = if flags.use_persona {
        Some(*persona.ok_or(StanceError::MissingPersona)?)
    } else {
        None
    };
    let conversation_text = serialize_context(conv, &Upto::All, flags.use_intent.then_some(captions))?;

    let mut blocks = vec![STANCE_INSTRUCTION.to_string(), target_block(target)];
    if let Some(p) = &persona {
        blocks.push(persona_block(&alias, p));
    }
    blocks.push(format!("Conversation:\n{conversation_text}"));
    blocks.push(format!(
        "Question: What stance does the final comment by {alias} (reply depth={depth}) express toward {}? \
Answer with one word: Favor, Against, or None.",
        target.name
    ));

    Ok(ClsBundle {
        conversation_id: conv.id().to_string(),
        target: target.clone(),
        persona,
        conversation_text,
        captions: if flags.use_intent { captions.clone() } else { CaptionSet::new() },
        prompt: blocks.join("\n\n"),
        flags,
        final_alias: alias,
        images: conv.images().into_iter().map(|(_, r)| r.clone()).collect(),
    })
}

fn label_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(favou?r|against|none|neutral)\b").unwrap())
}

/// Finds the single stance named in `text`. "none" and "neutral" both mean
/// [`StanceLabel::None`]; zero or several distinct labels are errors.
pub fn parse_stance(text: &str) -> Result<StanceLabel, StanceError> {
    let mut seen: Vec<StanceLabel> = Vec::new();
    for m in label_pattern().find_iter(text) {
        let label = match m.as_str().to_ascii_lowercase().as_str() {
            "favor" | "favour" => StanceLabel::Favor,
            "against" => StanceLabel::Against,
            _ => StanceLabel::None,
        };
        if !seen.contains(&label) {
            seen.push(label);
        }
    }
    match seen.as_slice() {
        [] => Err(StanceError::NoLabelFound),
        [one] => Ok(*one),
        _ => {
            seen.sort();
            Err(StanceError::Ambiguous(seen))
        }
    }
}

/// Runs classification bundles against a backend.
pub struct StancePredictor {
    backend: Arc<dyn ChatBackend>,
    image_root: Option<PathBuf>,
}

impl StancePredictor {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            image_root: None,
        }
    }

    /// Attach the conversation's raw images (read from `root`) after the prompt text.
    pub fn attach_images(mut self, root: impl Into<PathBuf>) -> Self {
        self.image_root = Some(root.into());
        self
    }

    pub fn build_request(&self, bundle: &ClsBundle) -> ChatRequest {
        let mut parts = vec![ContentPart::Text(bundle.prompt.clone())];
        if let Some(root) = &self.image_root {
            parts.extend(
                bundle
                    .images
                    .iter()
                    .filter_map(|r| ImageData::load(root, r).ok())
                    .map(ContentPart::Image),
            );
        }
        ChatRequest::new(
            format!("stance/{}", bundle.conversation_id),
            vec![ChatMessage::new(Role::User, parts)],
        )
        .max_output_tokens(16)
    }

    /// Returns the parsed label and the raw text of the response it came from.
    /// One reprompt with a format reminder is attempted before failing.
    pub fn predict(&self, bundle: &ClsBundle) -> Result<(StanceLabel, String), StanceError> {
        let request = self.build_request(bundle);
        let first = self.backend.complete(&request)?;
        if let Ok(label) = parse_stance(&first.text) {
            return Ok((label, first.text));
        }
        let mut retry = request;
        retry.messages.push(ChatMessage::assistant(first.text));
        retry.messages.push(ChatMessage::user(STANCE_REMINDER));
        let second = self.backend.complete(&retry)?;
        match parse_stance(&second.text) {
            Ok(label) => Ok((label, second.text)),
            Err(e) => Err(StanceError::ParseFailure(Box::new(e))),
        }
    }
}

pub fn predict_stance(backend: Arc<dyn ChatBackend>, bundle: &ClsBundle) -> Result<(StanceLabel, String), StanceError> {
    StancePredictor::new(backend).predict(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockReply, MockRule};
    use crate::conversation::{build_thread, Comment, Post};
    use crate::grounding::{ImageKey, IntentCaption, ObjectiveDescription};

    pub(crate) fn sample() -> (Conversation, CaptionSet, PersonaProfile) {
        let post = Post {
            id: "p".into(),
            author: "op".into(),
            text: "Tesla sales numbers are out".into(),
            images: vec![ImageRef::new("chart.png")],
            created_at: "2024-03-01T10:00:00Z".into(),
            target: "tesla".into(),
        };
        let comments = vec![
            Comment {
                id: "c1".into(),
                parent_id: "p".into(),
                author: "bob".into(),
                text: "Looks bad for them".into(),
                images: vec![],
                created_at: "2024-03-01T10:05:00Z".into(),
            },
            Comment {
                id: "c2".into(),
                parent_id: "c1".into(),
                author: "carol".into(),
                text: "Totally wrong, see this".into(),
                images: vec![ImageRef::new("meme.png")],
                created_at: "2024-03-01T10:09:00Z".into(),
            },
        ];
        let conv = build_thread(post, comments).unwrap();
        let mut captions = CaptionSet::new();
        for (key, text) in [(ImageKey::post(0), "chart shows decline"), (ImageKey::comment("c2", 0), "mocks the critics")] {
            captions.insert(IntentCaption {
                key: key.clone(),
                objective: ObjectiveDescription {
                    key,
                    text: "objective".into(),
                },
                intent: text.into(),
            });
        }
        (conv, captions, PersonaProfile::new(4, 2, 3, 5, 1).unwrap())
    }

    #[test]
    fn full_prompt_contains_every_block() {
        let (conv, captions, persona) = sample();
        let b = assemble_cls_input(&conv, Some(&persona), &captions, &Target::from_id("tesla"), AblationFlags::default()).unwrap();
        assert!(b.prompt.contains("Target: Tesla"));
        assert!(b.prompt.contains("Persona of user_3 (Big Five, 1-5): O:4 C:2 E:3 A:5 N:1"));
        assert!(b.prompt.contains("<img 1: chart shows decline>"));
        assert!(b.prompt.contains("<img 2: mocks the critics>"));
        assert!(b.prompt.contains("final comment by user_3 (reply depth=2)"));
        assert_eq!(b.final_alias, "user_3");
    }

    #[test]
    fn ablations_touch_only_their_block() {
        let (conv, captions, persona) = sample();
        let t = Target::from_id("tesla");
        let full = assemble_cls_input(&conv, Some(&persona), &captions, &t, AblationFlags::default()).unwrap();
        let no_persona = assemble_cls_input(
            &conv,
            Some(&persona),
            &captions,
            &t,
            AblationFlags {
                use_persona: false,
                ..Default::default()
            },
        )
        .unwrap();
        let persona_line = persona_block("user_3", &persona);
        assert_eq!(no_persona.prompt, full.prompt.replace(&format!("{persona_line}\n\n"), ""));
        assert!(no_persona.persona.is_none());

        let no_intent = assemble_cls_input(
            &conv,
            Some(&persona),
            &captions,
            &t,
            AblationFlags {
                use_intent: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(no_intent.prompt.contains("see this <img 2>"));
        assert!(!no_intent.prompt.contains("<img 1:"));
    }

    #[test]
    fn missing_inputs_rejected() {
        let (conv, _, persona) = sample();
        let t = Target::from_id("tesla");
        assert!(matches!(
            assemble_cls_input(&conv, Some(&persona), &CaptionSet::new(), &t, AblationFlags::default()),
            Err(StanceError::IncompleteCaptions(_))
        ));
        let (_, captions, _) = sample();
        assert_eq!(
            assemble_cls_input(&conv, None, &captions, &t, AblationFlags::default()),
            Err(StanceError::MissingPersona)
        );
        let mut partial = CaptionSet::new();
        partial.mark_unavailable(ImageKey::post(0));
        partial.mark_unavailable(ImageKey::comment("c2", 0));
        let b = assemble_cls_input(&conv, Some(&persona), &partial, &t, AblationFlags::default()).unwrap();
        assert!(b.prompt.contains("<img 1: caption unavailable>"));
    }

    #[test]
    fn parse_stance_cases() {
        assert_eq!(parse_stance("AGAINST"), Ok(StanceLabel::Against));
        assert_eq!(parse_stance("The stance is: favor."), Ok(StanceLabel::Favor));
        assert_eq!(parse_stance("neutral"), Ok(StanceLabel::None));
        assert_eq!(parse_stance("None. It is neutral."), Ok(StanceLabel::None));
        assert_eq!(parse_stance(""), Err(StanceError::NoLabelFound));
        assert_eq!(parse_stance("favorable"), Err(StanceError::NoLabelFound));
        assert_eq!(
            parse_stance("favor or against, hard to say"),
            Err(StanceError::Ambiguous(vec![StanceLabel::Favor, StanceLabel::Against]))
        );
    }

    fn predict_with(reply: &str) -> Result<(StanceLabel, String), StanceError> {
        let (conv, captions, persona) = sample();
        let b = assemble_cls_input(&conv, Some(&persona), &captions, &Target::from_id("tesla"), AblationFlags::default()).unwrap();
        let mock = Arc::new(MockBackend::new(0).rule(MockRule::tag("^stance/", MockReply::Text(reply.into()))));
        predict_stance(mock, &b)
    }

    #[test]
    fn predict_parses_scripted_replies() {
        assert_eq!(predict_with("Against").unwrap(), (StanceLabel::Against, "Against".into()));
        assert_eq!(predict_with("The stance is: favor.").unwrap().0, StanceLabel::Favor);
        assert!(matches!(
            predict_with("favor or against, hard to say"),
            Err(StanceError::ParseFailure(_))
        ));
    }

    #[test]
    fn reprompt_recovers() {
        let (conv, captions, persona) = sample();
        let b = assemble_cls_input(&conv, Some(&persona), &captions, &Target::from_id("tesla"), AblationFlags::default()).unwrap();
        let mock = Arc::new(
            MockBackend::new(0)
                .rule(MockRule::tag("^stance/", MockReply::Text("None".into())).containing(STANCE_REMINDER))
                .rule(MockRule::tag("^stance/", MockReply::Text("unsure".into()))),
        );
        assert_eq!(predict_stance(mock.clone(), &b).unwrap().0, StanceLabel::None);
        assert_eq!(mock.calls(), 2);
    }
}
