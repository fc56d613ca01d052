use serde::{Deserialize, Serialize};

use super::{assemble_cls_input, check_captions, persona_block, target_block, AblationFlags, StanceError};
use crate::conversation::{comment_depth, serialize_context, Conversation, StanceLabel, Target, Upto};
use crate::grounding::CaptionSet;
use crate::persona::PersonaProfile;

pub const GENERATION_INSTRUCTION: &str = "Write the next reply in a social media conversation. You write as the \
given user, with the given stance toward the target, in that user's voice. Output only the reply text.";

/// Response-generation conditioning set: target, gold stance, persona, and
/// the conversation up to (not including) the final comment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenBundle {
    pub conversation_id: String,
    pub target: Target,
    pub gold: StanceLabel,
    pub persona: Option<PersonaProfile>,
    pub conversation_text: String,
    pub prompt: String,
    pub target_utterance: String,
}

pub fn assemble_gen_input(
    conv: &Conversation,
    persona: Option<&PersonaProfile>,
    captions: &CaptionSet,
    gold: StanceLabel,
    target: &Target,
    flags: AblationFlags,
) -> Result<GenBundle, StanceError> {
    let final_comment = conv
        .final_comment()
        .ok_or_else(|| StanceError::NoFinalComment(conv.id().to_string()))?;
    let alias = conv.alias_of(&final_comment.author).unwrap_or_default();
    let depth = comment_depth(conv, &final_comment.id)?;
    if flags.use_intent {
        check_captions(conv, captions)?;
    }
    let persona = if flags.use_persona {
        Some(*persona.ok_or(StanceError::MissingPersona)?)
    } else {
        None
    };
    let conversation_text = serialize_context(
        conv,
        &Upto::Before(final_comment.id.clone()),
        flags.use_intent.then_some(captions),
    )?;

    let mut blocks = vec![
        GENERATION_INSTRUCTION.to_string(),
        target_block(target),
        format!("Stance of {alias} toward {}: {}", target.name, gold.as_word()),
    ];
    if let Some(p) = &persona {
        blocks.push(persona_block(&alias, p));
    }
    blocks.push(format!("Conversation so far:\n{conversation_text}"));
    blocks.push(format!("Reply of {alias} (reply depth={depth}):"));

    Ok(GenBundle {
        conversation_id: conv.id().to_string(),
        target: target.clone(),
        gold,
        persona,
        conversation_text,
        prompt: blocks.join("\n\n"),
        target_utterance: final_comment.text.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionKind {
    Classification,
    Generation,
}

/// Which side of the joint objective a record's loss is weighted by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightRole {
    #[serde(rename = "lambda")]
    Lambda,
    #[serde(rename = "one_minus_lambda")]
    OneMinusLambda,
}

impl WeightRole {
    pub fn weight(self, lambda: f64) -> f64 {
        match self {
            WeightRole::Lambda => lambda,
            WeightRole::OneMinusLambda => 1.0 - lambda,
        }
    }
}

/// One training example for an external trainer. Summing
/// `weight_role.weight(lambda) * nll(completion | prompt)` over a
/// conversation's records gives its joint loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionRecord {
    pub kind: SupervisionKind,
    pub prompt: String,
    pub completion: String,
    pub weight_role: WeightRole,
    pub lambda: f64,
    pub conversation_id: String,
    pub flags: AblationFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionOutcome {
    pub records: Vec<SupervisionRecord>,
    /// Set when generation was requested but the final utterance is empty.
    pub flagged: Option<StanceError>,
}

/// Emits the classification record, plus the generation record when
/// `flags.use_mutual` is set and the final utterance is non-empty.
pub fn emit_supervision(
    conv: &Conversation,
    persona: Option<&PersonaProfile>,
    captions: &CaptionSet,
    gold: StanceLabel,
    target: &Target,
    flags: AblationFlags,
    lambda: f64,
) -> Result<SupervisionOutcome, StanceError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(StanceError::LambdaOutOfRange(lambda));
    }
    let cls = assemble_cls_input(conv, persona, captions, target, flags)?;
    let mut records = vec![SupervisionRecord {
        kind: SupervisionKind::Classification,
        prompt: cls.prompt,
        completion: gold.as_word().to_string(),
        weight_role: WeightRole::Lambda,
        lambda,
        conversation_id: conv.id().to_string(),
        flags,
    }];
    let mut flagged = None;
    if flags.use_mutual {
        let gen = assemble_gen_input(conv, persona, captions, gold, target, flags)?;
        if gen.target_utterance.trim().is_empty() {
            flagged = Some(StanceError::EmptyUtterance);
        } else {
            records.push(SupervisionRecord {
                kind: SupervisionKind::Generation,
                prompt: gen.prompt,
                completion: gen.target_utterance,
                weight_role: WeightRole::OneMinusLambda,
                lambda,
                conversation_id: conv.id().to_string(),
                flags,
            });
        }
    }
    Ok(SupervisionOutcome { records, flagged })
}
