//! Stage runners over a bundle: persona distillation, captioning, stance
//! inference and supervision emission. Each stage fans out over a worker
//! pool of `max_parallel` threads; outputs come back in bundle order.

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ChatBackend;
use crate::bundle::{Bundle, ConversationEntry, Split};
use crate::config::{GroundingSettings, PersonaSettings};
use crate::conversation::{StanceLabel, Target, UserHistory};
use crate::eval::{Prediction, PredictionRecord};
use crate::grounding::{CaptionCache, CaptionSet, Captioner};
use crate::persona::{PersonaCache, PersonaDistiller, PersonaProfile};
use crate::stance::{assemble_cls_input, emit_supervision, AblationFlags, StancePredictor, SupervisionRecord};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot build worker pool: {0}")]
    Pool(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path} line {line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
}

/// Shared inputs for the model-facing stages.
#[derive(Clone)]
pub struct StageContext {
    pub backend: Arc<dyn ChatBackend>,
    pub images_root: PathBuf,
    pub persona: PersonaSettings,
    pub grounding: GroundingSettings,
    pub max_parallel: usize,
}

impl StageContext {
    fn pool(&self) -> Result<rayon::ThreadPool, PipelineError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.max_parallel.max(1))
            .build()
            .map_err(|e| PipelineError::Pool(e.to_string()))
    }

    pub fn distiller(&self, cache: Arc<PersonaCache>) -> PersonaDistiller {
        let d = PersonaDistiller::new(self.backend.clone(), cache)
            .template(self.persona.template.clone())
            .budget(self.persona.budget);
        if self.persona.history_images > 0 {
            d.history_images(self.persona.history_images, self.images_root.clone())
        } else {
            d
        }
    }

    pub fn captioner(&self, cache: Arc<CaptionCache>) -> Captioner {
        Captioner::new(self.backend.clone(), cache, self.images_root.clone())
            .templates(self.grounding.templates.clone())
            .context_mode(self.grounding.context_mode)
            .max_parallel(1)
    }
}

fn history_of<'a>(bundle: &'a Bundle, user: &str, empty: &'a UserHistory) -> &'a UserHistory {
    bundle.histories.get(user).unwrap_or(empty)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StageReport {
    pub done: usize,
    pub failed: Vec<(String, String)>,
}

/// Distills a profile for every final-comment author into `cache`.
pub fn run_personas(ctx: &StageContext, bundle: &Bundle, cache: Arc<PersonaCache>) -> Result<StageReport, PipelineError> {
    let distiller = ctx.distiller(cache);
    let users = bundle.final_authors();
    let empty = UserHistory::new("", vec![]);
    let results: Vec<_> = ctx.pool()?.install(|| {
        users
            .par_iter()
            .map(|u| {
                let mut h = history_of(bundle, u, &empty).clone();
                h.user = u.clone();
                distiller.distill(&h).map_err(|e| e.to_string())
            })
            .collect()
    });
    let mut report = StageReport::default();
    for (u, r) in users.into_iter().zip(results) {
        match r {
            Ok(_) => report.done += 1,
            Err(e) => report.failed.push((u, e)),
        }
    }
    Ok(report)
}

/// Captions every image of every conversation into `cache`.
pub fn run_captions(ctx: &StageContext, bundle: &Bundle, cache: Arc<CaptionCache>) -> Result<StageReport, PipelineError> {
    let captioner = ctx.captioner(cache);
    let results: Vec<_> = ctx.pool()?.install(|| {
        bundle
            .conversations
            .par_iter()
            .map(|e| captioner.caption_conversation(&e.conversation))
            .collect()
    });
    let mut report = StageReport::default();
    for (e, r) in bundle.conversations.iter().zip(results) {
        match r {
            Ok(out) => {
                report.done += out.captions.len();
                for (key, err) in out.failures {
                    report.failed.push((format!("{}/{key}", e.conversation.id()), err.to_string()));
                }
            }
            Err(err) => report.failed.push((e.conversation.id().to_string(), err.to_string())),
        }
    }
    Ok(report)
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub conversation_id: String,
    pub target_id: String,
    pub gold: Option<StanceLabel>,
    pub predicted: Prediction,
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub flags: AblationFlags,
    pub depth: u32,
}

impl PredictionLine {
    /// The scoring view of this line; `None` without a gold label.
    pub fn record(&self) -> Option<PredictionRecord> {
        Some(PredictionRecord {
            conversation_id: self.conversation_id.clone(),
            target_id: self.target_id.clone(),
            gold: self.gold?,
            predicted: self.predicted,
            depth: self.depth,
        })
    }
}

/// Conditioning inputs for one conversation: its captions (when
/// `use_intent`) and its final author's persona (when `use_persona`).
fn conditioning(
    bundle: &Bundle,
    entry: &ConversationEntry,
    flags: AblationFlags,
    distiller: &PersonaDistiller,
    captioner: &Captioner,
) -> Result<(CaptionSet, Option<PersonaProfile>), String> {
    let conv = &entry.conversation;
    let captions = if flags.use_intent {
        captioner.caption_conversation(conv).map_err(|e| e.to_string())?.captions
    } else {
        CaptionSet::new()
    };
    let persona = match (flags.use_persona, conv.final_comment()) {
        (true, Some(c)) => {
            let empty = UserHistory::new("", vec![]);
            let mut h = history_of(bundle, &c.author, &empty).clone();
            h.user = c.author.clone();
            Some(distiller.distill(&h).map_err(|e| e.to_string())?)
        }
        _ => None,
    };
    Ok((captions, persona))
}

fn select(bundle: &Bundle, split: Option<Split>) -> Vec<&ConversationEntry> {
    bundle
        .conversations
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == Some(s)))
        .collect()
}

/// Predicts a stance for each conversation (optionally one split only).
/// Cache misses for personas and captions are filled from the backend.
pub fn run_inference(
    ctx: &StageContext,
    bundle: &Bundle,
    personas: Arc<PersonaCache>,
    captions: Arc<CaptionCache>,
    flags: AblationFlags,
    split: Option<Split>,
) -> Result<Vec<PredictionLine>, PipelineError> {
    let distiller = ctx.distiller(personas);
    let captioner = ctx.captioner(captions);
    let predictor = StancePredictor::new(ctx.backend.clone()).attach_images(ctx.images_root.clone());
    let entries = select(bundle, split);
    let lines = ctx.pool()?.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let conv = &e.conversation;
                let target = Target::from_id(conv.target_id());
                let outcome = conditioning(bundle, e, flags, &distiller, &captioner).and_then(|(caps, persona)| {
                    let cls = assemble_cls_input(conv, persona.as_ref(), &caps, &target, flags).map_err(|e| e.to_string())?;
                    predictor.predict(&cls).map_err(|e| e.to_string())
                });
                let (predicted, raw_response, error) = match outcome {
                    Ok((label, raw)) => (Prediction::Label(label), Some(raw), None),
                    Err(err) => (Prediction::Invalid, None, Some(err)),
                };
                PredictionLine {
                    conversation_id: conv.id().to_string(),
                    target_id: conv.target_id().to_string(),
                    gold: e.gold,
                    predicted,
                    raw_response,
                    error,
                    flags,
                    depth: e.depth,
                }
            })
            .collect()
    });
    Ok(lines)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SupervisionReport {
    pub records: usize,
    pub skipped_unlabeled: usize,
    pub flagged: Vec<(String, String)>,
}

/// Emits training records for every labeled conversation (optionally one split).
pub fn run_supervision(
    ctx: &StageContext,
    bundle: &Bundle,
    personas: Arc<PersonaCache>,
    captions: Arc<CaptionCache>,
    flags: AblationFlags,
    lambda: f64,
    split: Option<Split>,
) -> Result<(Vec<SupervisionRecord>, SupervisionReport), PipelineError> {
    let distiller = ctx.distiller(personas);
    let captioner = ctx.captioner(captions);
    let entries = select(bundle, split);
    let results: Vec<Option<Result<_, String>>> = ctx.pool()?.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let gold = e.gold?;
                let conv = &e.conversation;
                let target = Target::from_id(conv.target_id());
                Some(conditioning(bundle, e, flags, &distiller, &captioner).and_then(|(caps, persona)| {
                    emit_supervision(conv, persona.as_ref(), &caps, gold, &target, flags, lambda).map_err(|e| e.to_string())
                }))
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut report = SupervisionReport::default();
    for (e, r) in entries.iter().zip(results) {
        let id = e.conversation.id().to_string();
        match r {
            None => report.skipped_unlabeled += 1,
            Some(Ok(out)) => {
                if let Some(flag) = out.flagged {
                    report.flagged.push((id, flag.to_string()));
                }
                records.extend(out.records);
            }
            Some(Err(err)) => report.flagged.push((id, err)),
        }
    }
    report.records = records.len();
    Ok((records, report))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = std::fs::File::open(path).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
