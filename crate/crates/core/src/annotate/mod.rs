//! Annotation workflow: pre-annotation, the multi-annotator label store,
//! agreement statistics, and dataset finalization.
//!
//! A store directory holds three files:
//!
//! - `bundle.jsonl`: the conversations being annotated (see [`crate::bundle`]).
//! - `events.jsonl`: append-only log, one event per line:
//!   `{"seq":3,"type":"label","item_id":"p1:c2","annotator_id":"ann1","label":"Favor","role":"regular","submitted_at":1718000000000}`
//!   or `{"seq":4,"type":"resolve","item_id":"p1:c2","annotator_id":"lead","submitted_at":1718000000500}`.
//! - `snapshot.jsonl`: compacted state. The first line is `{"type":"header","seq":N}`,
//!   where N is the last event folded in; each further line is
//!   `{"type":"item","item":{...},"labels":[...]}`.
//!
//! Opening a store reads the snapshot and replays events with a larger seq.

mod agreement;
mod server;
mod split;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{complete_batch, ChatBackend, ChatMessage, ChatRequest};
use crate::bundle::{Bundle, BundleError};
use crate::conversation::{Conversation, StanceLabel, Target};
use crate::grounding::CaptionSet;
use crate::stance::{assemble_cls_input, parse_stance, AblationFlags, StanceError};

pub use agreement::{cohen_kappa, mean_pairwise_kappa, AgreementStats, PairAgreement};
pub use server::{router, serve_until_interrupt, spawn_server, ServeOptions, ServerHandle};
pub use split::{finalize_and_split, split_threads, FinalizeReport, SplitAssignment, SplitRatio, ThreadUnit};

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("senior labels are only accepted on disputed items ({0} is {1:?})")]
    SeniorLabelOnUndisputed(String, AnnotationStatus),
    #[error("item {0} is resolved and no longer accepts labels")]
    Frozen(String),
    #[error("only senior annotators may resolve items")]
    NotSenior,
    #[error("empty annotator id")]
    EmptyAnnotator,
    #[error("label sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no labels to compare")]
    EmptyInput,
    #[error("chance agreement is 1; kappa is undefined")]
    DegenerateMarginals,
    #[error("no annotator pair shares a labeled item")]
    NoOverlap,
    #[error("store {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("store {path} line {line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationStatus {
    Pending,
    Labeled,
    Disputed,
    Resolved,
}

impl AnnotationStatus {
    pub const ALL: [AnnotationStatus; 4] = [Self::Pending, Self::Labeled, Self::Disputed, Self::Resolved];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pending => "pending",
            Self::Labeled => "labeled",
            Self::Disputed => "disputed",
            Self::Resolved => "resolved",
        }
    }

    /// Whether `self -> next` is allowed (staying put always is).
    pub fn can_become(self, next: AnnotationStatus) -> bool {
        use AnnotationStatus::*;
        self == next
            || matches!(
                (self, next),
                (Pending, Labeled) | (Labeled, Resolved) | (Labeled, Disputed) | (Disputed, Resolved)
            )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatorRole {
    #[default]
    Regular,
    Senior,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationItem {
    pub id: String,
    pub conversation_id: String,
    pub target_id: String,
    #[serde(default)]
    pub pre_annotation: Option<StanceLabel>,
    pub status: AnnotationStatus,
    #[serde(default)]
    pub final_label: Option<StanceLabel>,
    /// Whether the images are relevant to the conversation, when an
    /// annotator said so. Not used for stance resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_relevant: Option<bool>,
}

impl AnnotationItem {
    pub fn new(conv: &Conversation) -> Self {
        Self {
            id: conv.id().to_string(),
            conversation_id: conv.id().to_string(),
            target_id: conv.target_id().to_string(),
            pre_annotation: None,
            status: AnnotationStatus::Pending,
            final_label: None,
            image_relevant: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorLabel {
    pub item_id: String,
    pub annotator_id: String,
    pub label: StanceLabel,
    pub role: AnnotatorRole,
    /// Unix milliseconds.
    pub submitted_at: u64,
}

/// Strict majority among `labels`, if any.
fn majority(labels: impl Iterator<Item = StanceLabel>) -> Option<StanceLabel> {
    let mut counts = [0usize; 3];
    let mut n = 0;
    for l in labels {
        counts[l.index()] += 1;
        n += 1;
    }
    StanceLabel::ALL.into_iter().find(|l| 2 * counts[l.index()] > n)
}

/// Final label by majority vote: senior labels decide when present,
/// otherwise a strict majority of all current labels. `None` means the item
/// stays disputed.
pub fn resolve_final(labels: &[AnnotatorLabel]) -> Option<StanceLabel> {
    if labels.iter().any(|l| l.role == AnnotatorRole::Senior) {
        majority(labels.iter().filter(|l| l.role == AnnotatorRole::Senior).map(|l| l.label))
    } else {
        majority(labels.iter().map(|l| l.label))
    }
}

/// Status after a label write: a senior label resolves; with two or more
/// regular labels, unanimity resolves and a split disputes.
pub fn status_after_write(labels: &[AnnotatorLabel]) -> (AnnotationStatus, Option<StanceLabel>) {
    if labels.iter().any(|l| l.role == AnnotatorRole::Senior) {
        return match resolve_final(labels) {
            Some(l) => (AnnotationStatus::Resolved, Some(l)),
            None => (AnnotationStatus::Disputed, None),
        };
    }
    match labels {
        [] => (AnnotationStatus::Pending, None),
        [_] => (AnnotationStatus::Labeled, None),
        [first, rest @ ..] if rest.iter().all(|l| l.label == first.label) => {
            (AnnotationStatus::Resolved, Some(first.label))
        }
        _ => (AnnotationStatus::Disputed, None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Event {
    Label {
        seq: u64,
        #[serde(flatten)]
        label: AnnotatorLabel,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image_relevant: Option<bool>,
    },
    Resolve {
        seq: u64,
        item_id: String,
        annotator_id: String,
        submitted_at: u64,
    },
}

impl Event {
    fn seq(&self) -> u64 {
        match self {
            Event::Label { seq, .. } | Event::Resolve { seq, .. } => *seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum SnapshotLine {
    Header { seq: u64 },
    Item { item: AnnotationItem, labels: Vec<AnnotatorLabel> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemRecord {
    pub item: AnnotationItem,
    /// Current labels, one per annotator, in first-submission order.
    pub labels: Vec<AnnotatorLabel>,
}

#[derive(Debug, Default)]
struct State {
    seq: u64,
    items: BTreeMap<String, ItemRecord>,
}

impl State {
    fn apply(&mut self, event: &Event) -> Result<AnnotationItem, AnnotateError> {
        let out = match event {
            Event::Label {
                label, image_relevant, ..
            } => {
                if label.annotator_id.trim().is_empty() {
                    return Err(AnnotateError::EmptyAnnotator);
                }
                let rec = self
                    .items
                    .get_mut(&label.item_id)
                    .ok_or_else(|| AnnotateError::UnknownItem(label.item_id.clone()))?;
                let status = rec.item.status;
                if status == AnnotationStatus::Resolved {
                    return Err(AnnotateError::Frozen(label.item_id.clone()));
                }
                if label.role == AnnotatorRole::Senior && status != AnnotationStatus::Disputed {
                    return Err(AnnotateError::SeniorLabelOnUndisputed(label.item_id.clone(), status));
                }
                match rec.labels.iter_mut().find(|l| l.annotator_id == label.annotator_id) {
                    Some(existing) => *existing = label.clone(),
                    None => rec.labels.push(label.clone()),
                }
                if image_relevant.is_some() {
                    rec.item.image_relevant = *image_relevant;
                }
                let (status, final_label) = status_after_write(&rec.labels);
                rec.item.status = status;
                rec.item.final_label = final_label;
                rec.item.clone()
            }
            Event::Resolve { item_id, .. } => {
                let rec = self
                    .items
                    .get_mut(item_id)
                    .ok_or_else(|| AnnotateError::UnknownItem(item_id.clone()))?;
                match rec.item.status {
                    AnnotationStatus::Resolved => return Err(AnnotateError::Frozen(item_id.clone())),
                    AnnotationStatus::Disputed => {}
                    other => return Err(AnnotateError::SeniorLabelOnUndisputed(item_id.clone(), other)),
                }
                if let Some(label) = resolve_final(&rec.labels) {
                    rec.item.status = AnnotationStatus::Resolved;
                    rec.item.final_label = Some(label);
                }
                rec.item.clone()
            }
        };
        self.seq = self.seq.max(event.seq());
        Ok(out)
    }
}

fn now_millis() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or_default()
}

/// Per-page query over the store.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct ItemQuery {
    pub status: Option<AnnotationStatus>,
    pub target: Option<String>,
    /// Only items this annotator has not labeled yet.
    pub annotator: Option<String>,
    pub page: Option<usize>,
    pub per_page: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub by_status: BTreeMap<AnnotationStatus, usize>,
    pub by_target: BTreeMap<String, BTreeMap<AnnotationStatus, usize>>,
}

/// Label store. Writes are serialized and logged before they become
/// visible; reads run concurrently.
pub struct LabelStore {
    dir: Option<PathBuf>,
    bundle: Arc<Bundle>,
    state: RwLock<State>,
    log: Mutex<Option<std::fs::File>>,
}

impl std::fmt::Debug for LabelStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LabelStore").field("dir", &self.dir).finish_non_exhaustive()
    }
}

impl LabelStore {
    /// A store with no backing files, one Pending item per conversation.
    pub fn in_memory(bundle: Bundle, pre: &BTreeMap<String, StanceLabel>) -> Self {
        let items = bundle
            .conversations
            .iter()
            .map(|e| {
                let mut item = AnnotationItem::new(&e.conversation);
                item.pre_annotation = pre.get(&item.id).copied();
                (
                    item.id.clone(),
                    ItemRecord {
                        item,
                        labels: Vec::new(),
                    },
                )
            })
            .collect();
        Self {
            dir: None,
            bundle: Arc::new(bundle),
            state: RwLock::new(State { seq: 0, items }),
            log: Mutex::new(None),
        }
    }

    /// Initializes `dir` with the bundle, an empty log and a fresh snapshot.
    pub fn create(dir: &Path, bundle: Bundle, pre: &BTreeMap<String, StanceLabel>) -> Result<Self, AnnotateError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        bundle.save(&dir.join("bundle.jsonl"))?;
        std::fs::write(dir.join("events.jsonl"), "").map_err(|e| io_err(dir, e))?;
        let mut store = Self::in_memory(bundle, pre);
        store.dir = Some(dir.to_path_buf());
        store.compact()?;
        store.open_log()?;
        Ok(store)
    }

    pub fn open(dir: &Path) -> Result<Self, AnnotateError> {
        let bundle = Bundle::load(&dir.join("bundle.jsonl"))?;
        let snap_path = dir.join("snapshot.jsonl");
        let mut state = State::default();
        for (line_no, line) in read_lines(&snap_path)? {
            match parse_line::<SnapshotLine>(&snap_path, line_no, &line)? {
                SnapshotLine::Header { seq } => state.seq = seq,
                SnapshotLine::Item { item, labels } => {
                    state.items.insert(item.id.clone(), ItemRecord { item, labels });
                }
            }
        }
        let log_path = dir.join("events.jsonl");
        if log_path.exists() {
            let base = state.seq;
            for (line_no, line) in read_lines(&log_path)? {
                let event = parse_line::<Event>(&log_path, line_no, &line)?;
                if event.seq() > base {
                    // Events that failed validation were never logged, so
                    // replay errors mean the log was edited by hand.
                    state.apply(&event).map_err(|e| AnnotateError::Malformed {
                        path: log_path.clone(),
                        line: line_no,
                        message: e.to_string(),
                    })?;
                }
            }
        }
        let store = Self {
            dir: Some(dir.to_path_buf()),
            bundle: Arc::new(bundle),
            state: RwLock::new(state),
            log: Mutex::new(None),
        };
        store.open_log()?;
        Ok(store)
    }

    fn open_log(&self) -> Result<(), AnnotateError> {
        if let Some(dir) = &self.dir {
            let path = dir.join("events.jsonl");
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| io_err(&path, e))?;
            *self.log.lock().unwrap() = Some(file);
        }
        Ok(())
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn bundle(&self) -> &Arc<Bundle> {
        &self.bundle
    }

    fn commit(&self, make: impl FnOnce(u64) -> Event) -> Result<AnnotationItem, AnnotateError> {
        let mut state = self.state.write().unwrap();
        let event = make(state.seq + 1);
        // Validate against a scratch copy of the one item before logging.
        let item_id = match &event {
            Event::Label { label, .. } => label.item_id.clone(),
            Event::Resolve { item_id, .. } => item_id.clone(),
        };
        let current = state
            .items
            .get(&item_id)
            .cloned()
            .ok_or_else(|| AnnotateError::UnknownItem(item_id.clone()))?;
        let mut scratch = State {
            seq: state.seq,
            items: BTreeMap::from([(item_id.clone(), current)]),
        };
        scratch.apply(&event)?;
        if let Some(file) = self.log.lock().unwrap().as_mut() {
            let line = serde_json::to_string(&event).expect("event serializes");
            let path = self.dir.clone().unwrap_or_default();
            writeln!(file, "{line}").map_err(|e| io_err(&path, e))?;
            file.flush().map_err(|e| io_err(&path, e))?;
        }
        state.apply(&event)
    }

    /// Stores or replaces `annotator`'s label and recomputes the item status.
    pub fn submit_label(
        &self,
        item_id: &str,
        annotator: &str,
        label: StanceLabel,
        role: AnnotatorRole,
    ) -> Result<AnnotationItem, AnnotateError> {
        self.submit_label_with(item_id, annotator, label, role, None)
    }

    pub fn submit_label_with(
        &self,
        item_id: &str,
        annotator: &str,
        label: StanceLabel,
        role: AnnotatorRole,
        image_relevant: Option<bool>,
    ) -> Result<AnnotationItem, AnnotateError> {
        self.commit(|seq| Event::Label {
            seq,
            label: AnnotatorLabel {
                item_id: item_id.to_string(),
                annotator_id: annotator.to_string(),
                label,
                role,
                submitted_at: now_millis(),
            },
            image_relevant,
        })
    }

    /// Applies majority voting to a disputed item. Without a strict
    /// majority the item stays disputed.
    pub fn resolve(&self, item_id: &str, annotator: &str, role: AnnotatorRole) -> Result<AnnotationItem, AnnotateError> {
        if role != AnnotatorRole::Senior {
            return Err(AnnotateError::NotSenior);
        }
        self.commit(|seq| Event::Resolve {
            seq,
            item_id: item_id.to_string(),
            annotator_id: annotator.to_string(),
            submitted_at: now_millis(),
        })
    }

    pub fn item(&self, id: &str) -> Option<ItemRecord> {
        self.state.read().unwrap().items.get(id).cloned()
    }

    pub fn items(&self) -> Vec<ItemRecord> {
        self.state.read().unwrap().items.values().cloned().collect()
    }

    /// Matching items in id order plus the total before paging. Pages start at 1.
    pub fn query(&self, q: &ItemQuery) -> (Vec<ItemRecord>, usize) {
        let state = self.state.read().unwrap();
        let matching: Vec<&ItemRecord> = state
            .items
            .values()
            .filter(|r| q.status.is_none_or(|s| r.item.status == s))
            .filter(|r| q.target.as_deref().is_none_or(|t| r.item.target_id == t))
            .filter(|r| {
                q.annotator
                    .as_deref()
                    .is_none_or(|a| !r.labels.iter().any(|l| l.annotator_id == a))
            })
            .collect();
        let per_page = q.per_page.unwrap_or(50).clamp(1, 500);
        let page = q.page.unwrap_or(1).max(1);
        let total = matching.len();
        let out = matching
            .into_iter()
            .skip((page - 1) * per_page)
            .take(per_page)
            .cloned()
            .collect();
        (out, total)
    }

    pub fn progress(&self) -> Progress {
        let state = self.state.read().unwrap();
        let zero = || AnnotationStatus::ALL.into_iter().map(|s| (s, 0)).collect::<BTreeMap<_, _>>();
        let mut p = Progress {
            total: state.items.len(),
            by_status: zero(),
            by_target: BTreeMap::new(),
        };
        for r in state.items.values() {
            *p.by_status.get_mut(&r.item.status).unwrap() += 1;
            *p.by_target
                .entry(r.item.target_id.clone())
                .or_insert_with(zero)
                .get_mut(&r.item.status)
                .unwrap() += 1;
        }
        p
    }

    /// Current regular labels as (item, annotator, label) triples.
    pub fn regular_labels(&self) -> Vec<(String, String, StanceLabel)> {
        let state = self.state.read().unwrap();
        state
            .items
            .values()
            .flat_map(|r| r.labels.iter())
            .filter(|l| l.role == AnnotatorRole::Regular)
            .map(|l| (l.item_id.clone(), l.annotator_id.clone(), l.label))
            .collect()
    }

    pub fn agreement(&self) -> Result<AgreementStats, AnnotateError> {
        mean_pairwise_kappa(&self.regular_labels())
    }

    /// Writes the compacted snapshot. A no-op for in-memory stores.
    pub fn compact(&self) -> Result<(), AnnotateError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let state = self.state.read().unwrap();
        let mut out = serde_json::to_string(&SnapshotLine::Header { seq: state.seq }).unwrap();
        out.push('\n');
        for r in state.items.values() {
            let line = SnapshotLine::Item {
                item: r.item.clone(),
                labels: r.labels.clone(),
            };
            out.push_str(&serde_json::to_string(&line).unwrap());
            out.push('\n');
        }
        let tmp = dir.join("snapshot.jsonl.tmp");
        std::fs::write(&tmp, out).map_err(|e| io_err(&tmp, e))?;
        std::fs::rename(&tmp, dir.join("snapshot.jsonl")).map_err(|e| io_err(dir, e))
    }

    /// Consistent copy of all items. Writers wait until it is taken, so no
    /// label lands halfway through.
    pub fn exclusive_snapshot(&self) -> Vec<ItemRecord> {
        let state = self.state.read().unwrap();
        state.items.values().cloned().collect()
    }
}

fn io_err(path: &Path, e: std::io::Error) -> AnnotateError {
    AnnotateError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, AnnotateError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_line<T: serde::de::DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T, AnnotateError> {
    serde_json::from_str(text).map_err(|e| AnnotateError::Malformed {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    })
}

/// Plain stance request: no persona and no image captions.
pub fn preannotate_request(conv: &Conversation) -> Result<ChatRequest, StanceError> {
    let flags = AblationFlags {
        use_persona: false,
        use_intent: false,
        use_mutual: false,
    };
    let target = Target::from_id(conv.target_id());
    let bundle = assemble_cls_input(conv, None, &CaptionSet::new(), &target, flags)?;
    Ok(ChatRequest::new(format!("preannotate/{}", conv.id()), vec![ChatMessage::user(bundle.prompt)]).max_output_tokens(16))
}

/// Model suggestion for one conversation.
pub fn preannotate(conv: &Conversation, backend: &dyn ChatBackend) -> Result<StanceLabel, StanceError> {
    let response = backend.complete(&preannotate_request(conv)?)?;
    parse_stance(&response.text)
}

/// Suggestions for many conversations, keyed by conversation id. Items whose
/// request or parse fails are absent.
pub fn preannotate_batch(
    convs: &[&Conversation],
    backend: &dyn ChatBackend,
    max_parallel: usize,
) -> BTreeMap<String, StanceLabel> {
    let mut ids = Vec::new();
    let mut requests = Vec::new();
    for c in convs {
        if let Ok(r) = preannotate_request(c) {
            ids.push(c.id().to_string());
            requests.push(r);
        }
    }
    complete_batch(backend, &requests, max_parallel)
        .into_iter()
        .zip(ids)
        .filter_map(|(res, id)| Some((id, parse_stance(&res.ok()?.text).ok()?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockReply, MockRule};
    use crate::bundle::ConversationEntry;
    use crate::conversation::{build_thread, Comment, Post};
    use proptest::prelude::*;
    use StanceLabel::{Against as A, Favor as F, None as N};

    pub(crate) fn small_bundle(n: usize) -> Bundle {
        let mut b = Bundle::default();
        for i in 0..n {
            let post = Post {
                id: format!("p{i}"),
                author: "op".into(),
                text: "post".into(),
                images: vec![],
                created_at: "2024-01-01T00:00:00Z".into(),
                target: if i % 2 == 0 { "trump" } else { "biden" }.into(),
            };
            let c = Comment {
                id: "c1".into(),
                parent_id: post.id.clone(),
                author: "u".into(),
                text: "reply".into(),
                images: vec![],
                created_at: "2024-01-01T00:01:00Z".into(),
            };
            let conv = build_thread(post, vec![c]).unwrap();
            let id = format!("p{i}:c1");
            b.conversations.push(ConversationEntry {
                conversation: conv.with_id(id),
                depth: 1,
                gold: None,
                split: None,
            });
        }
        b
    }

    fn lbl(annotator: &str, label: StanceLabel, role: AnnotatorRole) -> AnnotatorLabel {
        AnnotatorLabel {
            item_id: "x".into(),
            annotator_id: annotator.into(),
            label,
            role,
            submitted_at: 0,
        }
    }

    #[test]
    fn majority_rules() {
        use AnnotatorRole::*;
        assert_eq!(resolve_final(&[lbl("a", F, Regular), lbl("b", F, Regular), lbl("c", A, Regular)]), Some(F));
        assert_eq!(resolve_final(&[lbl("a", F, Regular), lbl("b", A, Regular), lbl("c", N, Regular)]), None);
        assert_eq!(resolve_final(&[lbl("a", F, Regular), lbl("b", A, Regular), lbl("s", N, Senior)]), Some(N));
        assert_eq!(resolve_final(&[lbl("a", F, Regular), lbl("b", A, Regular)]), None);
    }

    #[test]
    fn label_flow() {
        let store = LabelStore::in_memory(small_bundle(2), &BTreeMap::new());
        let id = "p0:c1";
        let item = store.submit_label(id, "a1", F, AnnotatorRole::Regular).unwrap();
        assert_eq!(item.status, AnnotationStatus::Labeled);
        assert!(matches!(
            store.submit_label(id, "s", A, AnnotatorRole::Senior),
            Err(AnnotateError::SeniorLabelOnUndisputed(..))
        ));
        let item = store.submit_label(id, "a2", A, AnnotatorRole::Regular).unwrap();
        assert_eq!(item.status, AnnotationStatus::Disputed);
        let item = store.submit_label(id, "s", A, AnnotatorRole::Senior).unwrap();
        assert_eq!((item.status, item.final_label), (AnnotationStatus::Resolved, Some(A)));
        assert!(matches!(store.submit_label(id, "a3", F, AnnotatorRole::Regular), Err(AnnotateError::Frozen(_))));

        let other = "p1:c1";
        store.submit_label(other, "a1", F, AnnotatorRole::Regular).unwrap();
        let item = store.submit_label(other, "a2", F, AnnotatorRole::Regular).unwrap();
        assert_eq!((item.status, item.final_label), (AnnotationStatus::Resolved, Some(F)));
        assert!(matches!(store.submit_label("nope", "a", F, AnnotatorRole::Regular), Err(AnnotateError::UnknownItem(_))));
    }

    #[test]
    fn revision_and_majority_resolve() {
        let store = LabelStore::in_memory(small_bundle(1), &BTreeMap::new());
        let id = "p0:c1";
        store.submit_label(id, "a1", F, AnnotatorRole::Regular).unwrap();
        store.submit_label(id, "a1", A, AnnotatorRole::Regular).unwrap();
        assert_eq!(store.item(id).unwrap().labels.len(), 1);
        store.submit_label(id, "a2", F, AnnotatorRole::Regular).unwrap();
        store.submit_label(id, "a3", F, AnnotatorRole::Regular).unwrap();
        assert_eq!(store.item(id).unwrap().item.status, AnnotationStatus::Disputed);
        assert!(matches!(store.resolve(id, "a1", AnnotatorRole::Regular), Err(AnnotateError::NotSenior)));
        let item = store.resolve(id, "lead", AnnotatorRole::Senior).unwrap();
        assert_eq!((item.status, item.final_label), (AnnotationStatus::Resolved, Some(F)));
    }

    #[test]
    fn persisted_store_replays() {
        let dir = tempfile::tempdir().unwrap();
        let pre = BTreeMap::from([("p0:c1".to_string(), N)]);
        let store = LabelStore::create(dir.path(), small_bundle(3), &pre).unwrap();
        store.submit_label("p0:c1", "a1", F, AnnotatorRole::Regular).unwrap();
        store.submit_label("p0:c1", "a2", A, AnnotatorRole::Regular).unwrap();
        store.submit_label("p1:c1", "a1", N, AnnotatorRole::Regular).unwrap();
        let expected = store.items();
        drop(store);

        let reopened = LabelStore::open(dir.path()).unwrap();
        assert_eq!(reopened.items(), expected);
        assert_eq!(reopened.item("p0:c1").unwrap().item.pre_annotation, Some(N));
        reopened.compact().unwrap();
        reopened.submit_label("p2:c1", "a1", N, AnnotatorRole::Regular).unwrap();
        let expected = reopened.items();
        drop(reopened);
        assert_eq!(LabelStore::open(dir.path()).unwrap().items(), expected);
    }

    #[test]
    fn concurrent_writes_all_persist() {
        let dir = tempfile::tempdir().unwrap();
        let store = LabelStore::create(dir.path(), small_bundle(6), &BTreeMap::new()).unwrap();
        std::thread::scope(|s| {
            for i in 0..6 {
                for k in 0..2 {
                    let store = &store;
                    s.spawn(move || {
                        let label = if i % 2 == 0 { F } else { StanceLabel::ALL[k] };
                        store.submit_label(&format!("p{i}:c1"), &format!("a{k}"), label, AnnotatorRole::Regular).unwrap()
                    });
                }
            }
        });
        let check = |store: &LabelStore| {
            for i in 0..6 {
                let r = store.item(&format!("p{i}:c1")).unwrap();
                assert_eq!(r.labels.len(), 2);
                let expected = if i % 2 == 0 { AnnotationStatus::Resolved } else { AnnotationStatus::Disputed };
                assert_eq!(r.item.status, expected);
            }
        };
        check(&store);
        drop(store);
        check(&LabelStore::open(dir.path()).unwrap());
    }

    #[test]
    fn query_and_progress() {
        let store = LabelStore::in_memory(small_bundle(4), &BTreeMap::new());
        store.submit_label("p0:c1", "a1", F, AnnotatorRole::Regular).unwrap();
        let (items, total) = store.query(&ItemQuery {
            annotator: Some("a1".into()),
            ..Default::default()
        });
        assert_eq!(total, 3);
        assert!(items.iter().all(|r| r.item.id != "p0:c1"));
        let (_, total) = store.query(&ItemQuery {
            target: Some("trump".into()),
            status: Some(AnnotationStatus::Pending),
            ..Default::default()
        });
        assert_eq!(total, 1);
        let (page, _) = store.query(&ItemQuery {
            page: Some(2),
            per_page: Some(3),
            ..Default::default()
        });
        assert_eq!(page.len(), 1);
        let p = store.progress();
        assert_eq!(p.by_status[&AnnotationStatus::Labeled], 1);
        assert_eq!(p.by_target["trump"][&AnnotationStatus::Pending], 1);
    }

    #[test]
    fn preannotation() {
        let b = small_bundle(3);
        let convs: Vec<&Conversation> = b.conversations.iter().map(|e| &e.conversation).collect();
        let backend = MockBackend::new(1)
            .rule(MockRule::tag("^preannotate/p0:", MockReply::Text("None".into())))
            .rule(MockRule::tag("^preannotate/p1:", MockReply::Text("no idea".into())))
            .rule(MockRule::tag("^preannotate/p2:", MockReply::Fail("down".into())));
        let out = preannotate_batch(&convs, &backend, 2);
        assert_eq!(out, BTreeMap::from([("p0:c1".to_string(), N)]));
        let req = preannotate_request(convs[0]).unwrap();
        assert!(!req.text().contains("Persona of"));
        assert_eq!(preannotate(convs[0], &backend).unwrap(), N);
    }

    proptest! {
        #[test]
        fn status_machine_never_illegal(ops in prop::collection::vec((0usize..4, any::<bool>(), 0usize..3, any::<bool>()), 1..40)) {
            let store = LabelStore::in_memory(small_bundle(1), &BTreeMap::new());
            let id = "p0:c1";
            let mut prev = AnnotationStatus::Pending;
            for (who, senior, label, resolve) in ops {
                let role = if senior { AnnotatorRole::Senior } else { AnnotatorRole::Regular };
                let _ = if resolve {
                    store.resolve(id, &format!("a{who}"), role)
                } else {
                    store.submit_label(id, &format!("a{who}"), StanceLabel::ALL[label], role)
                };
                let now = store.item(id).unwrap().item.status;
                prop_assert!(prev.can_become(now), "{:?} -> {:?}", prev, now);
                prop_assert_eq!(now == AnnotationStatus::Resolved, store.item(id).unwrap().item.final_label.is_some());
                prev = now;
            }
        }

        #[test]
        fn resolve_final_permutation_invariant(labels in prop::collection::vec((0usize..3, any::<bool>()), 2..8), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut v: Vec<AnnotatorLabel> = labels
                .iter()
                .enumerate()
                .map(|(i, &(l, s))| lbl(&format!("a{i}"), StanceLabel::ALL[l], if s { AnnotatorRole::Senior } else { AnnotatorRole::Regular }))
                .collect();
            let before = resolve_final(&v);
            v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(resolve_final(&v), before);
        }
    }
}
