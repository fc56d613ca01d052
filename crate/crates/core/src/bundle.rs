//! Conversation bundles: the file handed between pipeline stages.
//!
//! One JSON object per line, tagged by `type`:
//!
//! ```text
//! {"type":"meta","images_root":"img","view":"chain-only","filter":{...}}
//! {"type":"user","id":"u1","status":"active"}
//! {"type":"history","user":"u1","items":[...]}
//! {"type":"conversation","conversation":{...},"depth":2,"gold":"Favor","split":"train"}
//! ```
//!
//! The meta line comes first. Users and histories are sorted by id and
//! conversations by id, so saving is deterministic.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{Conversation, StanceLabel, User, UserHistory};
use crate::ingest::{
    collect_history, filter_records, materialize_conversations, FilterPolicy, FilterReport, ImageCatalog,
    IngestError, RawRecord, ViewMode,
};

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path} line {line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{0} has no meta line")]
    MissingMeta(PathBuf),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BundleMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images_root: Option<PathBuf>,
    #[serde(default)]
    pub view: ViewMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationEntry {
    pub conversation: Conversation,
    pub depth: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<StanceLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Meta(BundleMeta),
    User(User),
    History(UserHistory),
    Conversation(Box<ConversationEntry>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bundle {
    pub meta: BundleMeta,
    pub users: BTreeMap<String, User>,
    pub histories: BTreeMap<String, UserHistory>,
    pub conversations: Vec<ConversationEntry>,
}

impl Bundle {
    pub fn load(path: &Path) -> Result<Self, BundleError> {
        let io = |e: std::io::Error| BundleError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let file = std::fs::File::open(path).map_err(io)?;
        let mut meta = None;
        let mut bundle = Bundle::default();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| BundleError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                Line::Meta(m) => meta = Some(m),
                Line::User(u) => {
                    bundle.users.insert(u.id.clone(), u);
                }
                Line::History(h) => {
                    bundle.histories.insert(h.user.clone(), h);
                }
                Line::Conversation(c) => bundle.conversations.push(*c),
            }
        }
        bundle.meta = meta.ok_or_else(|| BundleError::MissingMeta(path.to_path_buf()))?;
        Ok(bundle)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: &Line| {
            out.push_str(&serde_json::to_string(line).expect("bundle line serializes"));
            out.push('\n');
        };
        push(&Line::Meta(self.meta.clone()));
        for u in self.users.values() {
            push(&Line::User(u.clone()));
        }
        for h in self.histories.values() {
            push(&Line::History(h.clone()));
        }
        let mut convs: Vec<&ConversationEntry> = self.conversations.iter().collect();
        convs.sort_by(|a, b| a.conversation.id().cmp(b.conversation.id()));
        for c in convs {
            push(&Line::Conversation(Box::new(c.clone())));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), BundleError> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| BundleError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn conversation(&self, id: &str) -> Option<&ConversationEntry> {
        self.conversations.iter().find(|c| c.conversation.id() == id)
    }

    /// Absolute image root: relative roots resolve against `base`
    /// (normally the bundle's directory).
    pub fn images_root(&self, base: &Path) -> PathBuf {
        match &self.meta.images_root {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => base.join(p),
            None => base.to_path_buf(),
        }
    }

    /// Users whose stance is queried, i.e. final-comment authors.
    pub fn final_authors(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out: Vec<String> = self
            .conversations
            .iter()
            .filter_map(|c| c.conversation.final_comment())
            .map(|c| c.author.clone())
            .filter(|a| seen.insert(a.clone()))
            .collect();
        out.sort();
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub policy: FilterPolicy,
    /// Targets to keep; empty keeps all.
    pub targets: Vec<String>,
    pub view: ViewMode,
    /// Where image paths resolve. Without it images are left unhashed.
    pub images_root: Option<PathBuf>,
}

/// Filters raw records and materializes the bundle: one conversation per
/// comment, plus the history of every final-comment author.
pub fn build_bundle(records: &[RawRecord], opts: &IngestOptions) -> Result<(Bundle, FilterReport), BundleError> {
    let (kept, report) = filter_records(records, &opts.policy);
    let catalog = match &opts.images_root {
        Some(root) => ImageCatalog::scan(&kept, root),
        None => ImageCatalog::unresolved(),
    };
    let mut views = Vec::new();
    if opts.targets.is_empty() {
        views = materialize_conversations(&kept, None, &catalog, opts.view)?;
    } else {
        for t in &opts.targets {
            views.extend(materialize_conversations(&kept, Some(t), &catalog, opts.view)?);
        }
    }
    let mut bundle = Bundle {
        meta: BundleMeta {
            images_root: opts.images_root.clone(),
            view: opts.view,
            filter: Some(report.clone()),
        },
        conversations: views
            .into_iter()
            .map(|v| ConversationEntry {
                conversation: v.conversation,
                depth: v.depth,
                gold: v.gold,
                split: None,
            })
            .collect(),
        ..Default::default()
    };
    for r in &kept {
        bundle.users.entry(r.author_id.clone()).or_insert_with(|| User {
            id: r.author_id.clone(),
            status: r.author_status,
        });
    }
    for user in bundle.final_authors() {
        let h = collect_history(&user, &kept, &catalog);
        bundle.histories.insert(user, h);
    }
    Ok((bundle, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversation::{RecordKind, UserStatus};

    fn rec(kind: RecordKind, id: &str, parent: Option<&str>, author: &str, minute: u32) -> RawRecord {
        RawRecord {
            kind,
            id: id.into(),
            parent_id: parent.map(Into::into),
            author_id: author.into(),
            author_status: UserStatus::Active,
            text: format!("text of {id}"),
            images: vec![],
            created_at: format!("2024-02-01T10:{minute:02}:00Z"),
            target_id: (kind == RecordKind::Post).then(|| "bmw".into()),
            thread_root: "p".into(),
            gold: None,
        }
    }

    fn corpus() -> Vec<RawRecord> {
        let mut v = vec![
            rec(RecordKind::Post, "p", None, "op", 0),
            rec(RecordKind::Comment, "c1", Some("p"), "a", 1),
            rec(RecordKind::Comment, "c2", Some("c1"), "b", 2),
            rec(RecordKind::Comment, "c3", Some("c2"), "a", 3),
        ];
        v[3].gold = Some(StanceLabel::Favor);
        v
    }

    #[test]
    fn round_trip() {
        let (bundle, report) = build_bundle(&corpus(), &IngestOptions::default()).unwrap();
        assert_eq!(report.retained, 4);
        assert_eq!(bundle.conversations.len(), 3);
        assert_eq!(bundle.final_authors(), ["a", "b"]);
        assert_eq!(bundle.histories["a"].items.len(), 2);
        assert_eq!(bundle.conversation("p:c3").unwrap().gold, Some(StanceLabel::Favor));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.jsonl");
        bundle.save(&path).unwrap();
        let back = Bundle::load(&path).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(back.to_jsonl(), bundle.to_jsonl());
    }

    #[test]
    fn target_selection() {
        let opts = IngestOptions {
            targets: vec!["tesla".into()],
            ..Default::default()
        };
        let (bundle, _) = build_bundle(&corpus(), &opts).unwrap();
        assert!(bundle.conversations.is_empty());
    }

    #[test]
    fn missing_meta_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.jsonl");
        std::fs::write(&path, "{\"type\":\"user\",\"id\":\"u\",\"status\":\"active\"}\n").unwrap();
        assert!(matches!(Bundle::load(&path), Err(BundleError::MissingMeta(_))));
    }
}
