//! Raw platform records: loading, filtering, user histories, and
//! per-comment conversation views.
//!
//! Raw records are JSON lines:
//!
//! ```text
//! {"kind":"post","id":"p1","author_id":"u1","author_status":"active","text":"...",
//!  "images":["img/p1.png"],"created_at":"2024-03-01T10:00:00Z","target_id":"tesla","thread_root":"p1"}
//! {"kind":"comment","id":"c1","parent_id":"p1","author_id":"u2","author_status":"deleted",
//!  "text":"...","images":[],"created_at":"2024-03-01T10:05:00Z","thread_root":"p1","gold":"Against"}
//! ```
//!
//! `gold` is optional and carries an existing stance annotation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{
    build_thread, build_thread_with, comment_depth, Comment, Conversation, HistoryItem, ImageRef, Post, RecordKind,
    StanceLabel, ThreadError, UserHistory, UserStatus,
};
use crate::digest::sha256_hex;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {message}")]
    UnreadablePath { path: PathBuf, message: String },
    #[error("line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },
    #[error("thread {thread}: {source}")]
    Thread { thread: String, source: ThreadError },
    #[error("thread {0} has no root post")]
    MissingRootPost(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub kind: RecordKind,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub author_id: String,
    #[serde(default)]
    pub author_status: UserStatus,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub images: Vec<String>,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<String>,
    pub thread_root: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<StanceLabel>,
}

impl RawRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.author_id.is_empty() {
            return Err(format!("{}: empty author_id", self.id));
        }
        if self.created_at.is_empty() {
            return Err(format!("{}: empty created_at", self.id));
        }
        match self.kind {
            RecordKind::Post => {
                if self.parent_id.is_some() {
                    return Err(format!("post {} has a parent_id", self.id));
                }
                if self.target_id.as_deref().is_none_or(str::is_empty) {
                    return Err(format!("post {} has no target_id", self.id));
                }
                if self.thread_root != self.id {
                    return Err(format!("post {} is not its own thread_root", self.id));
                }
            }
            RecordKind::Comment => {
                if self.parent_id.as_deref().is_none_or(str::is_empty) {
                    return Err(format!("comment {} has no parent_id", self.id));
                }
            }
        }
        Ok(())
    }
}

/// Records plus the malformed lines that were skipped (lenient mode only).
#[derive(Debug, Default)]
pub struct LoadOutcome {
    pub records: Vec<RawRecord>,
    pub errors: Vec<(usize, String)>,
}

/// Reads raw records in file order. In strict mode the first malformed line
/// is an error; otherwise malformed lines are reported in `errors`.
pub fn load_raw(path: &Path, strict: bool) -> Result<LoadOutcome, IngestError> {
    let unreadable = |e: std::io::Error| IngestError::UnreadablePath {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = std::fs::File::open(path).map_err(unreadable)?;
    let mut out = LoadOutcome::default();
    let mut seen = HashSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(unreadable)?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r))
            .and_then(|r| {
                if seen.insert(r.id.clone()) {
                    Ok(r)
                } else {
                    Err(format!("duplicate id {}", r.id))
                }
            });
        match parsed {
            Ok(r) => out.records.push(r),
            Err(reason) if strict => return Err(IngestError::SchemaViolation { line: line_no, reason }),
            Err(reason) => out.errors.push((line_no, reason)),
        }
    }
    Ok(out)
}

pub fn write_raw(path: &Path, records: &[RawRecord]) -> std::io::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("raw record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterPolicy {
    pub max_depth: u32,
    pub drop_author_statuses: BTreeSet<UserStatus>,
    /// Records with fewer characters and no images are dropped.
    pub min_text_length: usize,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            max_depth: 9,
            drop_author_statuses: [UserStatus::Deleted, UserStatus::Suspended].into_iter().collect(),
            min_text_length: 1,
        }
    }
}

/// Per-rule drop counts. Descendants removed by a cascade count toward the
/// rule that removed their ancestor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub retained: usize,
    pub dropped_author_status: usize,
    pub dropped_short_text: usize,
    pub dropped_depth: usize,
}

impl FilterReport {
    pub fn dropped(&self) -> usize {
        self.dropped_author_status + self.dropped_short_text + self.dropped_depth
    }
}

/// Depth of each comment (comments on the chain from the post, inclusive).
/// Comments whose chain does not reach a post are absent.
pub fn raw_depths(records: &[RawRecord]) -> HashMap<String, u32> {
    let by_id: HashMap<&str, &RawRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut depths: HashMap<String, u32> = HashMap::new();
    for r in records.iter().filter(|r| r.kind == RecordKind::Comment) {
        if depths.contains_key(&r.id) {
            continue;
        }
        // Walk up to a post or to an already-known depth.
        let mut chain: Vec<&str> = vec![&r.id];
        let mut base: Option<u32> = None;
        let mut cur = r;
        while chain.len() <= records.len() {
            let Some(parent_id) = cur.parent_id.as_deref() else { break };
            if let Some(&d) = depths.get(parent_id) {
                base = Some(d);
                break;
            }
            match by_id.get(parent_id) {
                Some(p) if p.kind == RecordKind::Post => {
                    base = Some(0);
                    break;
                }
                Some(p) => {
                    chain.push(&p.id);
                    cur = p;
                }
                None => break,
            }
        }
        if let Some(base) = base {
            for (k, id) in chain.iter().rev().enumerate() {
                depths.insert(id.to_string(), base + 1 + k as u32);
            }
        }
    }
    depths
}

/// Applies the filtering rules in order: author status, text length, depth.
/// A dropped record takes its descendants with it. Retained records keep
/// their input order.
pub fn filter_records(records: &[RawRecord], policy: &FilterPolicy) -> (Vec<RawRecord>, FilterReport) {
    let mut children: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(p) = &r.parent_id {
            children.entry(p.as_str()).or_default().push(i);
        }
    }
    let mut dropped = vec![false; records.len()];
    let mut report = FilterReport {
        input: records.len(),
        ..Default::default()
    };

    let cascade = |start: usize, dropped: &mut [bool]| -> usize {
        let mut n = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            if dropped[i] {
                continue;
            }
            dropped[i] = true;
            n += 1;
            queue.extend(children.get(records[i].id.as_str()).into_iter().flatten().copied());
        }
        n
    };

    for i in 0..records.len() {
        if !dropped[i] && policy.drop_author_statuses.contains(&records[i].author_status) {
            report.dropped_author_status += cascade(i, &mut dropped);
        }
    }
    for i in 0..records.len() {
        let r = &records[i];
        if !dropped[i] && r.images.is_empty() && r.text.trim().chars().count() < policy.min_text_length {
            report.dropped_short_text += cascade(i, &mut dropped);
        }
    }
    let depths = raw_depths(records);
    for i in 0..records.len() {
        if !dropped[i] && depths.get(&records[i].id).is_some_and(|&d| d > policy.max_depth) {
            report.dropped_depth += cascade(i, &mut dropped);
        }
    }
    let retained: Vec<RawRecord> = records
        .iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(r, _)| r.clone())
        .collect();
    report.retained = retained.len();
    (retained, report)
}

/// Resolves raw image paths to [`ImageRef`]s, hashing the files under `root`
/// when one is given. Files that cannot be read are marked missing.
#[derive(Debug, Clone, Default)]
pub struct ImageCatalog {
    root: Option<PathBuf>,
    refs: HashMap<String, ImageRef>,
}

impl ImageCatalog {
    /// A catalog that does not touch the filesystem.
    pub fn unresolved() -> Self {
        Self::default()
    }

    pub fn scan(records: &[RawRecord], root: &Path) -> Self {
        let mut refs = HashMap::new();
        for path in records.iter().flat_map(|r| r.images.iter()) {
            refs.entry(path.clone()).or_insert_with(|| {
                let base = ImageRef::new(path.clone());
                match std::fs::read(root.join(path)) {
                    Ok(bytes) => base.with_digest(sha256_hex(&bytes)),
                    Err(_) => ImageRef {
                        missing: true,
                        ..base
                    },
                }
            });
        }
        Self {
            root: Some(root.to_path_buf()),
            refs,
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn get(&self, path: &str) -> ImageRef {
        self.refs.get(path).cloned().unwrap_or_else(|| ImageRef::new(path))
    }

    fn refs(&self, paths: &[String]) -> Vec<ImageRef> {
        paths.iter().map(|p| self.get(p)).collect()
    }
}

/// All records authored by `user_id`, oldest first.
pub fn collect_history(user_id: &str, records: &[RawRecord], images: &ImageCatalog) -> UserHistory {
    let mut mine: Vec<&RawRecord> = records.iter().filter(|r| r.author_id == user_id).collect();
    mine.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
    UserHistory {
        user: user_id.to_string(),
        items: mine
            .into_iter()
            .map(|r| HistoryItem {
                text: r.text.clone(),
                images: images.refs(&r.images),
                created_at: r.created_at.clone(),
                kind: r.kind,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewMode {
    /// The ancestor chain from the post to the annotated comment.
    #[default]
    ChainOnly,
    /// The whole reply tree, with the annotated comment as final.
    WholeTree,
}

/// One view of a thread whose final comment is a single annotated comment.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterializedView {
    pub conversation: Conversation,
    pub depth: u32,
    pub gold: Option<StanceLabel>,
}

pub fn conversation_id(post_id: &str, comment_id: &str) -> String {
    format!("{post_id}:{comment_id}")
}

/// Emits one conversation per comment in each thread about `target_id`
/// (every target when `None`). Threads are ordered by post id and comments
/// in thread order.
pub fn materialize_conversations(
    records: &[RawRecord],
    target_id: Option<&str>,
    images: &ImageCatalog,
    mode: ViewMode,
) -> Result<Vec<MaterializedView>, IngestError> {
    let mut threads: BTreeMap<&str, Vec<&RawRecord>> = BTreeMap::new();
    for r in records {
        threads.entry(r.thread_root.as_str()).or_default().push(r);
    }
    let gold: HashMap<&str, StanceLabel> = records
        .iter()
        .filter_map(|r| r.gold.map(|g| (r.id.as_str(), g)))
        .collect();

    let mut out = Vec::new();
    for (root, members) in threads {
        let Some(post_rec) = members.iter().find(|r| r.kind == RecordKind::Post && r.id == root) else {
            // Comments without their root post are history-only material.
            continue;
        };
        let tid = post_rec.target_id.as_deref().unwrap_or_default();
        if target_id.is_some_and(|t| t != tid) {
            continue;
        }
        let post = Post {
            id: post_rec.id.clone(),
            author: post_rec.author_id.clone(),
            text: post_rec.text.clone(),
            images: images.refs(&post_rec.images),
            created_at: post_rec.created_at.clone(),
            target: tid.to_string(),
        };
        let comments: Vec<Comment> = members
            .iter()
            .filter(|r| r.kind == RecordKind::Comment)
            .map(|r| Comment {
                id: r.id.clone(),
                parent_id: r.parent_id.clone().unwrap_or_default(),
                author: r.author_id.clone(),
                text: r.text.clone(),
                images: images.refs(&r.images),
                created_at: r.created_at.clone(),
            })
            .collect();
        let thread_err = |source| IngestError::Thread {
            thread: root.to_string(),
            source,
        };
        let tree = build_thread(post.clone(), comments).map_err(thread_err)?;
        for c in tree.comments() {
            let depth = comment_depth(&tree, &c.id).map_err(thread_err)?;
            let id = conversation_id(&post.id, &c.id);
            let conversation = match mode {
                ViewMode::WholeTree => tree.with_final(&c.id).map_err(thread_err)?.with_id(id),
                ViewMode::ChainOnly => {
                    let mut chain = Vec::new();
                    let mut cur = Some(c);
                    while let Some(node) = cur {
                        chain.push(node.clone());
                        cur = tree.comment(&node.parent_id);
                    }
                    build_thread_with(id, post.clone(), chain, Some(&c.id)).map_err(thread_err)?
                }
            };
            out.push(MaterializedView {
                conversation,
                depth,
                gold: gold.get(c.id.as_str()).copied(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn post(id: &str, author: &str) -> RawRecord {
        RawRecord {
            kind: RecordKind::Post,
            id: id.into(),
            parent_id: None,
            author_id: author.into(),
            author_status: UserStatus::Active,
            text: format!("post {id}"),
            images: vec![],
            created_at: "2024-01-01T00:00:00Z".into(),
            target_id: Some("trump".into()),
            thread_root: id.into(),
            gold: None,
        }
    }

    pub(crate) fn comment(id: &str, parent: &str, root: &str, author: &str, minute: u32) -> RawRecord {
        RawRecord {
            kind: RecordKind::Comment,
            id: id.into(),
            parent_id: Some(parent.into()),
            author_id: author.into(),
            author_status: UserStatus::Active,
            text: format!("comment {id}"),
            images: vec![],
            created_at: format!("2024-01-01T00:{minute:02}:00Z"),
            target_id: None,
            thread_root: root.into(),
            gold: None,
        }
    }

    fn chain(n: usize) -> Vec<RawRecord> {
        let mut v = vec![post("p", "op")];
        for i in 1..=n {
            let parent = if i == 1 { "p".to_string() } else { format!("c{}", i - 1) };
            v.push(comment(&format!("c{i}"), &parent, "p", &format!("u{i}"), i as u32));
        }
        v
    }

    #[test]
    fn load_empty_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_raw(&empty, true).unwrap().records.is_empty());

        let mixed = dir.path().join("mixed.jsonl");
        let good = serde_json::to_string(&post("p", "u")).unwrap();
        std::fs::write(&mixed, format!("{good}\n{{\"kind\":\"post\"}}\n")).unwrap();
        match load_raw(&mixed, true) {
            Err(IngestError::SchemaViolation { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let lenient = load_raw(&mixed, false).unwrap();
        assert_eq!(lenient.records.len(), 1);
        assert_eq!(lenient.errors[0].0, 2);

        assert!(matches!(
            load_raw(&dir.path().join("nope"), true),
            Err(IngestError::UnreadablePath { .. })
        ));
    }

    #[test]
    fn kind_specific_fields_checked() {
        let mut p = post("p", "u");
        p.parent_id = Some("x".into());
        assert!(p.validate().is_err());
        let mut c = comment("c", "p", "p", "u", 1);
        c.parent_id = None;
        assert!(c.validate().is_err());
    }

    #[test]
    fn depth_filter_boundary() {
        let (kept, report) = filter_records(&chain(10), &FilterPolicy::default());
        assert_eq!(kept.len(), 10);
        assert_eq!(report.dropped_depth, 1);
        assert!(!kept.iter().any(|r| r.id == "c10"));

        let (kept, report) = filter_records(&chain(9), &FilterPolicy::default());
        assert_eq!(kept.len(), 10);
        assert_eq!(report.dropped(), 0);
    }

    #[test]
    fn deleted_author_cascades() {
        let mut recs = vec![post("p", "op"), comment("c1", "p", "p", "gone", 1)];
        recs[1].author_status = UserStatus::Deleted;
        recs.push(comment("c2", "c1", "p", "a", 2));
        recs.push(comment("c3", "c1", "p", "b", 3));
        recs.push(comment("c4", "p", "p", "c", 4));
        let (kept, report) = filter_records(&recs, &FilterPolicy::default());
        assert_eq!(report.dropped_author_status, 3);
        let ids: Vec<_> = kept.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["p", "c4"]);
        assert_eq!(report.input, report.retained + report.dropped());
    }

    #[test]
    fn empty_text_without_images_dropped() {
        let mut recs = vec![post("p", "op"), comment("c1", "p", "p", "a", 1), comment("c2", "p", "p", "b", 2)];
        recs[1].text = "  ".into();
        recs[2].text = String::new();
        recs[2].images = vec!["x.png".into()];
        let (kept, report) = filter_records(&recs, &FilterPolicy::default());
        assert_eq!(report.dropped_short_text, 1);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn history_sorted() {
        let mut recs = chain(3);
        recs[1].author_id = "me".into();
        recs[3].author_id = "me".into();
        recs[1].created_at = "2024-05-01T00:00:00Z".into();
        let h = collect_history("me", &recs, &ImageCatalog::unresolved());
        let texts: Vec<_> = h.items.iter().map(|i| i.text.as_str()).collect();
        assert_eq!(texts, ["comment c3", "comment c1"]);
        assert!(collect_history("nobody", &recs, &ImageCatalog::unresolved()).is_empty());
    }

    #[test]
    fn chain_views() {
        let views = materialize_conversations(&chain(3), None, &ImageCatalog::unresolved(), ViewMode::ChainOnly).unwrap();
        let depths: Vec<u32> = views.iter().map(|v| v.depth).collect();
        assert_eq!(depths, [1, 2, 3]);
        assert_eq!(views[2].conversation.id(), "p:c3");
        assert_eq!(views[2].conversation.final_comment_id(), Some("c3"));
    }

    #[test]
    fn branching_views_exclude_siblings() {
        let recs = vec![
            post("p", "op"),
            comment("c1", "p", "p", "a", 1),
            comment("c2", "c1", "p", "b", 2),
            comment("c3", "c1", "p", "c", 3),
        ];
        let views = materialize_conversations(&recs, Some("trump"), &ImageCatalog::unresolved(), ViewMode::ChainOnly).unwrap();
        assert_eq!(views.len(), 3);
        let v2 = &views[1].conversation;
        assert_eq!(v2.final_comment_id(), Some("c2"));
        assert!(v2.comment("c1").is_some());
        assert!(v2.comment("c3").is_none());
        let whole = materialize_conversations(&recs, None, &ImageCatalog::unresolved(), ViewMode::WholeTree).unwrap();
        assert_eq!(whole[1].conversation.comments().len(), 3);
        assert!(materialize_conversations(&recs, Some("biden"), &ImageCatalog::unresolved(), ViewMode::ChainOnly)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn catalog_marks_missing() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"abc").unwrap();
        let mut p = post("p", "u");
        p.images = vec!["a.png".into(), "b.png".into()];
        let cat = ImageCatalog::scan(&[p], dir.path());
        assert_eq!(cat.get("a.png").digest.as_deref(), Some(sha256_hex(b"abc").as_str()));
        assert!(cat.get("b.png").missing);
    }
}
