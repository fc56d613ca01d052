//! Conversation domain model: targets, users, posts, comments, reply trees,
//! and the canonical text rendering of a thread used inside every prompt.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::{CaptionSet, ImageKey};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ThreadError {
    #[error("comment {comment} references missing parent {parent}")]
    MissingParent { comment: String, parent: String },
    #[error("reply graph contains a cycle through {0}")]
    CycleDetected(String),
    #[error("duplicate node id {0}")]
    DuplicateId(String),
    #[error("unknown comment {0}")]
    UnknownComment(String),
    #[error("invalid depth {0}, depth must be >= 1")]
    InvalidDepth(u32),
    #[error("post {0} has neither text nor images")]
    EmptyPost(String),
}

/// A stance target such as "Trump" or "Bitcoin".
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Target {
    pub id: String,
    pub name: String,
}

impl Target {
    pub fn new(id: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
        }
    }

    /// Resolves a target id to a display name. The six corpus targets have
    /// canonical capitalizations; anything else is displayed as-is.
    pub fn from_id(id: &str) -> Self {
        let name = match id.to_ascii_lowercase().as_str() {
            "trump" => "Trump",
            "biden" => "Biden",
            "tesla" => "Tesla",
            "bmw" => "BMW",
            "costco" => "Costco",
            "bitcoin" => "Bitcoin",
            _ => id,
        };
        Self::new(id, name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StanceLabel {
    Favor,
    Against,
    None,
}

impl StanceLabel {
    pub const ALL: [StanceLabel; 3] = [StanceLabel::Favor, StanceLabel::Against, StanceLabel::None];

    pub fn as_word(self) -> &'static str {
        match self {
            StanceLabel::Favor => "Favor",
            StanceLabel::Against => "Against",
            StanceLabel::None => "None",
        }
    }

    pub fn index(self) -> usize {
        match self {
            StanceLabel::Favor => 0,
            StanceLabel::Against => 1,
            StanceLabel::None => 2,
        }
    }
}

impl fmt::Display for StanceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_word())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UserStatus {
    #[default]
    Active,
    Deleted,
    Suspended,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub id: String,
    pub status: UserStatus,
}

/// Reference to an image file. `uri` is a path relative to the image root
/// (or absolute). `digest` is the hex SHA-256 of the bytes when known.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub uri: String,
    pub media_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub missing: bool,
}

impl ImageRef {
    pub fn new(uri: impl Into<String>) -> Self {
        let uri = uri.into();
        let media_type = media_type_for(&uri).to_string();
        Self {
            uri,
            media_type,
            digest: None,
            missing: false,
        }
    }

    pub fn with_digest(mut self, digest: impl Into<String>) -> Self {
        self.digest = Some(digest.into());
        self
    }

    /// Digest if computed, otherwise the uri. Used as a stable identity in cache keys.
    pub fn identity(&self) -> &str {
        self.digest.as_deref().unwrap_or(&self.uri)
    }
}

pub fn media_type_for(path: &str) -> &'static str {
    let ext = path.rsplit('.').next().unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        _ => "application/octet-stream",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub author: String,
    pub text: String,
    #[serde(default)]
    pub images: Vec<ImageRef>,
    pub created_at: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comment {
    pub id: String,
    pub parent_id: String,
    pub author: String,
    pub text: String,
    #[serde(default)]
    pub images: Vec<ImageRef>,
    pub created_at: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConversationParts {
    id: String,
    post: Post,
    comments: Vec<Comment>,
    #[serde(default)]
    final_comment_id: Option<String>,
}

/// A root post plus its reply tree. Comments are stored in topological order
/// (parents before children, chronological among siblings); `final_comment_id`
/// names the comment whose stance is queried and is `None` only when the
/// conversation has no comments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConversationParts", into = "ConversationParts")]
pub struct Conversation {
    id: String,
    post: Post,
    comments: Vec<Comment>,
    final_comment_id: Option<String>,
    index: HashMap<String, usize>,
    depths: Vec<u32>,
}

impl TryFrom<ConversationParts> for Conversation {
    type Error = ThreadError;

    fn try_from(parts: ConversationParts) -> Result<Self, Self::Error> {
        build_thread_with(parts.id, parts.post, parts.comments, parts.final_comment_id.as_deref())
    }
}

impl From<Conversation> for ConversationParts {
    fn from(conv: Conversation) -> Self {
        ConversationParts {
            id: conv.id,
            post: conv.post,
            comments: conv.comments,
            final_comment_id: conv.final_comment_id,
        }
    }
}

/// Builds a conversation whose id is the post id, with the default final
/// comment (deepest, then latest).
pub fn build_thread(post: Post, comments: Vec<Comment>) -> Result<Conversation, ThreadError> {
    let id = post.id.clone();
    build_thread_with(id, post, comments, None)
}

/// Builds a conversation, validating that the reply graph is a tree rooted at the post.
pub fn build_thread_with(
    id: String,
    post: Post,
    comments: Vec<Comment>,
    final_comment: Option<&str>,
) -> Result<Conversation, ThreadError> {
    if post.text.trim().is_empty() && post.images.is_empty() {
        return Err(ThreadError::EmptyPost(post.id));
    }
    let mut by_id: HashMap<&str, usize> = HashMap::with_capacity(comments.len());
    for (i, c) in comments.iter().enumerate() {
        if c.id == post.id || by_id.insert(c.id.as_str(), i).is_some() {
            return Err(ThreadError::DuplicateId(c.id.clone()));
        }
    }

    let mut children: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, c) in comments.iter().enumerate() {
        if c.parent_id != post.id && !by_id.contains_key(c.parent_id.as_str()) {
            return Err(ThreadError::MissingParent {
                comment: c.id.clone(),
                parent: c.parent_id.clone(),
            });
        }
        children.entry(c.parent_id.as_str()).or_default().push(i);
    }

    // Kahn's algorithm over a tree: a node becomes ready once its parent is
    // emitted. Ready nodes are released in (created_at, id) order so the
    // result is independent of input order.
    let key = |i: usize| (comments[i].created_at.clone(), comments[i].id.clone());
    let mut ready: BinaryHeap<Reverse<((String, String), usize)>> = BinaryHeap::new();
    let mut depth_of = vec![0u32; comments.len()];
    for &i in children.get(post.id.as_str()).into_iter().flatten() {
        depth_of[i] = 1;
        ready.push(Reverse((key(i), i)));
    }
    let mut order = Vec::with_capacity(comments.len());
    while let Some(Reverse((_, i))) = ready.pop() {
        order.push(i);
        for &child in children.get(comments[i].id.as_str()).into_iter().flatten() {
            depth_of[child] = depth_of[i] + 1;
            ready.push(Reverse((key(child), child)));
        }
    }
    if order.len() != comments.len() {
        let mut emitted = vec![false; comments.len()];
        for &i in &order {
            emitted[i] = true;
        }
        let stuck = (0..comments.len())
            .filter(|&i| !emitted[i])
            .map(|i| comments[i].id.clone())
            .min()
            .unwrap_or_default();
        return Err(ThreadError::CycleDetected(stuck));
    }

    let depths: Vec<u32> = order.iter().map(|&i| depth_of[i]).collect();
    let mut slots: Vec<Option<Comment>> = comments.into_iter().map(Some).collect();
    let comments: Vec<Comment> = order.iter().map(|&i| slots[i].take().unwrap()).collect();
    let index: HashMap<String, usize> = comments
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id.clone(), i))
        .collect();

    let final_comment_id = match final_comment {
        Some(fid) => {
            if !index.contains_key(fid) {
                return Err(ThreadError::UnknownComment(fid.to_string()));
            }
            Some(fid.to_string())
        }
        None => comments
            .iter()
            .zip(&depths)
            .max_by(|(a, da), (b, db)| {
                da.cmp(db)
                    .then_with(|| a.created_at.cmp(&b.created_at))
                    .then_with(|| a.id.cmp(&b.id))
            })
            .map(|(c, _)| c.id.clone()),
    };

    Ok(Conversation {
        id,
        post,
        comments,
        final_comment_id,
        index,
        depths,
    })
}

impl Conversation {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn post(&self) -> &Post {
        &self.post
    }

    pub fn comments(&self) -> &[Comment] {
        &self.comments
    }

    pub fn target_id(&self) -> &str {
        &self.post.target
    }

    pub fn final_comment_id(&self) -> Option<&str> {
        self.final_comment_id.as_deref()
    }

    pub fn final_comment(&self) -> Option<&Comment> {
        self.final_comment_id
            .as_deref()
            .and_then(|id| self.comment(id))
    }

    pub fn comment(&self, id: &str) -> Option<&Comment> {
        self.index.get(id).map(|&i| &self.comments[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Returns a copy with a different final comment.
    pub fn with_final(&self, comment_id: &str) -> Result<Conversation, ThreadError> {
        if !self.index.contains_key(comment_id) {
            return Err(ThreadError::UnknownComment(comment_id.to_string()));
        }
        let mut conv = self.clone();
        conv.final_comment_id = Some(comment_id.to_string());
        Ok(conv)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Conversation {
        self.id = id.into();
        self
    }

    /// Every image in the thread, keyed by turn and index, in turn order.
    pub fn images(&self) -> Vec<(ImageKey, &ImageRef)> {
        let mut out = Vec::new();
        for (i, img) in self.post.images.iter().enumerate() {
            out.push((ImageKey::post(i), img));
        }
        for c in &self.comments {
            for (i, img) in c.images.iter().enumerate() {
                out.push((ImageKey::comment(&c.id, i), img));
            }
        }
        out
    }

    pub fn height(&self) -> u32 {
        self.depths.iter().copied().max().unwrap_or(0)
    }

    /// Aliases (`user_1`, `user_2`, ...) in order of first appearance, post author first.
    pub fn author_aliases(&self) -> BTreeMap<String, String> {
        let mut aliases = BTreeMap::new();
        let mut next = 1;
        for author in std::iter::once(&self.post.author).chain(self.comments.iter().map(|c| &c.author)) {
            aliases.entry(author.clone()).or_insert_with(|| {
                let alias = format!("user_{next}");
                next += 1;
                alias
            });
        }
        aliases
    }

    pub fn alias_of(&self, author: &str) -> Option<String> {
        self.author_aliases().get(author).cloned()
    }
}

/// Number of comments on the chain from the root post to `comment_id`, inclusive.
pub fn comment_depth(conv: &Conversation, comment_id: &str) -> Result<u32, ThreadError> {
    conv.index
        .get(comment_id)
        .map(|&i| conv.depths[i])
        .ok_or_else(|| ThreadError::UnknownComment(comment_id.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DepthBucket {
    S,
    M,
    L,
}

impl DepthBucket {
    pub fn label(self) -> &'static str {
        match self {
            DepthBucket::S => "S (1-2 turns)",
            DepthBucket::M => "M (3-4 turns)",
            DepthBucket::L => "L (>=5 turns)",
        }
    }
}

pub fn depth_bucket(depth: u32) -> Result<DepthBucket, ThreadError> {
    match depth {
        0 => Err(ThreadError::InvalidDepth(depth)),
        1..=2 => Ok(DepthBucket::S),
        3..=4 => Ok(DepthBucket::M),
        _ => Ok(DepthBucket::L),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Post,
    Comment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub text: String,
    #[serde(default)]
    pub images: Vec<ImageRef>,
    pub created_at: String,
    pub kind: RecordKind,
}

/// A user's posts and comments in ascending `created_at` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user: String,
    pub items: Vec<HistoryItem>,
}

impl UserHistory {
    pub fn new(user: impl Into<String>, mut items: Vec<HistoryItem>) -> Self {
        items.sort_by(|a, b| a.created_at.cmp(&b.created_at));
        Self {
            user: user.into(),
            items,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// How much of the thread to render.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Upto {
    All,
    /// Render turns up to and including this comment.
    Through(String),
    /// Render turns strictly before this comment.
    Before(String),
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Canonical plain-text rendering of a conversation, one line per turn:
///
/// ```text
/// [post] user_1: text <img 1>
/// [reply depth=1] user_2: text <img 2: caption>
/// ```
///
/// Images are numbered across the whole thread. With `captions`, each marker
/// carries the intent-aware caption (or `caption unavailable`).
pub fn serialize_context(
    conv: &Conversation,
    upto: &Upto,
    captions: Option<&CaptionSet>,
) -> Result<String, ThreadError> {
    let end = match upto {
        Upto::All => conv.comments.len(),
        Upto::Through(id) => conv
            .position(id)
            .map(|p| p + 1)
            .ok_or_else(|| ThreadError::UnknownComment(id.clone()))?,
        Upto::Before(id) => conv
            .position(id)
            .ok_or_else(|| ThreadError::UnknownComment(id.clone()))?,
    };
    let aliases = conv.author_aliases();
    let mut image_no = 0usize;
    let mut out = String::new();

    let mut render_images = |out: &mut String, turn: Option<&str>, images: &[ImageRef]| {
        for i in 0..images.len() {
            image_no += 1;
            let key = match turn {
                None => ImageKey::post(i),
                Some(id) => ImageKey::comment(id, i),
            };
            match captions {
                None => out.push_str(&format!(" <img {image_no}>")),
                Some(set) => match set.get(&key) {
                    Some(c) => out.push_str(&format!(" <img {image_no}: {}>", normalize_ws(&c.intent))),
                    None => out.push_str(&format!(" <img {image_no}: caption unavailable>")),
                },
            }
        }
    };

    out.push_str(&format!(
        "[post] {}: {}",
        aliases[&conv.post.author],
        normalize_ws(&conv.post.text)
    ));
    render_images(&mut out, None, &conv.post.images);
    for (c, depth) in conv.comments[..end].iter().zip(&conv.depths) {
        out.push('\n');
        out.push_str(&format!(
            "[reply depth={depth}] {}: {}",
            aliases[&c.author],
            normalize_ws(&c.text)
        ));
        render_images(&mut out, Some(&c.id), &c.images);
    }
    Ok(out)
}
