//! Two-stage image grounding: a context-free objective description of each
//! image, then an intent-aware caption conditioned on that description and
//! the conversation text.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{complete_batch, BackendError, ChatBackend, ChatMessage, ChatRequest, ContentPart, ImageData, Role};
use crate::conversation::{serialize_context, Conversation, ThreadError, Upto};
use crate::digest::sha256_hex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroundingError {
    #[error("image {0} cannot be resolved")]
    MissingImage(String),
    #[error("backend returned an empty {0}")]
    EmptyOutput(&'static str),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Thread(#[from] ThreadError),
    #[error("caption cache io: {0}")]
    Io(String),
}

/// Identifies one image in a conversation: the turn it belongs to and its
/// position within that turn. Renders as `post#0` or `c17#1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageKey {
    pub turn: Option<String>,
    pub index: usize,
}

impl ImageKey {
    pub fn post(index: usize) -> Self {
        Self { turn: None, index }
    }

    pub fn comment(id: &str, index: usize) -> Self {
        Self {
            turn: Some(id.to_string()),
            index,
        }
    }
}

impl fmt::Display for ImageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.turn {
            None => write!(f, "post#{}", self.index),
            Some(id) => write!(f, "{id}#{}", self.index),
        }
    }
}

impl FromStr for ImageKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (turn, idx) = s.rsplit_once('#').ok_or_else(|| format!("bad image key {s}"))?;
        let index = idx.parse().map_err(|_| format!("bad image index in {s}"))?;
        Ok(if turn == "post" {
            ImageKey::post(index)
        } else {
            ImageKey::comment(turn, index)
        })
    }
}

impl Serialize for ImageKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ImageKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveDescription {
    pub key: ImageKey,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentCaption {
    pub key: ImageKey,
    pub objective: ObjectiveDescription,
    pub intent: String,
}

/// Captions for the images of one conversation. Images whose grounding
/// failed are listed in `unavailable` and render as `caption unavailable`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    captions: BTreeMap<ImageKey, IntentCaption>,
    #[serde(default)]
    unavailable: BTreeSet<ImageKey>,
}

impl CaptionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, caption: IntentCaption) {
        self.unavailable.remove(&caption.key);
        self.captions.insert(caption.key.clone(), caption);
    }

    pub fn mark_unavailable(&mut self, key: ImageKey) {
        if !self.captions.contains_key(&key) {
            self.unavailable.insert(key);
        }
    }

    pub fn get(&self, key: &ImageKey) -> Option<&IntentCaption> {
        self.captions.get(key)
    }

    pub fn is_unavailable(&self, key: &ImageKey) -> bool {
        self.unavailable.contains(key)
    }

    /// True when every image of `conv` is either captioned or marked unavailable.
    pub fn covers(&self, conv: &Conversation) -> bool {
        conv.images()
            .iter()
            .all(|(k, _)| self.captions.contains_key(k) || self.unavailable.contains(k))
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &IntentCaption> {
        self.captions.values()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingTemplates {
    pub describe: PromptTemplate,
    pub intent: PromptTemplate,
}

impl Default for GroundingTemplates {
    fn default() -> Self {
        Self {
            describe: PromptTemplate {
                version: "desc-v1".into(),
                instruction: "Describe this image objectively and factually. State what is literally visible: \
people, objects, visible text, charts, setting. Do not guess at intent or opinion. Answer in two or three sentences."
                    .into(),
            },
            intent: PromptTemplate {
                version: "intent-v1".into(),
                instruction: "An image was attached to a social media conversation. Using the image, its objective \
description, and the conversation text, explain in one or two sentences what the author meant to communicate \
with it: its rhetorical function (support, mockery, evidence, sarcasm, ...) and the attitude it conveys."
                    .into(),
            },
        }
    }
}

impl GroundingTemplates {
    pub fn versions(&self) -> String {
        format!("{}+{}", self.describe.version, self.intent.version)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// The whole thread.
    #[default]
    Full,
    /// Turns up to and including the image's own turn.
    Prefix,
}

pub const CAPTION_MAX_TOKENS: u32 = 120;

/// Stage-1 request: the instruction and the image, nothing else.
pub fn describe_request(image: &ImageData, template: &PromptTemplate) -> ChatRequest {
    ChatRequest::new(
        format!("caption/describe/{}", &image.digest[..16.min(image.digest.len())]),
        vec![
            ChatMessage::system(template.instruction.clone()),
            ChatMessage::new(Role::User, vec![ContentPart::Image(image.clone())]),
        ],
    )
    .max_output_tokens(CAPTION_MAX_TOKENS)
}

/// Stage-2 request: instruction, image, objective description, conversation text, in that order.
pub fn intent_request(
    image: &ImageData,
    objective: &ObjectiveDescription,
    context_text: &str,
    template: &PromptTemplate,
) -> ChatRequest {
    ChatRequest::new(
        format!("caption/intent/{}", &image.digest[..16.min(image.digest.len())]),
        vec![
            ChatMessage::system(template.instruction.clone()),
            ChatMessage::new(
                Role::User,
                vec![
                    ContentPart::Image(image.clone()),
                    ContentPart::Text(format!("Objective description: {}", objective.text)),
                    ContentPart::Text(format!("Conversation:\n{context_text}")),
                ],
            ),
        ],
    )
    .max_output_tokens(CAPTION_MAX_TOKENS)
}

pub fn describe_image(
    backend: &dyn ChatBackend,
    key: ImageKey,
    image: &ImageData,
    template: &PromptTemplate,
) -> Result<ObjectiveDescription, GroundingError> {
    let resp = backend.complete(&describe_request(image, template))?;
    objective_from(key, resp.text)
}

pub fn infer_intent(
    backend: &dyn ChatBackend,
    image: &ImageData,
    objective: &ObjectiveDescription,
    context_text: &str,
    template: &PromptTemplate,
) -> Result<IntentCaption, GroundingError> {
    let resp = backend.complete(&intent_request(image, objective, context_text, template))?;
    caption_from(objective.clone(), resp.text)
}

fn objective_from(key: ImageKey, text: String) -> Result<ObjectiveDescription, GroundingError> {
    if text.trim().is_empty() {
        return Err(GroundingError::EmptyOutput("objective description"));
    }
    Ok(ObjectiveDescription { key, text })
}

fn caption_from(objective: ObjectiveDescription, intent: String) -> Result<IntentCaption, GroundingError> {
    if intent.trim().is_empty() {
        return Err(GroundingError::EmptyOutput("intent caption"));
    }
    Ok(IntentCaption {
        key: objective.key.clone(),
        objective,
        intent,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionCacheEntry {
    pub image_digest: String,
    pub context_digest: String,
    pub template_versions: String,
    pub objective: String,
    pub intent: String,
}

type CacheKey = (String, String, String);

#[derive(Default)]
pub struct CaptionCache {
    entries: RwLock<HashMap<CacheKey, CaptionCacheEntry>>,
}

impl CaptionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, GroundingError> {
        let cache = Self::new();
        if !path.exists() {
            return Ok(cache);
        }
        let file = std::fs::File::open(path).map_err(|e| GroundingError::Io(e.to_string()))?;
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| GroundingError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CaptionCacheEntry = serde_json::from_str(&line)
                .map_err(|e| GroundingError::Io(format!("{}:{}: {e}", path.display(), n + 1)))?;
            cache.insert(entry);
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<(), GroundingError> {
        let map = self.entries.read().unwrap();
        let mut keys: Vec<&CacheKey> = map.keys().collect();
        keys.sort();
        let mut out = Vec::new();
        for k in keys {
            serde_json::to_writer(&mut out, &map[k]).map_err(|e| GroundingError::Io(e.to_string()))?;
            out.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| GroundingError::Io(e.to_string()))
    }

    pub fn get(&self, image_digest: &str, context_digest: &str, versions: &str) -> Option<CaptionCacheEntry> {
        self.entries
            .read()
            .unwrap()
            .get(&(image_digest.to_string(), context_digest.to_string(), versions.to_string()))
            .cloned()
    }

    pub fn insert(&self, entry: CaptionCacheEntry) {
        let key = (
            entry.image_digest.clone(),
            entry.context_digest.clone(),
            entry.template_versions.clone(),
        );
        self.entries.write().unwrap().insert(key, entry);
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of captioning one conversation. Failed images are listed in
/// `failures` and marked unavailable in `captions`.
#[derive(Debug, Clone)]
pub struct CaptionOutcome {
    pub captions: CaptionSet,
    pub failures: Vec<(ImageKey, GroundingError)>,
}

pub struct Captioner {
    backend: Arc<dyn ChatBackend>,
    cache: Arc<CaptionCache>,
    templates: GroundingTemplates,
    image_root: PathBuf,
    context_mode: ContextMode,
    max_parallel: usize,
}

struct Pending {
    key: ImageKey,
    image: ImageData,
    context: String,
    context_digest: String,
}

impl Captioner {
    pub fn new(backend: Arc<dyn ChatBackend>, cache: Arc<CaptionCache>, image_root: impl Into<PathBuf>) -> Self {
        let max_parallel = backend.max_parallel();
        Self {
            backend,
            cache,
            templates: GroundingTemplates::default(),
            image_root: image_root.into(),
            context_mode: ContextMode::Full,
            max_parallel,
        }
    }

    pub fn templates(mut self, templates: GroundingTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn context_mode(mut self, mode: ContextMode) -> Self {
        self.context_mode = mode;
        self
    }

    pub fn max_parallel(mut self, n: usize) -> Self {
        self.max_parallel = n.max(1);
        self
    }

    pub fn cache(&self) -> &Arc<CaptionCache> {
        &self.cache
    }

    fn context_for(&self, conv: &Conversation, key: &ImageKey) -> Result<String, ThreadError> {
        let upto = match (self.context_mode, &key.turn) {
            (ContextMode::Full, _) => Upto::All,
            (ContextMode::Prefix, Some(id)) => Upto::Through(id.clone()),
            (ContextMode::Prefix, None) => match conv.comments().first() {
                Some(first) => Upto::Before(first.id.clone()),
                None => Upto::All,
            },
        };
        serialize_context(conv, &upto, None)
    }

    /// Captions every image of `conv`, in turn order. Stage 1 runs as one
    /// batch, then stage 2 as a second batch, so each image's stage 2
    /// follows its own stage 1.
    pub fn caption_conversation(&self, conv: &Conversation) -> Result<CaptionOutcome, GroundingError> {
        let versions = self.templates.versions();
        let mut captions = CaptionSet::new();
        let mut failures = Vec::new();
        let mut pending = Vec::new();

        for (key, image_ref) in conv.images() {
            let image = match ImageData::load(&self.image_root, image_ref) {
                Ok(img) => img,
                Err(_) => {
                    failures.push((key.clone(), GroundingError::MissingImage(image_ref.uri.clone())));
                    captions.mark_unavailable(key);
                    continue;
                }
            };
            let context = self.context_for(conv, &key)?;
            let context_digest = sha256_hex(context.as_bytes());
            if let Some(hit) = self.cache.get(&image.digest, &context_digest, &versions) {
                let objective = ObjectiveDescription {
                    key: key.clone(),
                    text: hit.objective,
                };
                captions.insert(IntentCaption {
                    key,
                    objective,
                    intent: hit.intent,
                });
                continue;
            }
            pending.push(Pending {
                key,
                image,
                context,
                context_digest,
            });
        }

        let stage1: Vec<ChatRequest> = pending
            .iter()
            .map(|p| describe_request(&p.image, &self.templates.describe))
            .collect();
        let described = complete_batch(self.backend.as_ref(), &stage1, self.max_parallel);

        let mut ready = Vec::new();
        for (p, resp) in pending.into_iter().zip(described) {
            match resp
                .map_err(GroundingError::from)
                .and_then(|r| objective_from(p.key.clone(), r.text))
            {
                Ok(obj) => ready.push((p, obj)),
                Err(e) => {
                    captions.mark_unavailable(p.key.clone());
                    failures.push((p.key, e));
                }
            }
        }

        let stage2: Vec<ChatRequest> = ready
            .iter()
            .map(|(p, obj)| intent_request(&p.image, obj, &p.context, &self.templates.intent))
            .collect();
        let intents = complete_batch(self.backend.as_ref(), &stage2, self.max_parallel);

        for ((p, obj), resp) in ready.into_iter().zip(intents) {
            match resp
                .map_err(GroundingError::from)
                .and_then(|r| caption_from(obj, r.text))
            {
                Ok(caption) => {
                    self.cache.insert(CaptionCacheEntry {
                        image_digest: p.image.digest.clone(),
                        context_digest: p.context_digest.clone(),
                        template_versions: versions.clone(),
                        objective: caption.objective.text.clone(),
                        intent: caption.intent.clone(),
                    });
                    captions.insert(caption);
                }
                Err(e) => {
                    captions.mark_unavailable(p.key.clone());
                    failures.push((p.key, e));
                }
            }
        }
        failures.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(CaptionOutcome { captions, failures })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockReply, MockRule};
    use crate::conversation::{build_thread, Comment, ImageRef, Post};

    fn write_image(dir: &Path, name: &str, bytes: &[u8]) -> ImageRef {
        std::fs::write(dir.join(name), bytes).unwrap();
        ImageRef::new(name)
    }

    fn conv_with_images(dir: &Path, n: usize) -> Conversation {
        let images: Vec<ImageRef> = (0..n)
            .map(|i| write_image(dir, &format!("img{i}.png"), format!("bytes-{i}").as_bytes()))
            .collect();
        let post = Post {
            id: "p".into(),
            author: "a".into(),
            text: "look at this".into(),
            images: images.iter().take(1).cloned().collect(),
            created_at: "2024-01-01T00:00:00Z".into(),
            target: "tesla".into(),
        };
        let comment = Comment {
            id: "c1".into(),
            parent_id: "p".into(),
            author: "b".into(),
            text: "reply with picture".into(),
            images: images.iter().skip(1).cloned().collect(),
            created_at: "2024-01-01T00:01:00Z".into(),
        };
        build_thread(post, vec![comment]).unwrap()
    }

    #[test]
    fn image_key_strings() {
        for key in [ImageKey::post(0), ImageKey::comment("c#7", 2)] {
            let s = key.to_string();
            assert_eq!(s.parse::<ImageKey>().unwrap(), key);
        }
        assert!("nope".parse::<ImageKey>().is_err());
    }

    #[test]
    fn describe_request_is_context_free() {
        let img = ImageData::from_bytes("x.png", "image/png", vec![1, 2]);
        let req = describe_request(&img, &GroundingTemplates::default().describe);
        let user_texts: Vec<&str> = req.messages[1].texts().collect();
        assert!(user_texts.is_empty());
        assert_eq!(req.images().count(), 1);
    }

    #[test]
    fn scripted_by_digest() {
        let img = ImageData::from_bytes("x.png", "image/png", vec![9, 9]);
        let mock = MockBackend::new(0).rule(
            MockRule::tag("^caption/describe", MockReply::Text("A red car.".into())).with_image(img.digest.clone()),
        );
        let obj = describe_image(&mock, ImageKey::post(0), &img, &GroundingTemplates::default().describe).unwrap();
        assert_eq!(obj.text, "A red car.");
    }

    #[test]
    fn intent_request_order_and_echo() {
        let img = ImageData::from_bytes("x.png", "image/png", vec![1]);
        let obj = ObjectiveDescription {
            key: ImageKey::post(0),
            text: "OBJ-TEXT".into(),
        };
        let tmpl = GroundingTemplates::default().intent;
        let mock = MockBackend::new(0).rule(MockRule::any(MockReply::Echo));
        let cap = infer_intent(&mock, &img, &obj, "CTX", &tmpl).unwrap();
        assert!(cap.intent.contains("OBJ-TEXT"));

        let req = intent_request(&img, &obj, "CTX", &tmpl);
        assert!(matches!(req.messages[1].parts[0], ContentPart::Image(_)));
        let texts: Vec<&str> = req.messages[1].texts().collect();
        assert!(texts[0].contains("OBJ-TEXT"));
        assert!(texts[1].contains("CTX"));
        assert_ne!(
            req.content_hash(),
            intent_request(&img, &obj, "OTHER", &tmpl).content_hash()
        );
        assert!(intent_request(&img, &obj, "", &tmpl).validate().is_ok());
    }

    #[test]
    fn zero_images_zero_calls() {
        let dir = tempfile::tempdir().unwrap();
        let conv = conv_with_images(dir.path(), 0);
        let mock = Arc::new(MockBackend::new(0));
        let c = Captioner::new(mock.clone(), Arc::new(CaptionCache::new()), dir.path());
        let out = c.caption_conversation(&conv).unwrap();
        assert!(out.captions.is_empty());
        assert_eq!(mock.calls(), 0);
    }

    #[test]
    fn two_images_four_calls_then_cached() {
        let dir = tempfile::tempdir().unwrap();
        let conv = conv_with_images(dir.path(), 2);
        let mock = Arc::new(MockBackend::new(0));
        let c = Captioner::new(mock.clone(), Arc::new(CaptionCache::new()), dir.path());
        let out = c.caption_conversation(&conv).unwrap();
        assert_eq!(out.captions.len(), 2);
        assert!(out.failures.is_empty());
        assert_eq!(mock.calls(), 4);
        let again = c.caption_conversation(&conv).unwrap();
        assert_eq!(mock.calls(), 4);
        assert_eq!(again.captions, out.captions);
    }

    #[test]
    fn missing_image_degrades() {
        let dir = tempfile::tempdir().unwrap();
        let mut conv_post = conv_with_images(dir.path(), 1).post().clone();
        conv_post.images.push(ImageRef::new("absent.png"));
        let conv = build_thread(conv_post, vec![]).unwrap();
        let mock = Arc::new(MockBackend::new(0));
        let c = Captioner::new(mock.clone(), Arc::new(CaptionCache::new()), dir.path());
        let out = c.caption_conversation(&conv).unwrap();
        assert_eq!(out.captions.len(), 1);
        assert_eq!(out.failures.len(), 1);
        assert!(matches!(out.failures[0].1, GroundingError::MissingImage(_)));
        assert!(out.captions.is_unavailable(&ImageKey::post(1)));
        assert!(out.captions.covers(&conv));
        let text = serialize_context(&conv, &Upto::All, Some(&out.captions)).unwrap();
        assert!(text.contains("<img 2: caption unavailable>"));
    }

    #[test]
    fn deterministic_under_parallelism() {
        let dir = tempfile::tempdir().unwrap();
        let conv = conv_with_images(dir.path(), 3);
        let run = |p: usize| {
            let mock = Arc::new(MockBackend::new(5));
            Captioner::new(mock, Arc::new(CaptionCache::new()), dir.path())
                .max_parallel(p)
                .caption_conversation(&conv)
                .unwrap()
                .captions
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn cache_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let conv = conv_with_images(dir.path(), 2);
        let cache = Arc::new(CaptionCache::new());
        Captioner::new(Arc::new(MockBackend::new(0)), cache.clone(), dir.path())
            .caption_conversation(&conv)
            .unwrap();
        let path = dir.path().join("captions.jsonl");
        cache.save(&path).unwrap();
        let loaded = Arc::new(CaptionCache::load(&path).unwrap());
        assert_eq!(loaded.len(), 2);
        let mock = Arc::new(MockBackend::new(0));
        Captioner::new(mock.clone(), loaded, dir.path())
            .caption_conversation(&conv)
            .unwrap();
        assert_eq!(mock.calls(), 0);
    }
}
