//! Big Five (OCEAN) persona distillation from a user's history.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock, RwLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatMessage, ChatRequest, ContentPart, ImageData};
use crate::conversation::{RecordKind, UserHistory};
use crate::digest::FieldHasher;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Trait {
    Openness,
    Conscientiousness,
    Extraversion,
    Agreeableness,
    Neuroticism,
}

impl Trait {
    pub const ALL: [Trait; 5] = [
        Trait::Openness,
        Trait::Conscientiousness,
        Trait::Extraversion,
        Trait::Agreeableness,
        Trait::Neuroticism,
    ];

    pub fn letter(self) -> char {
        match self {
            Trait::Openness => 'O',
            Trait::Conscientiousness => 'C',
            Trait::Extraversion => 'E',
            Trait::Agreeableness => 'A',
            Trait::Neuroticism => 'N',
        }
    }

    fn from_token(token: &str) -> Option<Trait> {
        match token.to_ascii_lowercase().as_str() {
            "o" | "openness" => Some(Trait::Openness),
            "c" | "conscientiousness" => Some(Trait::Conscientiousness),
            "e" | "extraversion" | "extroversion" => Some(Trait::Extraversion),
            "a" | "agreeableness" => Some(Trait::Agreeableness),
            "n" | "neuroticism" => Some(Trait::Neuroticism),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PersonaError {
    #[error("trait {0:?} missing from persona output")]
    MissingTrait(Trait),
    #[error("trait {0:?} given more than once")]
    DuplicateTrait(Trait),
    #[error("trait {trait_:?} rating {value} outside 1..=5")]
    OutOfRange { trait_: Trait, value: i64 },
    #[error("persona output unparseable after reprompt: {0}")]
    ParseFailure(Box<PersonaError>),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("persona cache io: {0}")]
    Io(String),
}

/// Five ratings in `1..=5`. Construction validates the range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u8; 5]", into = "[u8; 5]")]
pub struct PersonaProfile {
    ratings: [u8; 5],
}

impl TryFrom<[u8; 5]> for PersonaProfile {
    type Error = PersonaError;

    fn try_from(r: [u8; 5]) -> Result<Self, Self::Error> {
        PersonaProfile::new(r[0], r[1], r[2], r[3], r[4])
    }
}

impl From<PersonaProfile> for [u8; 5] {
    fn from(p: PersonaProfile) -> Self {
        p.ratings
    }
}

impl PersonaProfile {
    pub fn new(o: u8, c: u8, e: u8, a: u8, n: u8) -> Result<Self, PersonaError> {
        let ratings = [o, c, e, a, n];
        for (t, &v) in Trait::ALL.iter().zip(&ratings) {
            if !(1..=5).contains(&v) {
                return Err(PersonaError::OutOfRange {
                    trait_: *t,
                    value: v as i64,
                });
            }
        }
        Ok(Self { ratings })
    }

    /// The mid-scale profile used when a user has no history.
    pub fn neutral() -> Self {
        Self { ratings: [3; 5] }
    }

    pub fn rating(&self, t: Trait) -> u8 {
        self.ratings[t as usize]
    }

    pub fn ratings(&self) -> [u8; 5] {
        self.ratings
    }
}

impl fmt::Display for PersonaProfile {
    /// `O:4 C:2 E:3 A:5 N:1`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Trait::ALL
            .iter()
            .map(|t| format!("{}:{}", t.letter(), self.rating(*t)))
            .collect();
        f.write_str(&parts.join(" "))
    }
}

fn trait_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"\b((?i:openness|conscientiousness|extraversion|extroversion|agreeableness|neuroticism)|[OCEAN])\s*[:=]\s*(-?\d+)",
        )
        .unwrap()
    })
}

/// Extracts the five ratings from free text. Accepts single uppercase
/// letters or full trait names (any case), `:` or `=`, in any order.
pub fn parse_persona(text: &str) -> Result<PersonaProfile, PersonaError> {
    let mut found: [Option<i64>; 5] = [None; 5];
    for cap in trait_pattern().captures_iter(text) {
        let Some(t) = Trait::from_token(&cap[1]) else { continue };
        let value: i64 = cap[2].parse().unwrap_or(i64::MAX);
        if found[t as usize].is_some() {
            return Err(PersonaError::DuplicateTrait(t));
        }
        if !(1..=5).contains(&value) {
            return Err(PersonaError::OutOfRange { trait_: t, value });
        }
        found[t as usize] = Some(value);
    }
    let mut r = [0u8; 5];
    for t in Trait::ALL {
        r[t as usize] = found[t as usize].ok_or(PersonaError::MissingTrait(t))? as u8;
    }
    PersonaProfile::new(r[0], r[1], r[2], r[3], r[4])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaPromptTemplate {
    pub version: String,
    pub instruction: String,
}

impl Default for PersonaPromptTemplate {
    fn default() -> Self {
        Self {
            version: "ocean-v1".into(),
            instruction: "You analyse the personality of a social media user from their past posts and comments \
(text, with image markers where they attached images).\n\
Rate the user on each Big Five trait with an integer from 1 (very low) to 5 (very high):\n\
- Openness (O): curiosity, imagination, appetite for new ideas and experiences.\n\
- Conscientiousness (C): organisation, carefulness, self-discipline, reliability.\n\
- Extraversion (E): sociability, assertiveness, energy drawn from interaction.\n\
- Agreeableness (A): warmth, cooperativeness, tolerance toward others.\n\
- Neuroticism (N): emotional volatility, anxiety, tendency toward negative affect.\n\
Answer with exactly one line in this format and nothing else:\n\
O:<1-5> C:<1-5> E:<1-5> A:<1-5> N:<1-5>"
                .into(),
        }
    }
}

pub const FORMAT_REMINDER: &str =
    "Your previous answer could not be parsed. Reply with exactly one line: O:<1-5> C:<1-5> E:<1-5> A:<1-5> N:<1-5>";

pub const DEFAULT_HISTORY_BUDGET: usize = 8000;

/// Renders a history for the prompt. The most recent items that fit in
/// `budget` characters are kept and printed oldest first; a leading marker
/// counts the elided older items.
pub fn render_history(history: &UserHistory, budget: usize) -> String {
    let mut kept: Vec<String> = Vec::new();
    let mut used = 0usize;
    for item in history.items.iter().rev() {
        let kind = match item.kind {
            RecordKind::Post => "post",
            RecordKind::Comment => "comment",
        };
        let date = item.created_at.get(..10).unwrap_or(&item.created_at);
        let mut line = format!(
            "[{kind} @ {date}] {}",
            item.text.split_whitespace().collect::<Vec<_>>().join(" ")
        );
        for j in 1..=item.images.len() {
            line.push_str(&format!(" <img {j}: present>"));
        }
        let cost = line.chars().count() + usize::from(!kept.is_empty());
        if used + cost > budget {
            break;
        }
        used += cost;
        kept.push(line);
    }
    let elided = history.items.len() - kept.len();
    kept.reverse();
    let body = kept.join("\n");
    if elided == 0 {
        body
    } else if body.is_empty() {
        format!("({elided} older items elided)")
    } else {
        format!("({elided} older items elided)\n{body}")
    }
}

/// Stable key over the user, the ordered history content and the template version.
pub fn persona_cache_key(user_id: &str, history: &UserHistory, template_version: &str) -> String {
    let mut h = FieldHasher::new("persona/v1");
    h.str(user_id).str(template_version);
    for item in &history.items {
        h.str(&item.created_at).str(match item.kind {
            RecordKind::Post => "post",
            RecordKind::Comment => "comment",
        });
        h.str(&item.text);
        h.str(&item.images.len().to_string());
        for img in &item.images {
            h.str(img.identity());
        }
    }
    h.finish_hex()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaCacheEntry {
    pub key: String,
    pub user_id: String,
    pub template_version: String,
    pub profile: PersonaProfile,
    /// Timestamp of the newest history item the profile was distilled from.
    pub created_at: String,
}

/// Content-addressed persona cache, optionally backed by a JSON-lines file.
#[derive(Default)]
pub struct PersonaCache {
    entries: RwLock<HashMap<String, PersonaCacheEntry>>,
}

impl PersonaCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, PersonaError> {
        let cache = Self::new();
        if !path.exists() {
            return Ok(cache);
        }
        let file = std::fs::File::open(path).map_err(|e| PersonaError::Io(e.to_string()))?;
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| PersonaError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: PersonaCacheEntry = serde_json::from_str(&line)
                .map_err(|e| PersonaError::Io(format!("{}:{}: {e}", path.display(), n + 1)))?;
            cache.insert(entry);
        }
        Ok(cache)
    }

    /// Writes all entries sorted by key.
    pub fn save(&self, path: &Path) -> Result<(), PersonaError> {
        let mut entries: Vec<PersonaCacheEntry> = self.entries.read().unwrap().values().cloned().collect();
        entries.sort_by(|a, b| a.key.cmp(&b.key));
        let mut out = Vec::new();
        for e in &entries {
            serde_json::to_writer(&mut out, e).map_err(|e| PersonaError::Io(e.to_string()))?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| PersonaError::Io(e.to_string()))?;
        f.write_all(&out).map_err(|e| PersonaError::Io(e.to_string()))
    }

    pub fn get(&self, key: &str) -> Option<PersonaCacheEntry> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn insert(&self, entry: PersonaCacheEntry) {
        self.entries.write().unwrap().insert(entry.key.clone(), entry);
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs persona distillation against a backend with caching.
pub struct PersonaDistiller {
    backend: Arc<dyn ChatBackend>,
    cache: Arc<PersonaCache>,
    template: PersonaPromptTemplate,
    budget: usize,
    max_history_images: usize,
    image_root: Option<PathBuf>,
}

impl PersonaDistiller {
    pub fn new(backend: Arc<dyn ChatBackend>, cache: Arc<PersonaCache>) -> Self {
        Self {
            backend,
            cache,
            template: PersonaPromptTemplate::default(),
            budget: DEFAULT_HISTORY_BUDGET,
            max_history_images: 0,
            image_root: None,
        }
    }

    pub fn template(mut self, template: PersonaPromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn budget(mut self, budget: usize) -> Self {
        self.budget = budget.max(1);
        self
    }

    /// Attach up to `k` of the most recent history images as image parts,
    /// read from `root`. Unreadable images are skipped.
    pub fn history_images(mut self, k: usize, root: impl Into<PathBuf>) -> Self {
        self.max_history_images = k;
        self.image_root = Some(root.into());
        self
    }

    pub fn cache(&self) -> &Arc<PersonaCache> {
        &self.cache
    }

    pub fn build_request(&self, history: &UserHistory) -> ChatRequest {
        let mut parts = vec![ContentPart::Text(format!(
            "History of the user, oldest first:\n{}",
            render_history(history, self.budget)
        ))];
        if let Some(root) = &self.image_root {
            let recent = history
                .items
                .iter()
                .rev()
                .flat_map(|item| item.images.iter())
                .filter_map(|img| ImageData::load(root, img).ok())
                .take(self.max_history_images);
            parts.extend(recent.map(ContentPart::Image));
        }
        ChatRequest::new(
            format!("persona/{}", history.user),
            vec![
                ChatMessage::system(self.template.instruction.clone()),
                ChatMessage::new(crate::backend::Role::User, parts),
            ],
        )
        .max_output_tokens(64)
    }

    /// Distills (or recalls) the profile for `history.user`. Empty histories
    /// yield the neutral profile without calling the backend.
    pub fn distill(&self, history: &UserHistory) -> Result<PersonaProfile, PersonaError> {
        if history.is_empty() {
            return Ok(PersonaProfile::neutral());
        }
        let key = persona_cache_key(&history.user, history, &self.template.version);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.profile);
        }
        let request = self.build_request(history);
        let first = self.backend.complete(&request)?;
        let profile = match parse_persona(&first.text) {
            Ok(p) => p,
            Err(_) => {
                let mut retry = request.clone();
                retry.messages.push(ChatMessage::assistant(first.text));
                retry.messages.push(ChatMessage::user(FORMAT_REMINDER));
                let second = self.backend.complete(&retry)?;
                parse_persona(&second.text).map_err(|e| PersonaError::ParseFailure(Box::new(e)))?
            }
        };
        self.cache.insert(PersonaCacheEntry {
            key,
            user_id: history.user.clone(),
            template_version: self.template.version.clone(),
            profile,
            created_at: history.items.last().map(|i| i.created_at.clone()).unwrap_or_default(),
        });
        Ok(profile)
    }
}
