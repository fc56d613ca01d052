//! Pipeline configuration, read from a TOML file.
//!
//! ```toml
//! seed = 42
//! lambda = 0.7
//!
//! [backend]
//! kind = "remote"
//! endpoint = "https://api.openai.com/v1"
//! model = "gpt-4o-mini"
//! auth_env = "OPENAI_API_KEY"
//! max_parallel = 8
//!
//! [persona]
//! budget = 8000
//!
//! [grounding]
//! context_mode = "prefix"
//!
//! [ablation]
//! use_persona = false
//! ```
//!
//! Every section and key is optional. Secrets never live in the file; the
//! backend reads its token from the variable named by `auth_env`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendConfig, BackendError, BackendKind};
use crate::digest::sha256_hex;
use crate::grounding::{ContextMode, GroundingTemplates};
use crate::ingest::FilterPolicy;
use crate::persona::{PersonaPromptTemplate, DEFAULT_HISTORY_BUDGET};
use crate::stance::{AblationFlags, DEFAULT_LAMBDA};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("lambda {0} outside [0, 1]")]
    Lambda(f64),
    #[error("{name} path {path} does not exist")]
    MissingPath { name: &'static str, path: PathBuf },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonaSettings {
    /// Character budget for the rendered history.
    pub budget: usize,
    /// Most recent history images attached to the request.
    pub history_images: usize,
    pub template: PersonaPromptTemplate,
}

impl Default for PersonaSettings {
    fn default() -> Self {
        Self {
            budget: DEFAULT_HISTORY_BUDGET,
            history_images: 0,
            template: PersonaPromptTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingSettings {
    pub context_mode: ContextMode,
    pub templates: GroundingTemplates,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PathSettings {
    /// Overrides the image root recorded in bundles.
    pub images_root: Option<PathBuf>,
    /// Built annotation UI served by `annotate-serve`.
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub lambda: f64,
    pub backend: BackendConfig,
    pub persona: PersonaSettings,
    pub grounding: GroundingSettings,
    pub ablation: AblationFlags,
    pub filter: FilterPolicy,
    pub paths: PathSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            lambda: DEFAULT_LAMBDA,
            backend: BackendConfig {
                seed: 42,
                ..Default::default()
            },
            persona: PersonaSettings::default(),
            grounding: GroundingSettings::default(),
            ablation: AblationFlags::default(),
            filter: FilterPolicy::default(),
            paths: PathSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Sets the pipeline seed and the mock backend seed together.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.backend.seed = seed;
    }

    pub fn set_backend(&mut self, kind: BackendKind) {
        self.backend.kind = kind;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ConfigError::Lambda(self.lambda));
        }
        self.backend.validate()?;
        for (name, p) in [("images_root", &self.paths.images_root), ("ui_dir", &self.paths.ui_dir)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(ConfigError::MissingPath { name, path: p.clone() });
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the effective configuration.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// One-line summary printed before every run.
    pub fn header(&self) -> String {
        format!(
            "prism {} config={} seed={} backend={} templates=persona:{},grounding:{} lambda={} ablation={}",
            env!("CARGO_PKG_VERSION"),
            &self.digest()[..16],
            self.seed,
            match self.backend.kind {
                BackendKind::Mock => "mock",
                BackendKind::Remote => "remote",
            },
            self.persona.template.version,
            self.grounding.templates.versions(),
            self.lambda,
            self.ablation.describe(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file() {
        let c = PipelineConfig::from_toml("lambda = 0.5\n[backend]\nmax_parallel = 2\n[ablation]\nuse_intent = false\n").unwrap();
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.backend.max_parallel, 2);
        assert_eq!(c.backend.auth_env, "OPENAI_API_KEY");
        assert!(!c.ablation.use_intent && c.ablation.use_persona);
        assert_eq!(c.filter.max_depth, 9);
        assert_eq!(c.seed, 42);
    }

    #[test]
    fn validation() {
        let mut c = PipelineConfig::default();
        c.validate().unwrap();
        c.lambda = 1.5;
        assert!(matches!(c.validate(), Err(ConfigError::Lambda(_))));
        let mut c = PipelineConfig::default();
        c.backend.kind = BackendKind::Remote;
        assert!(matches!(c.validate(), Err(ConfigError::Backend(_))));
        let mut c = PipelineConfig::default();
        c.paths.ui_dir = Some("/definitely/not/here".into());
        assert!(matches!(c.validate(), Err(ConfigError::MissingPath { .. })));
        assert!(PipelineConfig::from_toml("lambda = \"x\"").is_err());
    }

    #[test]
    fn digest_tracks_effective_config() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.set_seed(7);
        assert_ne!(a.digest(), b.digest());
        assert!(a.header().contains("seed=42"));
        assert!(a.header().contains("persona:ocean-v1"));
    }
}
