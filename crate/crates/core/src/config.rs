//! Service configuration: one TOML file plus `MEDRAG_*` environment overrides.
//!
//! Relative paths in the file resolve against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{HttpEmbedderConfig, DEFAULT_DIMENSION};
use crate::fusion::{FusionConfig, FusionError};
use crate::gateway::GatewayConfig;
use crate::ingest::{DEFAULT_MAX_TOKENS, DEFAULT_OVERLAP};
use crate::prompt::DEFAULT_CONTEXT_BUDGET;
use crate::vector_index::{HnswParams, SearchMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("environment variable {var}: {reason}")]
    Env { var: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingBackend {
    /// Remote `/embeddings` endpoint.
    #[default]
    Http,
    /// Offline feature-hashing embedder.
    Hash,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub backend: EmbeddingBackend,
    #[serde(flatten)]
    pub http: HttpEmbedderConfig,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            backend: EmbeddingBackend::Http,
            http: HttpEmbedderConfig {
                dimension: DEFAULT_DIMENSION,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub context_budget: usize,
    pub search_mode: SearchMode,
    /// Retrieve with BM25 alone when the embedding service fails.
    pub lexical_fallback: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            context_budget: DEFAULT_CONTEXT_BUDGET,
            search_mode: SearchMode::Exact,
            lexical_fallback: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub max_tokens: usize,
    pub overlap: usize,
    /// TOML file of `[[rule]]` entries; built-in rules when absent.
    pub redaction_rules: Option<PathBuf>,
    /// TSV of `term<TAB>weight` lexical boosts.
    pub term_boosts: Option<PathBuf>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            max_tokens: DEFAULT_MAX_TOKENS,
            overlap: DEFAULT_OVERLAP,
            redaction_rules: None,
            term_boosts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub bind: String,
    pub port: u16,
    /// Allowed CORS origins; `"*"` allows any.
    pub cors_origins: Vec<String>,
    /// When set, `/v1/*` requires `Authorization: Bearer <token>`.
    pub bearer_token: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1".into(),
            port: 8000,
            cors_origins: vec!["*".into()],
            bearer_token: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Index directory; `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub embedding: EmbeddingConfig,
    pub llm: GatewayConfig,
    pub fusion: FusionConfig,
    pub retrieval: RetrievalConfig,
    pub ingest: IngestConfig,
    pub hnsw: HnswParams,
    pub server: ServerConfig,
    /// Extra prompt presets, name to template.
    pub prompts: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data_dir: Some(PathBuf::from("medrag-data")),
            embedding: EmbeddingConfig::default(),
            llm: GatewayConfig::default(),
            fusion: FusionConfig::default(),
            retrieval: RetrievalConfig::default(),
            ingest: IngestConfig::default(),
            hnsw: HnswParams::default(),
            server: ServerConfig::default(),
            prompts: BTreeMap::new(),
        }
    }
}

fn parse_env<T: std::str::FromStr>(var: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e: T::Err| ConfigError::Env {
        var: var.to_string(),
        reason: e.to_string(),
    })
}

impl Config {
    pub fn from_toml(raw: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&raw)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    /// File (or defaults when `path` is `None`) with process environment
    /// overrides applied.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Config::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.data_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.ingest.redaction_rules.as_mut() {
            fix(p);
        }
        if let Some(p) = self.ingest.term_boosts.as_mut() {
            fix(p);
        }
    }

    /// Applies `MEDRAG_*` overrides read through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let get = |k: &str| lookup(k).filter(|v| !v.is_empty());
        if let Some(v) = get("MEDRAG_DATA_DIR") {
            self.data_dir = Some(PathBuf::from(v));
        }
        if let Some(v) = get("MEDRAG_EMBED_BACKEND") {
            self.embedding.backend = match v.as_str() {
                "http" => EmbeddingBackend::Http,
                "hash" => EmbeddingBackend::Hash,
                other => {
                    return Err(ConfigError::Env {
                        var: "MEDRAG_EMBED_BACKEND".into(),
                        reason: format!("expected http or hash, got {other:?}"),
                    })
                }
            };
        }
        if let Some(v) = get("MEDRAG_EMBED_URL") {
            self.embedding.http.url = v;
        }
        if let Some(v) = get("MEDRAG_EMBED_MODEL") {
            self.embedding.http.model = v;
        }
        if let Some(v) = get("MEDRAG_EMBED_DIM") {
            self.embedding.http.dimension = parse_env("MEDRAG_EMBED_DIM", &v)?;
        }
        if let Some(v) = get("MEDRAG_LLM_URL") {
            self.llm.url = v;
        }
        if let Some(v) = get("MEDRAG_LLM_MODEL") {
            self.llm.model = v;
        }
        if let Some(v) = get("MEDRAG_LLM_TIMEOUT_MS") {
            self.llm.timeout_ms = parse_env("MEDRAG_LLM_TIMEOUT_MS", &v)?;
        }
        if let Some(v) = get("MEDRAG_ALPHA") {
            self.fusion.alpha = parse_env("MEDRAG_ALPHA", &v)?;
        }
        if let Some(v) = get("MEDRAG_CONTEXT_BUDGET") {
            self.retrieval.context_budget = parse_env("MEDRAG_CONTEXT_BUDGET", &v)?;
        }
        if let Some(v) = get("MEDRAG_PORT") {
            self.server.port = parse_env("MEDRAG_PORT", &v)?;
        }
        if let Some(v) = get("MEDRAG_BEARER_TOKEN") {
            self.server.bearer_token = Some(v);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.fusion
            .validate()
            .map_err(|e: FusionError| ConfigError::Invalid(e.to_string()))?;
        if self.ingest.overlap >= self.ingest.max_tokens {
            return Err(ConfigError::Invalid(format!(
                "ingest.overlap ({}) must be below ingest.max_tokens ({})",
                self.ingest.overlap, self.ingest.max_tokens
            )));
        }
        if self.embedding.http.dimension < 2 {
            return Err(ConfigError::Invalid("embedding.dimension must be at least 2".into()));
        }
        if self.retrieval.context_budget == 0 {
            return Err(ConfigError::Invalid("retrieval.context_budget must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionOverrides;

    #[test]
    fn defaults() {
        let c = Config::default();
        assert_eq!(c.fusion.alpha, 0.6);
        assert_eq!(c.retrieval.context_budget, 3000);
        assert_eq!(c.llm.max_in_flight, 2);
        assert_eq!(c.embedding.http.max_in_flight, 4);
        assert_eq!(c.embedding.http.dimension, 1024);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn precedence_request_over_file_over_default() {
        let file = Config::from_toml("[fusion]\nalpha = 0.3\nper_doc_cap = 2\n").unwrap();
        let default = FusionConfig::default();
        assert_eq!(file.fusion.top_docs, default.top_docs);
        assert_eq!(file.fusion.alpha, 0.3);
        let req = FusionOverrides {
            alpha: Some(0.9),
            ..Default::default()
        };
        let eff = req.apply(&file.fusion);
        assert_eq!(eff.alpha, 0.9);
        assert_eq!(eff.per_doc_cap, 2);
        assert_eq!(eff.k1_broad, default.k1_broad);
    }

    #[test]
    fn env_overrides_file() {
        let mut c =
            Config::from_toml("[llm]\nurl = \"http://file\"\n[embedding]\nbackend = \"hash\"\ndimension = 64\n")
                .unwrap();
        assert_eq!(c.embedding.backend, EmbeddingBackend::Hash);
        assert_eq!(c.embedding.http.dimension, 64);
        c.apply_env(|k| match k {
            "MEDRAG_LLM_URL" => Some("http://env".into()),
            "MEDRAG_ALPHA" => Some("1.0".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.llm.url, "http://env");
        assert_eq!(c.fusion.alpha, 1.0);
        let bad = c.apply_env(|k| (k == "MEDRAG_PORT").then(|| "eighty".into()));
        assert!(matches!(bad, Err(ConfigError::Env { .. })));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_toml("[fusion]\nalpha = 2.0\n").is_err());
        assert!(Config::from_toml("[ingest]\nmax_tokens = 64\noverlap = 64\n").is_err());
        assert!(Config::from_toml("[server]\nport = \"x\"\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("medrag.toml");
        std::fs::write(&path, "data_dir = \"idx\"\n[ingest]\nterm_boosts = \"boosts.tsv\"\n").unwrap();
        let c = Config::from_file(&path).unwrap();
        assert_eq!(c.data_dir.unwrap(), dir.path().join("idx"));
        assert_eq!(c.ingest.term_boosts.unwrap(), dir.path().join("boosts.tsv"));
    }
}
