//! Request orchestration over a swappable index snapshot.
//!
//! Readers clone the current `Arc<Snapshot>` and never block on ingestion.
//! Ingestion serializes on a writer mutex, builds the next snapshot from a
//! copy, persists it and swaps it in, so in-flight queries keep seeing the
//! pre-ingest state.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::ChunkStore;
use crate::config::{Config, EmbeddingBackend};
use crate::deid::RedactionRuleSet;
use crate::embedding::{EmbedError, Embedder, HashEmbedder, HttpEmbedder, Purpose};
use crate::envelope::PersistError;
use crate::fusion::{
    hierarchical_retrieve, FusionError, FusionOverrides, RetrievalContext, RetrievalHit, RetrievalOutcome,
};
use crate::gateway::{ChatModel, CompletionRequest, CompletionResult, GatewayError, HealthStatus, LlmGateway};
use crate::ingest::{
    prepare_corpus, ChunkRecord, IngestError, IngestReport, LineFailure, PreparedBatch, SegmentOptions,
};
use crate::lexical::{LexicalError, LexicalIndex, TermBoostTable};
use crate::prompt::{
    assemble_context, render_prompt, ContextBlock, PresetRegistry, PromptBundle, PromptError, GENERAL, SUMMARIZATION,
};
use crate::text::terms;
use crate::vector_index::{FilterKeys, IndexError, MetadataFilter, VectorEntry, VectorIndex};

pub const VECTORS_FILE: &str = "vectors.idx";
pub const LEXICAL_FILE: &str = "lexical.idx";
pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const SUMMARY_KEY_TERMS: usize = 10;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{0}")]
    BadRequest(String),
    #[error("malformed ingest payload ({} bad line(s))", .0.len())]
    MalformedPayload(Vec<LineFailure>),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("embedding failed: {0}")]
    Embedding(#[from] EmbedError),
    #[error("language model failed: {0}")]
    Llm(#[from] GatewayError),
    #[error("index error: {0}")]
    Index(String),
    #[error("persistence error: {0}")]
    Persist(#[from] PersistError),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Coarse classification used to pick HTTP status codes and exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    BadRequest,
    NotFound,
    Upstream,
    Internal,
}

impl EngineError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            EngineError::BadRequest(_) | EngineError::MalformedPayload(_) => ErrorKind::BadRequest,
            EngineError::NotFound(_) => ErrorKind::NotFound,
            EngineError::Embedding(EmbedError::DimensionMismatch { .. } | EmbedError::ModelMismatch { .. }) => {
                ErrorKind::Internal
            }
            EngineError::Embedding(_) | EngineError::Llm(_) => ErrorKind::Upstream,
            EngineError::Index(_) | EngineError::Persist(_) | EngineError::Config(_) => ErrorKind::Internal,
        }
    }
}

impl From<IndexError> for EngineError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::ModelMismatch { .. } | IndexError::DimensionMismatch { .. } => {
                EngineError::Config(e.to_string())
            }
            other => EngineError::Index(other.to_string()),
        }
    }
}

impl From<LexicalError> for EngineError {
    fn from(e: LexicalError) -> Self {
        EngineError::Index(e.to_string())
    }
}

impl From<FusionError> for EngineError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::AlphaOutOfRange(_) | FusionError::InvalidConfig(_) => EngineError::BadRequest(e.to_string()),
            FusionError::Vector(v) => v.into(),
            FusionError::Lexical(l) => l.into(),
        }
    }
}

impl From<PromptError> for EngineError {
    fn from(e: PromptError) -> Self {
        EngineError::BadRequest(e.to_string())
    }
}

fn default_preset() -> String {
    GENERAL.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub query: String,
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audience: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters: Option<MetadataFilter>,
    #[serde(default)]
    pub overrides: FusionOverrides,
}

impl QueryRequest {
    pub fn new(query: impl Into<String>) -> Self {
        QueryRequest {
            query: query.into(),
            preset: default_preset(),
            audience: None,
            filters: None,
            overrides: FusionOverrides::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizeRequest {
    pub report_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audience: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters: Option<MetadataFilter>,
    #[serde(default)]
    pub overrides: FusionOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub doc_id: String,
    pub chunk_id: String,
    /// Final retrieval score rounded to 4 decimals.
    pub score: f64,
    pub created_date: NaiveDate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    pub retrieval_ms: u64,
    pub llm_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub no_context: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub answer: String,
    pub sources: Vec<Source>,
    pub k_used: usize,
    pub timings: Timings,
    pub flags: Flags,
}

/// Everything a query produced, for callers that need more than the wire response.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub response: QueryResponse,
    pub prompt: PromptBundle,
    pub hits: Vec<RetrievalHit>,
    pub completion: CompletionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineStats {
    pub documents: usize,
    pub chunks: usize,
    pub embedding_model: String,
    pub dimension: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub status: String,
    pub llm: HealthStatus,
    pub index: EngineStats,
}

#[derive(Debug, Clone)]
struct Snapshot {
    vectors: VectorIndex,
    lexical: LexicalIndex,
    chunks: ChunkStore,
}

pub struct Engine {
    config: Config,
    embedder: Arc<dyn Embedder>,
    llm: Arc<dyn ChatModel>,
    rules: RedactionRuleSet,
    presets: PresetRegistry,
    snapshot: RwLock<Arc<Snapshot>>,
    writer: tokio::sync::Mutex<()>,
    today: Option<NaiveDate>,
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn persist_atomically(path: &Path, write: impl FnOnce(&Path) -> Result<(), EngineError>) -> Result<(), EngineError> {
    let tmp = path.with_extension("tmp");
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(PersistError::from)?;
    Ok(())
}

/// Top `n` report terms by `tf * idf`, ties by term.
pub fn key_terms(text: &str, lexical: &LexicalIndex, n: usize) -> Vec<String> {
    let mut tf: HashMap<String, usize> = HashMap::new();
    for t in terms(text) {
        if t.chars().count() >= 2 && !t.chars().all(|c| c.is_ascii_digit()) {
            *tf.entry(t).or_default() += 1;
        }
    }
    let mut scored: Vec<(String, f64)> = tf
        .into_iter()
        .map(|(t, f)| {
            let s = f as f64 * lexical.idf(&t);
            (t, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.into_iter().take(n).map(|(t, _)| t).collect()
}

impl Engine {
    /// Builds an engine from explicit components. Existing indexes under
    /// `config.data_dir` are loaded.
    pub fn new(config: Config, embedder: Arc<dyn Embedder>, llm: Arc<dyn ChatModel>) -> Result<Self, EngineError> {
        config.validate().map_err(|e| EngineError::Config(e.to_string()))?;
        let rules = match &config.ingest.redaction_rules {
            Some(p) => RedactionRuleSet::from_file(p).map_err(|e| EngineError::Config(e.to_string()))?,
            None => RedactionRuleSet::default_rules(),
        };
        let boosts = match &config.ingest.term_boosts {
            Some(p) => TermBoostTable::load(p).map_err(|e| EngineError::Config(e.to_string()))?,
            None => TermBoostTable::default(),
        };
        let mut presets = PresetRegistry::new();
        for (name, template) in &config.prompts {
            presets.register(name, template)?;
        }
        let snapshot = Self::load_snapshot(&config, embedder.as_ref(), boosts)?;
        Ok(Engine {
            config,
            embedder,
            llm,
            rules,
            presets,
            snapshot: RwLock::new(Arc::new(snapshot)),
            writer: tokio::sync::Mutex::new(()),
            today: None,
        })
    }

    /// Builds the configured embedding client and inference gateway.
    pub fn from_config(config: Config) -> Result<Self, EngineError> {
        let embedder: Arc<dyn Embedder> = match config.embedding.backend {
            EmbeddingBackend::Hash => Arc::new(HashEmbedder::new(config.embedding.http.dimension)),
            EmbeddingBackend::Http => Arc::new(HttpEmbedder::new(config.embedding.http.clone())),
        };
        let llm = Arc::new(LlmGateway::new(config.llm.clone()));
        Self::new(config, embedder, llm)
    }

    /// Pins the ingestion and recency clock to a fixed date.
    pub fn with_today(mut self, today: NaiveDate) -> Self {
        self.today = Some(today);
        self
    }

    pub fn today(&self) -> NaiveDate {
        self.today.unwrap_or_else(|| chrono::Utc::now().date_naive())
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn presets(&self) -> &PresetRegistry {
        &self.presets
    }

    fn load_snapshot(
        config: &Config,
        embedder: &dyn Embedder,
        boosts: TermBoostTable,
    ) -> Result<Snapshot, EngineError> {
        let empty = || Snapshot {
            vectors: VectorIndex::with_params(embedder.dimension(), config.hnsw),
            lexical: LexicalIndex::with_boosts(boosts.clone()),
            chunks: ChunkStore::new(),
        };
        let Some(dir) = &config.data_dir else {
            return Ok(empty());
        };
        let vec_path = dir.join(VECTORS_FILE);
        if !vec_path.exists() {
            return Ok(empty());
        }
        let vectors = VectorIndex::load(&vec_path, config.hnsw)?;
        if vectors.dim() != embedder.dimension() {
            return Err(EngineError::Config(format!(
                "index at {} has dimension {}, embedder produces {}",
                vec_path.display(),
                vectors.dim(),
                embedder.dimension()
            )));
        }
        if let Some(m) = vectors.model_id() {
            if m != embedder.model_id() {
                return Err(EngineError::Config(format!(
                    "index was built with embedding model {m:?}, configured model is {:?}",
                    embedder.model_id()
                )));
            }
        }
        let lexical = LexicalIndex::load(&dir.join(LEXICAL_FILE), boosts)?;
        let chunks = ChunkStore::load(&dir.join(CHUNKS_FILE))?;
        log::info!("loaded {} chunks from {}", chunks.len(), dir.display());
        Ok(Snapshot {
            vectors,
            lexical,
            chunks,
        })
    }

    fn current(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    pub fn stats(&self) -> EngineStats {
        let snap = self.current();
        EngineStats {
            documents: snap.chunks.doc_count(),
            chunks: snap.chunks.len(),
            embedding_model: self.embedder.model_id().to_string(),
            dimension: self.embedder.dimension(),
        }
    }

    pub fn get_chunk(&self, chunk_id: &str) -> Option<ChunkRecord> {
        self.current().chunks.get(chunk_id).cloned()
    }

    pub async fn health(&self) -> HealthReport {
        let llm = self.llm.health_check().await;
        HealthReport {
            status: if llm.ok { "ok" } else { "degraded" }.into(),
            llm,
            index: self.stats(),
        }
    }

    /// Ingests a JSONL corpus. With `strict`, any bad line rejects the whole
    /// payload; otherwise bad lines are skipped and reported.
    pub async fn ingest_jsonl<R: BufRead>(&self, reader: R, strict: bool) -> Result<IngestReport, EngineError> {
        let opts = SegmentOptions {
            max_tokens: self.config.ingest.max_tokens,
            overlap: self.config.ingest.overlap,
        };
        let batch = prepare_corpus(reader, &self.rules, opts, self.today()).map_err(|e| match e {
            IngestError::Io(_) => EngineError::BadRequest(e.to_string()),
            other => EngineError::Config(other.to_string()),
        })?;
        if strict && batch.report.failures > 0 {
            return Err(EngineError::MalformedPayload(batch.report.failure_details));
        }
        self.index_batch(batch).await
    }

    /// Lenient file ingestion; only an unreadable file is an error.
    pub async fn ingest_file(&self, path: &Path) -> Result<IngestReport, EngineError> {
        let file = std::fs::File::open(path)
            .map_err(|e| EngineError::BadRequest(format!("cannot read {}: {e}", path.display())))?;
        self.ingest_jsonl(std::io::BufReader::new(file), false).await
    }

    async fn index_batch(&self, batch: PreparedBatch) -> Result<IngestReport, EngineError> {
        let PreparedBatch {
            documents,
            chunks,
            report,
        } = batch;
        if documents.is_empty() {
            return Ok(report);
        }
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        let embeddings = self.embedder.embed(&texts, Purpose::Document).await?;
        if embeddings.len() != chunks.len() {
            return Err(EngineError::Embedding(EmbedError::Protocol(format!(
                "expected {} embeddings, got {}",
                chunks.len(),
                embeddings.len()
            ))));
        }
        let entries: Vec<VectorEntry> = chunks
            .iter()
            .zip(embeddings)
            .map(|(c, e)| VectorEntry {
                chunk_id: c.chunk_id.clone(),
                vector: e,
                keys: FilterKeys::of(c),
            })
            .collect();

        let _guard = self.writer.lock().await;
        let mut next = Snapshot::clone(&self.current());
        for doc in &documents {
            for id in next.chunks.remove_doc(&doc.doc_id) {
                next.vectors.remove(&id);
                next.lexical.remove(&id);
            }
        }
        next.vectors.upsert_batch(entries)?;
        next.lexical.upsert_chunks(&chunks);
        for c in chunks {
            next.chunks.insert(c);
        }
        if let Some(dir) = &self.config.data_dir {
            self.persist(&next, dir)?;
        }
        *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(next);
        Ok(report)
    }

    fn persist(&self, snap: &Snapshot, dir: &PathBuf) -> Result<(), EngineError> {
        std::fs::create_dir_all(dir).map_err(PersistError::from)?;
        persist_atomically(&dir.join(LEXICAL_FILE), |p| Ok(snap.lexical.persist(p)?))?;
        persist_atomically(&dir.join(CHUNKS_FILE), |p| Ok(snap.chunks.persist(p)?))?;
        // Written last: its presence marks a complete index directory.
        persist_atomically(&dir.join(VECTORS_FILE), |p| Ok(snap.vectors.persist(p)?))?;
        Ok(())
    }

    fn check_filter(filter: Option<&MetadataFilter>) -> Result<(), EngineError> {
        if let Some(f) = filter {
            if let (Some(from), Some(to)) = (f.date_from, f.date_to) {
                if from > to {
                    return Err(EngineError::BadRequest(format!(
                        "date_from {from} is after date_to {to}"
                    )));
                }
            }
        }
        Ok(())
    }

    async fn retrieve(
        &self,
        snap: &Snapshot,
        query: &str,
        filter: Option<&MetadataFilter>,
        overrides: &FusionOverrides,
    ) -> Result<RetrievalOutcome, EngineError> {
        let cfg = overrides.apply(&self.config.fusion);
        cfg.validate()?;
        let embedding = match self.embedder.embed(&[query.to_string()], Purpose::Query).await {
            Ok(mut v) => v.pop(),
            Err(e) if self.config.retrieval.lexical_fallback => {
                log::warn!("embedding failed, retrieving lexically: {e}");
                None
            }
            Err(e) => return Err(e.into()),
        };
        let ctx = RetrievalContext {
            vectors: &snap.vectors,
            lexical: &snap.lexical,
            catalog: &snap.chunks,
            mode: self.config.retrieval.search_mode,
            now: self.today(),
        };
        let filter = filter.filter(|f| !f.is_empty());
        Ok(hierarchical_retrieve(&ctx, query, embedding.as_ref(), filter, &cfg)?)
    }

    async fn answer(
        &self,
        snap: &Snapshot,
        preset: &str,
        user_query: &str,
        audience: Option<&str>,
        retrieved: RetrievalOutcome,
        retrieval_ms: u64,
    ) -> Result<QueryOutcome, EngineError> {
        let candidates: Vec<ContextBlock> = retrieved
            .hits
            .iter()
            .filter_map(|h| {
                snap.chunks
                    .get(&h.chunk_id)
                    .map(|c| ContextBlock::from_hit(h, c.text.clone()))
            })
            .collect();
        let blocks = assemble_context(candidates, self.config.retrieval.context_budget)?;
        let bundle = render_prompt(&self.presets, preset, user_query, blocks, audience)?;

        let started = Instant::now();
        let req = CompletionRequest {
            max_tokens: self.config.llm.max_tokens,
            temperature: self.config.llm.temperature,
            ..CompletionRequest::new(self.llm.model_id(), bundle.rendered.clone())
        };
        let completion = self.llm.complete(&req).await?;
        let llm_ms = started.elapsed().as_millis() as u64;

        let sources = bundle
            .blocks
            .iter()
            .map(|b| Source {
                doc_id: b.source_doc_id.clone(),
                chunk_id: b.chunk_id.clone(),
                score: round4(b.final_score),
                created_date: b.created_date,
            })
            .collect();
        let response = QueryResponse {
            answer: completion.text.clone(),
            sources,
            k_used: retrieved.k,
            timings: Timings { retrieval_ms, llm_ms },
            flags: Flags {
                no_context: bundle.blocks.is_empty(),
            },
        };
        Ok(QueryOutcome {
            response,
            prompt: bundle,
            hits: retrieved.hits,
            completion,
        })
    }

    pub async fn query(&self, req: &QueryRequest) -> Result<QueryOutcome, EngineError> {
        if req.query.trim().is_empty() {
            return Err(EngineError::BadRequest("query must not be empty".into()));
        }
        self.presets.template(&req.preset)?;
        Self::check_filter(req.filters.as_ref())?;
        let snap = self.current();
        let started = Instant::now();
        let retrieved = self
            .retrieve(&snap, &req.query, req.filters.as_ref(), &req.overrides)
            .await?;
        let retrieval_ms = started.elapsed().as_millis() as u64;
        self.answer(
            &snap,
            &req.preset,
            &req.query,
            req.audience.as_deref(),
            retrieved,
            retrieval_ms,
        )
        .await
    }

    /// Summarization preset; retrieval runs on the report's top tf-idf terms.
    pub async fn summarize(&self, req: &SummarizeRequest) -> Result<QueryOutcome, EngineError> {
        if req.report_text.trim().is_empty() {
            return Err(EngineError::BadRequest("report_text must not be empty".into()));
        }
        Self::check_filter(req.filters.as_ref())?;
        let snap = self.current();
        let started = Instant::now();
        let key = key_terms(&req.report_text, &snap.lexical, SUMMARY_KEY_TERMS);
        if key.is_empty() {
            return Err(EngineError::BadRequest(
                "report_text contains no searchable terms".into(),
            ));
        }
        let retrieved = self
            .retrieve(&snap, &key.join(" "), req.filters.as_ref(), &req.overrides)
            .await?;
        let retrieval_ms = started.elapsed().as_millis() as u64;
        self.answer(
            &snap,
            SUMMARIZATION,
            &req.report_text,
            req.audience.as_deref(),
            retrieved,
            retrieval_ms,
        )
        .await
    }
}
