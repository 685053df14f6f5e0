//! Retrieval-augmented question answering over institution-specific clinical
//! documents.
//!
//! The crate covers the whole request path: documents are de-identified,
//! segmented into token-bounded chunks, embedded and indexed twice (a dense
//! cosine index and a BM25 inverted index). Queries run a three-stage hybrid
//! retrieval, the surviving passages are packed into a provenance-preserving
//! prompt, and the prompt is sent to a chat-completion server.

pub mod catalog;
pub mod config;
pub mod deid;
pub mod embedding;
pub mod engine;
pub mod envelope;
pub mod eval;
pub mod fusion;
pub mod gateway;
pub mod ingest;
pub mod lexical;
pub mod mock;
pub mod prompt;
pub mod text;
pub mod vector_index;

pub use catalog::{ChunkCatalog, ChunkMeta, ChunkStore};
pub use config::Config;
pub use embedding::{cosine, hash_embed, Embedder, Embedding, HashEmbedder, Purpose};
pub use engine::{Engine, EngineError};
pub use fusion::{FusionConfig, RetrievalHit};
pub use ingest::{ChunkRecord, DocType, Document, IngestReport, Metadata};
pub use lexical::LexicalIndex;
pub use prompt::{ContextBlock, PromptBundle};
pub use vector_index::{MetadataFilter, SearchMode, VectorIndex};
