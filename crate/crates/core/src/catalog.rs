//! Chunk storage keyed by chunk id, with a per-document listing.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;

use crate::envelope::PersistError;
use crate::ingest::ChunkRecord;

/// Provenance attached to a retrieved chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkMeta {
    pub doc_id: String,
    pub seq_no: usize,
    pub created_date: NaiveDate,
}

pub trait ChunkCatalog {
    fn chunk_meta(&self, chunk_id: &str) -> Option<ChunkMeta>;
    /// Chunk ids of a document in sequence order.
    fn doc_chunks(&self, doc_id: &str) -> Vec<String>;
}

#[derive(Debug, Clone, Default)]
pub struct ChunkStore {
    chunks: HashMap<String, ChunkRecord>,
    by_doc: HashMap<String, BTreeMap<usize, String>>,
}

impl ChunkStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn get(&self, chunk_id: &str) -> Option<&ChunkRecord> {
        self.chunks.get(chunk_id)
    }

    pub fn doc_count(&self) -> usize {
        self.by_doc.len()
    }

    pub fn insert(&mut self, chunk: ChunkRecord) {
        self.by_doc
            .entry(chunk.doc_id.clone())
            .or_default()
            .insert(chunk.seq_no, chunk.chunk_id.clone());
        self.chunks.insert(chunk.chunk_id.clone(), chunk);
    }

    /// Drops every chunk of `doc_id`, returning the removed chunk ids.
    pub fn remove_doc(&mut self, doc_id: &str) -> Vec<String> {
        let ids: Vec<String> = self
            .by_doc
            .remove(doc_id)
            .map(|m| m.into_values().collect())
            .unwrap_or_default();
        for id in &ids {
            self.chunks.remove(id);
        }
        ids
    }

    /// All chunks, ordered by chunk id.
    pub fn iter_sorted(&self) -> Vec<&ChunkRecord> {
        let mut all: Vec<&ChunkRecord> = self.chunks.values().collect();
        all.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
        all
    }

    pub fn persist(&self, path: &Path) -> Result<(), PersistError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for c in self.iter_sorted() {
            serde_json::to_writer(&mut out, c).map_err(|e| PersistError::Io(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PersistError> {
        let file = std::fs::File::open(path)?;
        let mut store = ChunkStore::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let c: ChunkRecord = serde_json::from_str(&line)
                .map_err(|e| PersistError::Malformed(format!("chunk store line {}: {e}", i + 1)))?;
            store.insert(c);
        }
        Ok(store)
    }
}

impl ChunkCatalog for ChunkStore {
    fn chunk_meta(&self, chunk_id: &str) -> Option<ChunkMeta> {
        self.chunks.get(chunk_id).map(|c| ChunkMeta {
            doc_id: c.doc_id.clone(),
            seq_no: c.seq_no,
            created_date: c.metadata.created_date,
        })
    }

    fn doc_chunks(&self, doc_id: &str) -> Vec<String> {
        self.by_doc
            .get(doc_id)
            .map(|m| m.values().cloned().collect())
            .unwrap_or_default()
    }
}
