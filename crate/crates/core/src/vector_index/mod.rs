//! Filtered top-k cosine search over chunk embeddings.
//!
//! Exact mode pre-filters and scans every live entry. ANN mode walks an HNSW
//! graph and post-filters, doubling `ef` until `k` matches are found or the
//! whole graph has been considered.

mod hnsw;

use std::collections::HashMap;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, Embedding};
use crate::envelope::{self, PersistError, Reader, Writer};
use crate::ingest::{ChunkRecord, DocType};

use hnsw::Hnsw;
pub use hnsw::HnswParams;

const MAGIC: &[u8; 8] = b"MRAGVEC\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding model mismatch: index built with '{index}', got '{other}'")]
    ModelMismatch { index: String, other: String },
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Persist(#[from] PersistError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterKeys {
    pub doc_type: DocType,
    pub created_date: NaiveDate,
    pub department: Option<String>,
}

impl FilterKeys {
    pub fn of(chunk: &ChunkRecord) -> Self {
        FilterKeys {
            doc_type: chunk.metadata.doc_type,
            created_date: chunk.metadata.created_date,
            department: chunk.metadata.department.clone(),
        }
    }
}

/// Conjunctive metadata predicate. Empty fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetadataFilter {
    #[serde(
        rename = "doc_type",
        skip_serializing_if = "Vec::is_empty",
        deserialize_with = "one_or_many"
    )]
    pub doc_types: Vec<DocType>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub department: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub date_from: Option<NaiveDate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub date_to: Option<NaiveDate>,
}

fn one_or_many<'de, D: serde::Deserializer<'de>>(de: D) -> Result<Vec<DocType>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(DocType),
        Many(Vec<DocType>),
    }
    Ok(match Option::<OneOrMany>::deserialize(de)? {
        None => Vec::new(),
        Some(OneOrMany::One(d)) => vec![d],
        Some(OneOrMany::Many(v)) => v,
    })
}

impl MetadataFilter {
    pub fn is_empty(&self) -> bool {
        *self == MetadataFilter::default()
    }

    pub fn matches(&self, keys: &FilterKeys) -> bool {
        if !self.doc_types.is_empty() && !self.doc_types.contains(&keys.doc_type) {
            return false;
        }
        if let Some(want) = &self.department {
            match &keys.department {
                Some(dep) if dep.eq_ignore_ascii_case(want) => {}
                _ => return false,
            }
        }
        if self.date_from.is_some_and(|from| keys.created_date < from) {
            return false;
        }
        if self.date_to.is_some_and(|to| keys.created_date > to) {
            return false;
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorEntry {
    pub chunk_id: String,
    pub vector: Embedding,
    pub keys: FilterKeys,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub chunk_id: String,
    pub score: f64,
}

/// Sorts by score descending, ties by chunk id ascending.
pub fn sort_hits(hits: &mut [Hit]) {
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.chunk_id.cmp(&b.chunk_id)));
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    #[default]
    Exact,
    Ann,
}

#[derive(Debug, Clone)]
pub struct VectorIndex {
    dim: usize,
    model_id: Option<String>,
    ids: Vec<String>,
    keys: Vec<FilterKeys>,
    vectors: Vec<f32>,
    node_of: Vec<u32>,
    live: Vec<bool>,
    slot_of: HashMap<String, usize>,
    graph: Hnsw,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self::with_params(dim, HnswParams::default())
    }

    pub fn with_params(dim: usize, params: HnswParams) -> Self {
        VectorIndex {
            dim,
            model_id: None,
            ids: Vec::new(),
            keys: Vec::new(),
            vectors: Vec::new(),
            node_of: Vec::new(),
            live: Vec::new(),
            slot_of: HashMap::new(),
            graph: Hnsw::new(params),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model_id(&self) -> Option<&str> {
        self.model_id.as_deref()
    }

    pub fn len(&self) -> usize {
        self.slot_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slot_of.is_empty()
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.slot_of.contains_key(chunk_id)
    }

    pub fn vector(&self, chunk_id: &str) -> Option<&[f32]> {
        self.slot_of.get(chunk_id).map(|&s| self.slot_vec(s))
    }

    fn slot_vec(&self, slot: usize) -> &[f32] {
        &self.vectors[slot * self.dim..(slot + 1) * self.dim]
    }

    fn check(&self, e: &Embedding) -> Result<(), IndexError> {
        if e.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: e.dim(),
            });
        }
        match &self.model_id {
            Some(m) if *m != e.model_id => Err(IndexError::ModelMismatch {
                index: m.clone(),
                other: e.model_id.clone(),
            }),
            _ => Ok(()),
        }
    }

    /// Inserts or replaces entries. The batch is validated up front; on any
    /// error nothing is written.
    pub fn upsert_batch(&mut self, entries: Vec<VectorEntry>) -> Result<usize, IndexError> {
        for e in &entries {
            self.check(&e.vector)?;
        }
        if let Some(first) = entries.first() {
            if entries.iter().any(|e| e.vector.model_id != first.vector.model_id) {
                return Err(IndexError::ModelMismatch {
                    index: first.vector.model_id.clone(),
                    other: entries
                        .iter()
                        .find(|e| e.vector.model_id != first.vector.model_id)
                        .map(|e| e.vector.model_id.clone())
                        .unwrap_or_default(),
                });
            }
            self.model_id.get_or_insert_with(|| first.vector.model_id.clone());
        }
        let n = entries.len();
        for e in entries {
            self.upsert_one(e);
        }
        Ok(n)
    }

    fn upsert_one(&mut self, e: VectorEntry) {
        let slot = match self.slot_of.get(&e.chunk_id) {
            Some(&slot) => {
                self.vectors[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(&e.vector.values);
                self.keys[slot] = e.keys;
                self.graph.tombstone(self.node_of[slot]);
                slot
            }
            None => {
                let slot = self.ids.len();
                self.ids.push(e.chunk_id.clone());
                self.keys.push(e.keys);
                self.vectors.extend_from_slice(&e.vector.values);
                self.node_of.push(u32::MAX);
                self.live.push(true);
                self.slot_of.insert(e.chunk_id, slot);
                slot
            }
        };
        self.node_of[slot] = self.graph.insert(slot as u32, &self.vectors, self.dim);
    }

    pub fn remove(&mut self, chunk_id: &str) -> bool {
        let Some(slot) = self.slot_of.remove(chunk_id) else {
            return false;
        };
        self.live[slot] = false;
        self.graph.tombstone(self.node_of[slot]);
        true
    }

    pub fn search(
        &self,
        query: &Embedding,
        k: usize,
        filter: Option<&MetadataFilter>,
        mode: SearchMode,
    ) -> Result<Vec<Hit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        self.check(query)?;
        let pass = |slot: usize| filter.is_none_or(|f| f.matches(&self.keys[slot]));
        let mut hits = match mode {
            SearchMode::Exact => (0..self.ids.len())
                .filter(|&s| self.live[s] && pass(s))
                .map(|s| self.hit(s, &query.values))
                .collect::<Vec<_>>(),
            SearchMode::Ann => self.ann_candidates(&query.values, k, &pass),
        };
        sort_hits(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    fn hit(&self, slot: usize, q: &[f32]) -> Hit {
        Hit {
            chunk_id: self.ids[slot].clone(),
            score: dot(q, self.slot_vec(slot)),
        }
    }

    fn ann_candidates(&self, q: &[f32], k: usize, pass: &dyn Fn(usize) -> bool) -> Vec<Hit> {
        let total = self.graph.node_count();
        let mut ef = self.graph.params().ef_search.max(k);
        loop {
            let hits: Vec<Hit> = self
                .graph
                .search(q, ef, &self.vectors, self.dim)
                .into_iter()
                .filter(|&n| self.graph.is_live(n))
                .map(|n| self.graph.slot_of(n) as usize)
                .filter(|&s| pass(s))
                .map(|s| self.hit(s, q))
                .collect();
            if hits.len() >= k || ef >= total {
                return hits;
            }
            ef = (ef * 2).min(total);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.dim as u32);
        w.u64(self.len() as u64);
        w.opt_str(self.model_id.as_deref());
        for slot in (0..self.ids.len()).filter(|&s| self.live[s]) {
            w.str(&self.ids[slot]);
            let k = &self.keys[slot];
            w.u8(k.doc_type.code());
            w.i32(k.created_date.num_days_from_ce());
            w.opt_str(k.department.as_deref());
            for &v in self.slot_vec(slot) {
                w.f32(v);
            }
        }
        envelope::seal(MAGIC, VERSION, &w.into_bytes())
    }

    /// Decodes a persisted index, rebuilding the graph in stored order.
    pub fn from_bytes(bytes: &[u8], params: HnswParams) -> Result<Self, IndexError> {
        let payload = envelope::open(bytes, MAGIC, VERSION, "vector index")?;
        let mut r = Reader::new(payload);
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let model_id = r.opt_str()?;
        let mut index = VectorIndex::with_params(dim, params);
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let chunk_id = r.str()?;
            let doc_type =
                DocType::from_code(r.u8()?).ok_or_else(|| PersistError::Malformed("bad doc_type code".into()))?;
            let created_date = NaiveDate::from_num_days_from_ce_opt(r.i32()?)
                .ok_or_else(|| PersistError::Malformed("bad date".into()))?;
            let department = r.opt_str()?;
            let values = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
            entries.push(VectorEntry {
                chunk_id,
                vector: Embedding {
                    values,
                    model_id: model_id.clone().unwrap_or_default(),
                },
                keys: FilterKeys {
                    doc_type,
                    created_date,
                    department,
                },
            });
        }
        r.finish()?;
        index.model_id = model_id;
        index.upsert_batch(entries)?;
        Ok(index)
    }

    pub fn persist(&self, path: &Path) -> Result<(), IndexError> {
        std::fs::write(path, self.to_bytes()).map_err(PersistError::from)?;
        Ok(())
    }

    pub fn load(path: &Path, params: HnswParams) -> Result<Self, IndexError> {
        let bytes = std::fs::read(path).map_err(PersistError::from)?;
        Self::from_bytes(&bytes, params)
    }
}
