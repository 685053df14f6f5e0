//! Okapi BM25 inverted index over chunk texts with per-term boosts.
//!
//! Terms are lowercased alphanumeric tokens from [`crate::text`]; no stemming.
//! Document length is the chunk's full token count.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use thiserror::Error;

use crate::envelope::{self, PersistError, Reader, Writer};
use crate::ingest::{ChunkRecord, DocType};
use crate::text::terms;
use crate::vector_index::{sort_hits, FilterKeys, Hit, MetadataFilter};

const MAGIC: &[u8; 8] = b"MRAGLEX\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LexicalError {
    #[error("duplicate chunk id '{0}'")]
    DuplicateChunk(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("boost table line {line}: {reason}")]
    BoostTable { line: usize, reason: String },
    #[error(transparent)]
    Persist(#[from] PersistError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

pub fn idf(n_docs: usize, doc_freq: usize) -> f64 {
    let (n, df) = (n_docs as f64, doc_freq as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// One term's BM25 contribution before boosting.
pub fn term_score(params: Bm25Params, idf: f64, tf: f64, doc_len: f64, avgdl: f64) -> f64 {
    if tf == 0.0 {
        return 0.0;
    }
    let norm = if avgdl > 0.0 { doc_len / avgdl } else { 0.0 };
    idf * tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * norm))
}

/// Multiplicative weights for precision-critical terms. Unknown terms weigh 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TermBoostTable {
    weights: HashMap<String, f64>,
}

impl TermBoostTable {
    pub fn set(&mut self, term: &str, weight: f64) -> Result<(), String> {
        if !weight.is_finite() || weight < 1.0 {
            return Err(format!("weight {weight} must be finite and >= 1.0"));
        }
        self.weights.insert(term.to_lowercase(), weight);
        Ok(())
    }

    pub fn weight(&self, term: &str) -> f64 {
        self.weights.get(term).copied().unwrap_or(1.0)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Parses `term<TAB>weight` lines; blank lines and `#` comments are skipped.
    pub fn parse(raw: &str) -> Result<Self, LexicalError> {
        let mut table = TermBoostTable::default();
        for (i, line) in raw.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| LexicalError::BoostTable { line: line_no, reason };
            let (term, weight) = line
                .split_once('\t')
                .ok_or_else(|| err("expected term<TAB>weight".into()))?;
            let weight: f64 = weight.trim().parse().map_err(|e| err(format!("{e}")))?;
            table.set(term.trim(), weight).map_err(err)?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, LexicalError> {
        let raw = std::fs::read_to_string(path).map_err(PersistError::from)?;
        Self::parse(&raw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Posting {
    pub term: String,
    pub chunk_id: String,
    pub tf: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexStats {
    pub chunks: usize,
    pub terms: usize,
    pub postings: usize,
    pub avgdl: f64,
}

#[derive(Debug, Clone)]
struct DocEntry {
    chunk_id: String,
    len: usize,
    keys: FilterKeys,
    tf: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Default)]
pub struct LexicalIndex {
    params: Bm25Params,
    boosts: TermBoostTable,
    docs: Vec<Option<DocEntry>>,
    slot_of: HashMap<String, usize>,
    postings: HashMap<String, Vec<(u32, u32)>>,
    total_len: usize,
}

impl LexicalIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_boosts(boosts: TermBoostTable) -> Self {
        LexicalIndex {
            boosts,
            ..Self::default()
        }
    }

    pub fn boosts(&self) -> &TermBoostTable {
        &self.boosts
    }

    pub fn set_boosts(&mut self, boosts: TermBoostTable) {
        self.boosts = boosts;
    }

    pub fn len(&self) -> usize {
        self.slot_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slot_of.is_empty()
    }

    pub fn avgdl(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.len() as f64
        }
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        idf(self.len(), self.doc_freq(term))
    }

    pub fn stats(&self) -> IndexStats {
        IndexStats {
            chunks: self.len(),
            terms: self.postings.len(),
            postings: self.postings.values().map(Vec::len).sum(),
            avgdl: self.avgdl(),
        }
    }

    pub fn postings(&self, term: &str) -> Vec<Posting> {
        let mut out: Vec<Posting> = self
            .postings
            .get(term)
            .into_iter()
            .flatten()
            .map(|&(slot, tf)| Posting {
                term: term.to_string(),
                chunk_id: self.doc(slot as usize).chunk_id.clone(),
                tf,
            })
            .collect();
        out.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
        out
    }

    fn doc(&self, slot: usize) -> &DocEntry {
        self.docs[slot].as_ref().expect("posting points at live slot")
    }

    /// Adds new chunks. Any id already indexed or repeated in the batch
    /// rejects the whole batch.
    pub fn index_chunks(&mut self, chunks: &[ChunkRecord]) -> Result<IndexStats, LexicalError> {
        let mut seen = HashSet::new();
        for c in chunks {
            if self.slot_of.contains_key(&c.chunk_id) || !seen.insert(c.chunk_id.as_str()) {
                return Err(LexicalError::DuplicateChunk(c.chunk_id.clone()));
            }
        }
        for c in chunks {
            self.insert(c.chunk_id.clone(), &c.text, c.token_count, FilterKeys::of(c));
        }
        Ok(self.stats())
    }

    /// Adds chunks, replacing any already indexed under the same id.
    pub fn upsert_chunks(&mut self, chunks: &[ChunkRecord]) -> IndexStats {
        for c in chunks {
            self.remove(&c.chunk_id);
            self.insert(c.chunk_id.clone(), &c.text, c.token_count, FilterKeys::of(c));
        }
        self.stats()
    }

    fn insert(&mut self, chunk_id: String, text: &str, len: usize, keys: FilterKeys) {
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in terms(text) {
            *tf.entry(t).or_default() += 1;
        }
        self.insert_entry(DocEntry {
            chunk_id,
            len,
            keys,
            tf,
        });
    }

    fn insert_entry(&mut self, entry: DocEntry) {
        let slot = self.docs.len();
        for (term, &n) in &entry.tf {
            self.postings.entry(term.clone()).or_default().push((slot as u32, n));
        }
        self.total_len += entry.len;
        self.slot_of.insert(entry.chunk_id.clone(), slot);
        self.docs.push(Some(entry));
    }

    pub fn remove(&mut self, chunk_id: &str) -> bool {
        let Some(slot) = self.slot_of.remove(chunk_id) else {
            return false;
        };
        let entry = self.docs[slot].take().expect("slot map points at live entry");
        for term in entry.tf.keys() {
            if let Some(list) = self.postings.get_mut(term) {
                list.retain(|&(s, _)| s as usize != slot);
                if list.is_empty() {
                    self.postings.remove(term);
                }
            }
        }
        self.total_len -= entry.len;
        true
    }

    /// BM25 score of one chunk for the given (already normalized) terms.
    pub fn bm25_score(&self, query_terms: &[String], chunk_id: &str) -> f64 {
        let Some(&slot) = self.slot_of.get(chunk_id) else {
            return 0.0;
        };
        let doc = self.doc(slot);
        let avgdl = self.avgdl();
        query_terms
            .iter()
            .map(|t| {
                let tf = doc.tf.get(t).copied().unwrap_or(0) as f64;
                self.boosts.weight(t) * term_score(self.params, self.idf(t), tf, doc.len as f64, avgdl)
            })
            .sum()
    }

    /// Distinct normalized terms of a query, in first-occurrence order.
    pub fn query_terms(query: &str) -> Vec<String> {
        let mut seen = HashSet::new();
        terms(query).filter(|t| seen.insert(t.clone())).collect()
    }

    pub fn search(&self, query: &str, k: usize, filter: Option<&MetadataFilter>) -> Result<Vec<Hit>, LexicalError> {
        if k == 0 {
            return Err(LexicalError::InvalidK);
        }
        let q = Self::query_terms(query);
        let candidates: HashSet<u32> = q
            .iter()
            .filter_map(|t| self.postings.get(t))
            .flatten()
            .map(|&(slot, _)| slot)
            .filter(|&slot| filter.is_none_or(|f| f.matches(&self.doc(slot as usize).keys)))
            .collect();
        let mut hits: Vec<Hit> = candidates
            .into_iter()
            .map(|slot| {
                let id = &self.doc(slot as usize).chunk_id;
                Hit {
                    chunk_id: id.clone(),
                    score: self.bm25_score(&q, id),
                }
            })
            .collect();
        sort_hits(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.len() as u64);
        for doc in self.docs.iter().flatten() {
            w.str(&doc.chunk_id);
            w.u32(doc.len as u32);
            w.u8(doc.keys.doc_type.code());
            w.i32(doc.keys.created_date.num_days_from_ce());
            w.opt_str(doc.keys.department.as_deref());
            w.u32(doc.tf.len() as u32);
            for (term, &n) in &doc.tf {
                w.str(term);
                w.u32(n);
            }
        }
        envelope::seal(MAGIC, VERSION, &w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8], boosts: TermBoostTable) -> Result<Self, LexicalError> {
        let payload = envelope::open(bytes, MAGIC, VERSION, "lexical index")?;
        let mut r = Reader::new(payload);
        let mut index = LexicalIndex::with_boosts(boosts);
        let count = r.u64()?;
        for _ in 0..count {
            let chunk_id = r.str()?;
            let len = r.u32()? as usize;
            let doc_type =
                DocType::from_code(r.u8()?).ok_or_else(|| PersistError::Malformed("bad doc_type code".into()))?;
            let created_date = NaiveDate::from_num_days_from_ce_opt(r.i32()?)
                .ok_or_else(|| PersistError::Malformed("bad date".into()))?;
            let department = r.opt_str()?;
            let n_terms = r.u32()?;
            let mut tf = BTreeMap::new();
            for _ in 0..n_terms {
                let term = r.str()?;
                tf.insert(term, r.u32()?);
            }
            if index.slot_of.contains_key(&chunk_id) {
                return Err(LexicalError::DuplicateChunk(chunk_id));
            }
            index.insert_entry(DocEntry {
                chunk_id,
                len,
                keys: FilterKeys {
                    doc_type,
                    created_date,
                    department,
                },
                tf,
            });
        }
        r.finish()?;
        Ok(index)
    }

    pub fn persist(&self, path: &Path) -> Result<(), LexicalError> {
        std::fs::write(path, self.to_bytes()).map_err(PersistError::from)?;
        Ok(())
    }

    pub fn load(path: &Path, boosts: TermBoostTable) -> Result<Self, LexicalError> {
        let bytes = std::fs::read(path).map_err(PersistError::from)?;
        Self::from_bytes(&bytes, boosts)
    }
}
