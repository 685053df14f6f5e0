//! Document model, token-bounded segmentation and JSONL corpus parsing.

use std::io::BufRead;
use std::ops::Range;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::deid::RedactionRuleSet;
use crate::text::{tokenize, Token};

pub const DEFAULT_MAX_TOKENS: usize = 512;
pub const DEFAULT_OVERLAP: usize = 64;
/// How far back (in tokens) a chunk end may move to land on a sentence end.
pub const SENTENCE_SNAP_WINDOW: usize = 32;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("overlap ({overlap}) must be smaller than max_tokens ({max_tokens})")]
    InvalidOverlap { overlap: usize, max_tokens: usize },
    #[error("document id must not be empty")]
    EmptyId,
    #[error("document {0} has no text")]
    EmptyText(String),
    #[error("created_date {date} is later than ingestion date {today}")]
    FutureDate { date: NaiveDate, today: NaiveDate },
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocType {
    Guideline,
    Ehr,
    Formulary,
    Procedure,
    Publication,
    #[serde(other)]
    Other,
}

impl DocType {
    pub const ALL: [DocType; 6] = [
        DocType::Guideline,
        DocType::Ehr,
        DocType::Formulary,
        DocType::Procedure,
        DocType::Publication,
        DocType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DocType::Guideline => "guideline",
            DocType::Ehr => "ehr",
            DocType::Formulary => "formulary",
            DocType::Procedure => "procedure",
            DocType::Publication => "publication",
            DocType::Other => "other",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<DocType> {
        Self::ALL.get(code as usize).copied()
    }
}

impl std::str::FromStr for DocType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DocType::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown doc_type '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub doc_type: DocType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author: Option<String>,
    pub created_date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub department: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_uri: Option<String>,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub metadata: Metadata,
}

impl Document {
    pub fn validate(&self, today: NaiveDate) -> Result<(), IngestError> {
        if self.doc_id.trim().is_empty() {
            return Err(IngestError::EmptyId);
        }
        if self.text.trim().is_empty() {
            return Err(IngestError::EmptyText(self.doc_id.clone()));
        }
        if self.metadata.created_date > today {
            return Err(IngestError::FutureDate {
                date: self.metadata.created_date,
                today,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub chunk_id: String,
    pub doc_id: String,
    pub seq_no: usize,
    pub text: String,
    pub token_count: usize,
    /// Byte offsets into the (de-identified) document text.
    pub char_span: (usize, usize),
    pub metadata: Metadata,
}

pub fn chunk_id(doc_id: &str, seq_no: usize) -> String {
    format!("{doc_id}#{seq_no:05}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentOptions {
    pub max_tokens: usize,
    pub overlap: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions {
            max_tokens: DEFAULT_MAX_TOKENS,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

/// Splits a document into overlapping chunks of at most `max_tokens` tokens.
///
/// Chunk `i + 1` starts `overlap` tokens before chunk `i` ends. Non-final
/// chunk ends move back to just after the nearest sentence terminator (or a
/// token followed by a newline) found within the last
/// [`SENTENCE_SNAP_WINDOW`] tokens, provided the next chunk still advances.
///
/// Spans tile the source: the first chunk starts at byte 0, each non-final
/// chunk ends where the token after it begins, and the final chunk runs to
/// the end of the text, so [`reconstruct`] gives the document back.
pub fn segment_document(doc: &Document, opts: SegmentOptions) -> Result<Vec<ChunkRecord>, IngestError> {
    let SegmentOptions { max_tokens, overlap } = opts;
    if overlap >= max_tokens {
        return Err(IngestError::InvalidOverlap { overlap, max_tokens });
    }
    let text = doc.text.as_str();
    let tokens = tokenize(text);
    let bounds = chunk_bounds(text, &tokens, max_tokens, overlap);

    let chunks = bounds
        .iter()
        .enumerate()
        .map(|(seq_no, range)| {
            let start = if seq_no == 0 { 0 } else { tokens[range.start].span.start };
            let end = if range.end == tokens.len() {
                text.len()
            } else {
                tokens[range.end].span.start
            };
            ChunkRecord {
                chunk_id: chunk_id(&doc.doc_id, seq_no),
                doc_id: doc.doc_id.clone(),
                seq_no,
                text: text[start..end].to_string(),
                token_count: range.len(),
                char_span: (start, end),
                metadata: doc.metadata.clone(),
            }
        })
        .collect();
    Ok(chunks)
}

/// Token index ranges of each chunk.
#[allow(clippy::single_range_in_vec_init)]
fn chunk_bounds(text: &str, tokens: &[Token<'_>], max_tokens: usize, overlap: usize) -> Vec<Range<usize>> {
    let n = tokens.len();
    if n == 0 {
        return vec![0..0];
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let nominal_end = start + max_tokens;
        if nominal_end >= n {
            out.push(start..n);
            return out;
        }
        let end = snap_end(text, tokens, start, nominal_end, overlap);
        out.push(start..end);
        start = end - overlap;
    }
}

fn snap_end(text: &str, tokens: &[Token<'_>], start: usize, nominal_end: usize, overlap: usize) -> usize {
    let lowest = nominal_end.saturating_sub(SENTENCE_SNAP_WINDOW).max(start);
    for last in (lowest..nominal_end).rev() {
        let end = last + 1;
        if end - overlap <= start {
            break;
        }
        let gap = &text[tokens[last].span.end..tokens[end].span.start];
        if tokens[last].is_sentence_end() || gap.contains('\n') {
            return end;
        }
    }
    nominal_end
}

/// Concatenates chunk texts with each chunk's overlap prefix removed.
pub fn reconstruct(chunks: &[ChunkRecord]) -> String {
    let mut out = String::new();
    let mut covered = 0;
    for c in chunks {
        let (start, end) = c.char_span;
        if end > covered {
            out.push_str(&c.text[covered.max(start) - start..]);
            covered = end;
        }
    }
    out
}

/// One line of the corpus JSONL file.
#[derive(Debug, Deserialize)]
struct CorpusLine {
    #[serde(default)]
    id: Option<String>,
    text: String,
    metadata: Metadata,
}

pub fn content_doc_id(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("doc-{hex}")
}

/// Parses one corpus line into a document. Missing ids derive from a hash of
/// the text.
pub fn parse_corpus_line(line: &str, today: NaiveDate) -> Result<Document, String> {
    let raw: CorpusLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let doc_id = match raw.id {
        Some(id) => id,
        None => content_doc_id(&raw.text),
    };
    let doc = Document {
        doc_id,
        text: raw.text,
        metadata: raw.metadata,
    };
    doc.validate(today).map_err(|e| e.to_string())?;
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineFailure {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub docs_read: usize,
    pub chunks_emitted: usize,
    pub redactions: usize,
    pub failures: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failure_details: Vec<LineFailure>,
}

/// De-identified, segmented output of a corpus batch, ready for embedding.
#[derive(Debug, Default)]
pub struct PreparedBatch {
    pub documents: Vec<Document>,
    pub chunks: Vec<ChunkRecord>,
    pub report: IngestReport,
}

/// Runs the text-side stages (de-identify, then segment) over a JSONL corpus.
///
/// Malformed lines are recorded in the report and skipped. Blank lines are
/// ignored. Only an unreadable source is an error.
pub fn prepare_corpus<R: BufRead>(
    reader: R,
    rules: &RedactionRuleSet,
    opts: SegmentOptions,
    today: NaiveDate,
) -> Result<PreparedBatch, IngestError> {
    if opts.overlap >= opts.max_tokens {
        return Err(IngestError::InvalidOverlap {
            overlap: opts.overlap,
            max_tokens: opts.max_tokens,
        });
    }
    let mut batch = PreparedBatch::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let mut doc = match parse_corpus_line(&line, today) {
            Ok(doc) => doc,
            Err(reason) => {
                batch.report.failure_details.push(LineFailure { line: line_no, reason });
                continue;
            }
        };
        if batch.documents.iter().any(|d| d.doc_id == doc.doc_id) {
            batch.report.failure_details.push(LineFailure {
                line: line_no,
                reason: format!("duplicate document id '{}' in batch", doc.doc_id),
            });
            continue;
        }
        let (scrubbed, redactions) = rules.scrub(&doc.text);
        doc.text = scrubbed;
        if doc.text.trim().is_empty() {
            batch.report.failure_details.push(LineFailure {
                line: line_no,
                reason: format!("document {} is empty after de-identification", doc.doc_id),
            });
            continue;
        }
        let chunks = segment_document(&doc, opts)?;
        batch.report.docs_read += 1;
        batch.report.redactions += redactions;
        batch.report.chunks_emitted += chunks.len();
        batch.chunks.extend(chunks);
        batch.documents.push(doc);
    }
    batch.report.failures = batch.report.failure_details.len();
    Ok(batch)
}
