#![allow(dead_code)]

use chrono::NaiveDate;
use medrag_core::ingest::chunk_id;
use medrag_core::{ChunkRecord, DocType, Metadata};
use rand::seq::IndexedRandom;
use rand::Rng;

pub const VOCAB: &[&str] = &[
    "insulin",
    "sepsis",
    "lactate",
    "fluid",
    "bolus",
    "dka",
    "pediatric",
    "ketone",
    "glucose",
    "potassium",
    "antibiotic",
    "culture",
    "protocol",
    "icu",
    "transfer",
    "dose",
    "infusion",
    "monitor",
    "hourly",
    "saline",
    "nodule",
    "ct",
    "follow",
    "up",
    "renal",
    "hepatic",
    "warfarin",
    "inr",
    "bleeding",
    "stroke",
];

pub fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

pub fn metadata(doc_type: DocType, created: NaiveDate, department: Option<&str>) -> Metadata {
    Metadata {
        doc_type,
        author: None,
        created_date: created,
        department: department.map(str::to_string),
        source_uri: None,
        tags: Vec::new(),
    }
}

/// Words drawn from a small vocabulary with occasional punctuation.
pub fn random_text<R: Rng>(rng: &mut R, words: usize) -> String {
    let mut s = String::new();
    for i in 0..words {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(VOCAB.choose(rng).unwrap());
        if rng.random_bool(0.1) {
            s.push(*[',', '.', ';'].choose(rng).unwrap());
        }
    }
    s
}

/// Independent token count: alphanumeric runs plus single punctuation marks.
pub fn count_tokens(text: &str) -> usize {
    let mut n = 0;
    let mut in_word = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if !in_word {
                n += 1;
            }
            in_word = true;
        } else {
            in_word = false;
            if !c.is_whitespace() {
                n += 1;
            }
        }
    }
    n
}

pub fn chunk(doc_id: &str, seq_no: usize, text: String, meta: Metadata) -> ChunkRecord {
    ChunkRecord {
        chunk_id: chunk_id(doc_id, seq_no),
        doc_id: doc_id.to_string(),
        seq_no,
        token_count: count_tokens(&text),
        char_span: (0, text.len()),
        text,
        metadata: meta,
    }
}

/// Random corpus of `n` chunks spread over up to `docs` documents.
pub fn random_corpus<R: Rng>(rng: &mut R, n: usize, docs: usize) -> Vec<ChunkRecord> {
    let types = [DocType::Guideline, DocType::Ehr, DocType::Procedure];
    let depts = [None, Some("cardiology"), Some("pediatrics")];
    let doc_meta: Vec<Metadata> = (0..docs)
        .map(|_| {
            metadata(
                *types.choose(rng).unwrap(),
                date(
                    2020 + rng.random_range(0..5),
                    rng.random_range(1..13),
                    rng.random_range(1..29),
                ),
                *depts.choose(rng).unwrap(),
            )
        })
        .collect();
    let mut seq = vec![0usize; docs];
    (0..n)
        .map(|_| {
            let d = rng.random_range(0..docs);
            let words = rng.random_range(3..40);
            let c = chunk(
                &format!("doc{d:03}"),
                seq[d],
                random_text(rng, words),
                doc_meta[d].clone(),
            );
            seq[d] += 1;
            c
        })
        .collect()
}
