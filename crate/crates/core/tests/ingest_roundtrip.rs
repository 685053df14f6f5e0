mod common;

use chrono::NaiveDate;
use common::*;
use medrag_core::deid::RedactionRuleSet;
use medrag_core::ingest::{prepare_corpus, reconstruct, segment_document, SegmentOptions};
use medrag_core::{DocType, Document};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn today() -> NaiveDate {
    NaiveDate::from_ymd_opt(2025, 1, 1).unwrap()
}

#[test]
fn three_document_fixture() {
    let corpus = concat!(
        r#"{"id": "a", "text": "Short note.", "metadata": {"doc_type": "ehr", "created_date": "2024-01-01"}}"#,
        "\n",
        r#"{"id": "b", "text": "Contact Dr. Alvarez at 555-123-4567 about MRN: 8812345.", "metadata": {"doc_type": "ehr", "created_date": "2024-01-02"}}"#,
        "\n",
        r#"{"text": "No id here. Second sentence follows. And a third.", "metadata": {"doc_type": "guideline", "created_date": "2023-05-05"}}"#,
        "\n",
    );
    let opts = SegmentOptions {
        max_tokens: 6,
        overlap: 2,
    };
    let batch = prepare_corpus(corpus.as_bytes(), &RedactionRuleSet::default_rules(), opts, today()).unwrap();
    assert_eq!(batch.report.docs_read, 3);
    assert_eq!(batch.report.failures, 0);
    assert_eq!(batch.report.redactions, 3);
    assert_eq!(batch.report.chunks_emitted, batch.chunks.len());

    let b = &batch.documents[1];
    assert_eq!(b.text, "Contact [NAME] at [PHONE] about [ID].");
    let c = &batch.documents[2];
    assert!(c.doc_id.starts_with("doc-"));

    for doc in &batch.documents {
        let chunks: Vec<_> = batch
            .chunks
            .iter()
            .filter(|c| c.doc_id == doc.doc_id)
            .cloned()
            .collect();
        assert_eq!(reconstruct(&chunks), doc.text);
        for (i, ch) in chunks.iter().enumerate() {
            assert_eq!(ch.seq_no, i);
            assert_eq!(ch.chunk_id, format!("{}#{i:05}", doc.doc_id));
            assert!(ch.token_count <= 6);
            assert_eq!(count_tokens(&ch.text), ch.token_count);
        }
    }
}

#[test]
fn random_documents_reconstruct_byte_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let words = rng.random_range(0..400);
        let mut text = random_text(&mut rng, words);
        if rng.random_bool(0.3) {
            text = text.replace(" the ", "\n\n  the ");
        }
        if rng.random_bool(0.2) {
            text.push_str("  café ñ \u{2019}s 🙂 ");
        }
        let max_tokens = rng.random_range(4..80);
        let overlap = rng.random_range(0..max_tokens);
        let doc = Document {
            doc_id: format!("d{case}"),
            text: text.clone(),
            metadata: metadata(DocType::Ehr, date(2024, 1, 1), None),
        };
        let chunks = segment_document(&doc, SegmentOptions { max_tokens, overlap }).unwrap();
        assert_eq!(reconstruct(&chunks), text, "case {case}");
        for w in chunks.windows(2) {
            assert!(w[1].char_span.0 < w[1].char_span.1);
            assert!(w[1].char_span.0 > w[0].char_span.0, "case {case} does not advance");
            assert!(w[1].char_span.0 <= w[0].char_span.1);
        }
        assert!(chunks.iter().all(|c| c.token_count <= max_tokens));
        assert_eq!(chunks[0].char_span.0, 0);
        assert_eq!(chunks.last().unwrap().char_span.1, text.len());
    }
}
