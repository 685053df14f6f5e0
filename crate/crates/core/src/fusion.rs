//! Hybrid score fusion, recency weighting and three-stage retrieval.
//!
//! Raw cosine and BM25 scores are min-max normalized within the candidate
//! pool and mixed convexly: `fused = alpha * v_norm + (1 - alpha) * l_norm`.
//! A recency multiplier in `[gamma_floor, 1]` then scales the fused score.

use std::collections::{BTreeMap, HashMap, HashSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::ChunkCatalog;
use crate::embedding::{dot, Embedding};
use crate::lexical::{LexicalError, LexicalIndex};
use crate::text::token_count;
use crate::vector_index::{Hit, IndexError, MetadataFilter, SearchMode, VectorIndex};

pub const MIN_K: usize = 5;
pub const MAX_K: usize = 10;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Vector(#[from] IndexError),
    #[error(transparent)]
    Lexical(#[from] LexicalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub alpha: f64,
    pub half_life_days: f64,
    pub gamma_floor: f64,
    pub k1_broad: usize,
    pub top_docs: usize,
    pub per_doc_cap: usize,
    /// Fixed passage count in place of the query-length heuristic; clamped
    /// to `[MIN_K, MAX_K]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_override: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha: 0.6,
            half_life_days: 180.0,
            gamma_floor: 0.5,
            k1_broad: 50,
            top_docs: 5,
            per_doc_cap: 3,
            k_override: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(FusionError::AlphaOutOfRange(self.alpha));
        }
        if !(0.0..=1.0).contains(&self.gamma_floor) {
            return Err(FusionError::InvalidConfig(format!(
                "gamma_floor must lie in [0, 1], got {}",
                self.gamma_floor
            )));
        }
        if !(self.half_life_days > 0.0 && self.half_life_days.is_finite()) {
            return Err(FusionError::InvalidConfig("half_life_days must be positive".into()));
        }
        if self.k1_broad == 0 || self.top_docs == 0 || self.per_doc_cap == 0 {
            return Err(FusionError::InvalidConfig(
                "k1_broad, top_docs and per_doc_cap must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-request partial override of [`FusionConfig`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_life_days: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_floor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k1_broad: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_docs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_doc_cap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl FusionOverrides {
    pub fn apply(&self, base: &FusionConfig) -> FusionConfig {
        FusionConfig {
            alpha: self.alpha.unwrap_or(base.alpha),
            half_life_days: self.half_life_days.unwrap_or(base.half_life_days),
            gamma_floor: self.gamma_floor.unwrap_or(base.gamma_floor),
            k1_broad: self.k1_broad.unwrap_or(base.k1_broad),
            top_docs: self.top_docs.unwrap_or(base.top_docs),
            per_doc_cap: self.per_doc_cap.unwrap_or(base.per_doc_cap),
            k_override: self.k.or(base.k_override),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub doc_id: String,
    pub seq_no: usize,
    pub created_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk_id: String,
    pub vector_score: f64,
    pub lexical_score: f64,
    pub v_norm: f64,
    pub l_norm: f64,
    pub fused: f64,
    pub recency_mult: f64,
    #[serde(rename = "final")]
    pub final_score: f64,
    pub rank: usize,
    pub provenance: Provenance,
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Fuses two ranked lists over the same corpus.
///
/// A chunk missing from one list takes that list's minimum raw score. Chunks
/// unknown to `catalog` are dropped. Output is ranked by fused score with
/// `recency_mult = 1`.
pub fn fuse(
    vector_hits: &[Hit],
    lexical_hits: &[Hit],
    alpha: f64,
    catalog: &dyn ChunkCatalog,
) -> Result<Vec<RetrievalHit>, FusionError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FusionError::AlphaOutOfRange(alpha));
    }
    let vmap: HashMap<&str, f64> = vector_hits.iter().map(|h| (h.chunk_id.as_str(), h.score)).collect();
    let lmap: HashMap<&str, f64> = lexical_hits.iter().map(|h| (h.chunk_id.as_str(), h.score)).collect();
    let pool_min = |m: &HashMap<&str, f64>| m.values().copied().fold(f64::INFINITY, f64::min);
    let (vmin, lmin) = (pool_min(&vmap), pool_min(&lmap));

    let mut seen = HashSet::new();
    let mut ids: Vec<&str> = Vec::new();
    for h in vector_hits.iter().chain(lexical_hits) {
        if seen.insert(h.chunk_id.as_str()) {
            ids.push(&h.chunk_id);
        }
    }
    let metas: Vec<_> = ids.iter().map(|id| catalog.chunk_meta(id)).collect();
    let (ids, metas): (Vec<&str>, Vec<_>) = ids
        .into_iter()
        .zip(metas)
        .filter_map(|(id, m)| match m {
            Some(m) => Some((id, m)),
            None => {
                log::warn!("dropping hit for unknown chunk {id}");
                None
            }
        })
        .unzip();

    let raw_v: Vec<f64> = ids.iter().map(|id| vmap.get(id).copied().unwrap_or(vmin)).collect();
    let raw_l: Vec<f64> = ids.iter().map(|id| lmap.get(id).copied().unwrap_or(lmin)).collect();
    let (nv, nl) = (min_max(&raw_v), min_max(&raw_l));

    let mut hits: Vec<RetrievalHit> = ids
        .into_iter()
        .zip(metas)
        .enumerate()
        .map(|(i, (id, meta))| {
            let fused = alpha * nv[i] + (1.0 - alpha) * nl[i];
            RetrievalHit {
                chunk_id: id.to_string(),
                vector_score: raw_v[i],
                lexical_score: raw_l[i],
                v_norm: nv[i],
                l_norm: nl[i],
                fused,
                recency_mult: 1.0,
                final_score: fused,
                rank: 0,
                provenance: Provenance {
                    doc_id: meta.doc_id,
                    seq_no: meta.seq_no,
                    created_date: meta.created_date,
                },
            }
        })
        .collect();
    rank_hits(&mut hits);
    Ok(hits)
}

/// Sorts by final score descending (ties by chunk id) and assigns ranks 1..n.
pub fn rank_hits(hits: &mut [RetrievalHit]) {
    hits.sort_by(|a, b| {
        b.final_score
            .total_cmp(&a.final_score)
            .then_with(|| a.chunk_id.cmp(&b.chunk_id))
    });
    for (i, h) in hits.iter_mut().enumerate() {
        h.rank = i + 1;
    }
}

/// `gamma + (1 - gamma) * 2^(-age / half_life)`. Future dates count as age 0.
pub fn recency_multiplier(created: NaiveDate, now: NaiveDate, half_life_days: f64, gamma_floor: f64) -> f64 {
    let mut age = (now - created).num_days() as f64;
    if age < 0.0 {
        log::warn!("created_date {created} is after {now}; treating age as 0");
        age = 0.0;
    }
    gamma_floor + (1.0 - gamma_floor) * (-age / half_life_days).exp2()
}

pub fn apply_recency(hits: &mut [RetrievalHit], now: NaiveDate, cfg: &FusionConfig) {
    for h in hits.iter_mut() {
        h.recency_mult = recency_multiplier(h.provenance.created_date, now, cfg.half_life_days, cfg.gamma_floor);
        h.final_score = h.fused * h.recency_mult;
    }
    rank_hits(hits);
}

/// Passage count from query length: `clamp(5 + tokens / 10, 5, 10)`.
pub fn choose_k(query: &str) -> usize {
    (MIN_K + token_count(query) / 10).clamp(MIN_K, MAX_K)
}

pub struct RetrievalContext<'a> {
    pub vectors: &'a VectorIndex,
    pub lexical: &'a LexicalIndex,
    pub catalog: &'a dyn ChunkCatalog,
    pub mode: SearchMode,
    pub now: NaiveDate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutcome {
    pub hits: Vec<RetrievalHit>,
    pub k: usize,
    pub no_context: bool,
}

/// Broad corpus search, then document-focused re-ranking, then capped
/// passage selection.
///
/// 1. Fuse the top `k1_broad` of each index and keep the best `k1_broad`.
/// 2. Keep the `top_docs` documents with the best chunk, then score every
///    chunk of those documents directly and fuse again within that pool.
/// 3. Emit `k` passages by final score, at most `per_doc_cap` per document.
///
/// With `query_embedding = None` only the lexical side contributes.
pub fn hierarchical_retrieve(
    ctx: &RetrievalContext<'_>,
    query: &str,
    query_embedding: Option<&Embedding>,
    filter: Option<&MetadataFilter>,
    cfg: &FusionConfig,
) -> Result<RetrievalOutcome, FusionError> {
    cfg.validate()?;
    let k = cfg
        .k_override
        .map_or_else(|| choose_k(query), |k| k.clamp(MIN_K, MAX_K));

    let vector_hits = match query_embedding {
        Some(q) if !ctx.vectors.is_empty() => ctx.vectors.search(q, cfg.k1_broad, filter, ctx.mode)?,
        _ => Vec::new(),
    };
    let lexical_hits = ctx.lexical.search(query, cfg.k1_broad, filter)?;
    let mut broad = fuse(&vector_hits, &lexical_hits, cfg.alpha, ctx.catalog)?;
    apply_recency(&mut broad, ctx.now, cfg);
    broad.truncate(cfg.k1_broad);
    if broad.is_empty() {
        return Ok(RetrievalOutcome {
            hits: Vec::new(),
            k,
            no_context: true,
        });
    }

    let mut best_per_doc: BTreeMap<&str, f64> = BTreeMap::new();
    for h in &broad {
        let e = best_per_doc.entry(&h.provenance.doc_id).or_insert(f64::NEG_INFINITY);
        *e = e.max(h.final_score);
    }
    let mut docs: Vec<(&str, f64)> = best_per_doc.into_iter().collect();
    docs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    docs.truncate(cfg.top_docs);

    let q_terms = LexicalIndex::query_terms(query);
    let mut focused_v = Vec::new();
    let mut focused_l = Vec::new();
    for (doc_id, _) in &docs {
        for chunk_id in ctx.catalog.doc_chunks(doc_id) {
            let Some(vec) = ctx.vectors.vector(&chunk_id) else {
                continue;
            };
            let v = query_embedding.map_or(0.0, |q| dot(&q.values, vec));
            focused_l.push(Hit {
                chunk_id: chunk_id.clone(),
                score: ctx.lexical.bm25_score(&q_terms, &chunk_id),
            });
            focused_v.push(Hit { chunk_id, score: v });
        }
    }
    let mut focused = fuse(&focused_v, &focused_l, cfg.alpha, ctx.catalog)?;
    apply_recency(&mut focused, ctx.now, cfg);

    let mut per_doc: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::with_capacity(k);
    for h in focused {
        if out.len() == k {
            break;
        }
        let n = per_doc.entry(h.provenance.doc_id.clone()).or_default();
        if *n < cfg.per_doc_cap {
            *n += 1;
            out.push(h);
        }
    }
    for (i, h) in out.iter_mut().enumerate() {
        h.rank = i + 1;
    }
    Ok(RetrievalOutcome {
        no_context: out.is_empty(),
        hits: out,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ChunkMeta;

    struct Flat(HashMap<String, ChunkMeta>);

    impl ChunkCatalog for Flat {
        fn chunk_meta(&self, id: &str) -> Option<ChunkMeta> {
            self.0.get(id).cloned()
        }
        fn doc_chunks(&self, doc_id: &str) -> Vec<String> {
            let mut v: Vec<_> = self
                .0
                .iter()
                .filter(|(_, m)| m.doc_id == doc_id)
                .map(|(k, _)| k.clone())
                .collect();
            v.sort();
            v
        }
    }

    fn catalog(ids: &[&str]) -> Flat {
        Flat(
            ids.iter()
                .map(|id| {
                    (
                        id.to_string(),
                        ChunkMeta {
                            doc_id: format!("doc-{id}"),
                            seq_no: 0,
                            created_date: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
                        },
                    )
                })
                .collect(),
        )
    }

    fn hit(id: &str, score: f64) -> Hit {
        Hit {
            chunk_id: id.into(),
            score,
        }
    }

    #[test]
    fn two_chunk_hand_arithmetic() {
        let cat = catalog(&["c1", "c2"]);
        let out = fuse(
            &[hit("c1", 0.9), hit("c2", 0.1)],
            &[hit("c1", 0.0), hit("c2", 3.0)],
            0.6,
            &cat,
        )
        .unwrap();
        assert_eq!(out[0].chunk_id, "c1");
        assert!((out[0].fused - 0.6).abs() < 1e-12);
        assert!((out[1].fused - 0.4).abs() < 1e-12);
        assert_eq!((out[0].v_norm, out[0].l_norm), (1.0, 0.0));
        assert_eq!((out[0].rank, out[1].rank), (1, 2));
    }

    #[test]
    fn missing_entries_take_pool_minimum() {
        let cat = catalog(&["a", "b", "c"]);
        let out = fuse(
            &[hit("a", 0.8), hit("b", 0.2)],
            &[hit("c", 5.0), hit("a", 1.0)],
            0.5,
            &cat,
        )
        .unwrap();
        let c = out.iter().find(|h| h.chunk_id == "c").unwrap();
        assert_eq!(c.vector_score, 0.2);
        assert_eq!(c.v_norm, 0.0);
        let b = out.iter().find(|h| h.chunk_id == "b").unwrap();
        assert_eq!(b.lexical_score, 1.0);
    }

    #[test]
    fn constant_pool_normalizes_to_half() {
        let cat = catalog(&["a", "b"]);
        let out = fuse(&[hit("a", 0.3), hit("b", 0.3)], &[], 0.6, &cat).unwrap();
        assert!(out.iter().all(|h| h.v_norm == 0.5 && h.l_norm == 0.5));
    }

    #[test]
    fn alpha_is_validated() {
        let cat = catalog(&[]);
        assert!(matches!(
            fuse(&[], &[], 1.5, &cat),
            Err(FusionError::AlphaOutOfRange(_))
        ));
        assert!(matches!(
            fuse(&[], &[], -0.1, &cat),
            Err(FusionError::AlphaOutOfRange(_))
        ));
    }

    #[test]
    fn recency_fixtures() {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).unwrap();
        let now = d(2024, 7, 1);
        assert_eq!(recency_multiplier(now, now, 180.0, 0.5), 1.0);
        let half = now - chrono::Days::new(180);
        assert!((recency_multiplier(half, now, 180.0, 0.5) - 0.75).abs() < 1e-12);
        let old = now - chrono::Days::new(1800);
        let m = recency_multiplier(old, now, 180.0, 0.5);
        assert!((m - (0.5 + 0.5 / 1024.0)).abs() < 1e-12);
        assert!(m >= 0.5);
        assert_eq!(recency_multiplier(d(2025, 1, 1), now, 180.0, 0.5), 1.0);
    }

    #[test]
    fn choose_k_fixtures() {
        let q = |n: usize| vec!["w"; n].join(" ");
        assert_eq!(choose_k(&q(3)), 5);
        assert_eq!(choose_k(&q(50)), 10);
        assert_eq!(choose_k(&q(200)), 10);
        assert_eq!(choose_k(""), 5);
        assert_eq!(choose_k(&q(27)), 7);
    }

    #[test]
    fn overrides_take_precedence() {
        let base = FusionConfig {
            alpha: 0.3,
            ..Default::default()
        };
        let merged = FusionOverrides {
            alpha: Some(1.0),
            top_docs: Some(2),
            ..Default::default()
        }
        .apply(&base);
        assert_eq!(merged.alpha, 1.0);
        assert_eq!(merged.top_docs, 2);
        assert_eq!(merged.per_doc_cap, base.per_doc_cap);
        assert_eq!(FusionOverrides::default().apply(&base), base);
    }

    proptest::proptest! {
        #[test]
        fn recency_is_monotone_and_bounded(a in 0u64..20_000, b in 0u64..20_000, hl in 1.0f64..1000.0, g in 0.0f64..1.0) {
            let now = NaiveDate::from_ymd_opt(2080, 1, 1).unwrap();
            let (young, old) = (a.min(b), a.max(b));
            let my = recency_multiplier(now - chrono::Days::new(young), now, hl, g);
            let mo = recency_multiplier(now - chrono::Days::new(old), now, hl, g);
            proptest::prop_assert!(mo <= my);
            proptest::prop_assert!(mo >= g && my <= 1.0);
            // Strict while the decaying term is still above f64 resolution.
            if old > young && (1.0 - g) * (-(old as f64) / hl).exp2() > 1e-12 {
                proptest::prop_assert!(mo < my);
            }
        }

        #[test]
        fn k_always_in_range(q in "\\PC{0,400}") {
            let k = choose_k(&q);
            proptest::prop_assert!((MIN_K..=MAX_K).contains(&k));
        }
    }
}
