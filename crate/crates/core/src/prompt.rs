//! Context assembly and prompt rendering.
//!
//! Retrieved passages become [`ContextBlock`]s, are packed greedily under a
//! token budget and substituted into a named preset template. Templates use
//! `{user_query}`, `{retrieved_documents}` and optionally `{audience}`;
//! substitution is single-pass so placeholder text inside a query is left
//! alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::RetrievalHit;
use crate::text::{token_count, tokenize};

pub const DEFAULT_CONTEXT_BUDGET: usize = 3000;
pub const DEFAULT_AUDIENCE: &str = "attending physician";

pub const GENERAL: &str = "general";
pub const DIAGNOSIS: &str = "diagnosis";
pub const SUMMARIZATION: &str = "summarization";

const GENERAL_TEMPLATE: &str =
    "[SYSTEM] You are a medical assistant providing information based on hospital guidelines and medical knowledge.
For each response:
1. Consider the retrieved context carefully
2. Prioritize hospital-specific protocols when available
3. Clearly indicate when information comes from general knowledge vs. retrieved context
4. Identify any information gaps requiring additional clarification
5. Format responses with clinical relevance in mind
[/SYSTEM]

[QUERY] {user_query}

[RETRIEVED CONTEXT]
{retrieved_documents}
[/RETRIEVED CONTEXT]

Response:";

const DIAGNOSIS_TEMPLATE: &str = "[SYSTEM] Based on the patient\u{2019}s data and relevant medical guidelines, provide a ranked list of possible diagnoses. Explain each choice and cite sources if relevant.
[/SYSTEM]

[USER] {user_query}

[RETRIEVED CONTEXT]
{retrieved_documents}
[/RETRIEVED CONTEXT]

Response:";

const SUMMARIZATION_TEMPLATE: &str = "[SYSTEM] Summarize the key findings of this radiology report for the {audience}, including any recommended follow-up steps.
[/SYSTEM]

[USER]: {user_query}

[RETRIEVED CONTEXT]
{retrieved_documents}
[/RETRIEVED CONTEXT]

Response:";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("unknown prompt preset {0:?}")]
    UnknownPreset(String),
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("invalid template for preset {name:?}: {reason}")]
    InvalidTemplate { name: String, reason: String },
    #[error("context budget of {budget} tokens cannot hold the header of the first block ({needed} tokens)")]
    BudgetTooSmall { budget: usize, needed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBlock {
    pub text: String,
    pub source_doc_id: String,
    pub chunk_id: String,
    pub rank: usize,
    pub final_score: f64,
    pub created_date: NaiveDate,
}

impl ContextBlock {
    pub fn from_hit(hit: &RetrievalHit, text: impl Into<String>) -> Self {
        ContextBlock {
            text: text.into(),
            source_doc_id: hit.provenance.doc_id.clone(),
            chunk_id: hit.chunk_id.clone(),
            rank: hit.rank,
            final_score: hit.final_score,
            created_date: hit.provenance.created_date,
        }
    }

    fn header(&self) -> String {
        format!(
            "[{}] (doc={}, chunk={}, date={}, score={:.4})\n",
            self.rank,
            self.source_doc_id,
            self.chunk_id,
            self.created_date.format("%Y-%m-%d"),
            self.final_score
        )
    }

    /// `"[rank] (doc=.., chunk=.., date=.., score=..)\n<text>\n"`.
    pub fn serialize(&self) -> String {
        let mut s = self.header();
        s.push_str(&self.text);
        s.push('\n');
        s
    }

    pub fn token_estimate(&self) -> usize {
        token_count(&self.serialize())
    }
}

/// Greedy packing in rank order. Blocks that do not fit are skipped and
/// later ones may still fit. The first block is always kept, with its text
/// cut at a token boundary when it alone exceeds the budget.
pub fn assemble_context(candidates: Vec<ContextBlock>, budget_tokens: usize) -> Result<Vec<ContextBlock>, PromptError> {
    let mut candidates = candidates;
    candidates.sort_by_key(|b| b.rank);
    let mut out = Vec::new();
    let mut used = 0usize;
    for (i, block) in candidates.into_iter().enumerate() {
        let cost = block.token_estimate();
        if used + cost <= budget_tokens {
            used += cost;
            out.push(block);
        } else if i == 0 {
            let block = truncate_block(block, budget_tokens)?;
            used += block.token_estimate();
            out.push(block);
        }
    }
    Ok(out)
}

fn truncate_block(mut block: ContextBlock, budget: usize) -> Result<ContextBlock, PromptError> {
    let header = token_count(&block.header());
    if header > budget {
        return Err(PromptError::BudgetTooSmall { budget, needed: header });
    }
    let keep = budget - header;
    let toks = tokenize(&block.text);
    let end = match keep {
        0 => 0,
        n => toks.get(n - 1).map_or(block.text.len(), |t| t.span.end),
    };
    block.text.truncate(end);
    Ok(block)
}

/// Concatenated serialized blocks, separated by a blank line.
pub fn render_context(blocks: &[ContextBlock]) -> String {
    let mut s = String::new();
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        s.push_str(&b.serialize());
    }
    if s.ends_with('\n') {
        s.pop();
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetRegistry {
    templates: BTreeMap<String, String>,
}

impl Default for PresetRegistry {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(GENERAL.to_string(), GENERAL_TEMPLATE.to_string());
        templates.insert(DIAGNOSIS.to_string(), DIAGNOSIS_TEMPLATE.to_string());
        templates.insert(SUMMARIZATION.to_string(), SUMMARIZATION_TEMPLATE.to_string());
        PresetRegistry { templates }
    }
}

impl PresetRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn template(&self, name: &str) -> Result<&str, PromptError> {
        self.templates
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| PromptError::UnknownPreset(name.to_string()))
    }

    /// Adds or replaces a preset. The template must carry one system section,
    /// one context section, both placeholders, and end with `Response:`.
    pub fn register(&mut self, name: &str, template: &str) -> Result<(), PromptError> {
        let bad = |reason: &str| PromptError::InvalidTemplate {
            name: name.to_string(),
            reason: reason.to_string(),
        };
        if name.trim().is_empty() {
            return Err(bad("empty preset name"));
        }
        for marker in [
            "[SYSTEM]",
            "[/SYSTEM]",
            "[RETRIEVED CONTEXT]",
            "[/RETRIEVED CONTEXT]",
            "{user_query}",
            "{retrieved_documents}",
        ] {
            if template.matches(marker).count() != 1 {
                return Err(bad(&format!("expected exactly one {marker}")));
            }
        }
        if !template.trim_end().ends_with("Response:") {
            return Err(bad("must end with \"Response:\""));
        }
        self.templates.insert(name.to_string(), template.to_string());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub preset: String,
    pub query: String,
    pub blocks: Vec<ContextBlock>,
    pub rendered: String,
    /// Tokens of the rendered context section; bounded by the budget.
    pub token_estimate: usize,
    /// Tokens of the whole rendered prompt.
    pub prompt_tokens: usize,
}

fn substitute(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + vars.iter().map(|v| v.1.len()).sum::<usize>());
    let mut rest = template;
    'outer: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (name, value) in vars {
            if tail.len() > name.len() + 1 && tail[1..].starts_with(name) && tail.as_bytes()[name.len() + 1] == b'}' {
                out.push_str(value);
                rest = &tail[name.len() + 2..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

/// Renders a preset with the given query and already-assembled blocks.
pub fn render_prompt(
    registry: &PresetRegistry,
    preset: &str,
    query: &str,
    blocks: Vec<ContextBlock>,
    audience: Option<&str>,
) -> Result<PromptBundle, PromptError> {
    let template = registry.template(preset)?;
    if query.trim().is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    let context = render_context(&blocks);
    let rendered = substitute(
        template,
        &[
            ("user_query", query),
            ("retrieved_documents", &context),
            ("audience", audience.unwrap_or(DEFAULT_AUDIENCE)),
        ],
    );
    Ok(PromptBundle {
        preset: preset.to_string(),
        query: query.to_string(),
        token_estimate: token_count(&context),
        prompt_tokens: token_count(&rendered),
        blocks,
        rendered,
    })
}

/// Plain-text listing of blocks, for logs and CLI output.
pub fn describe_blocks(blocks: &[ContextBlock]) -> String {
    let mut s = String::new();
    for b in blocks {
        let _ = writeln!(
            s,
            "{:>2}. {} {} {:.4}",
            b.rank, b.source_doc_id, b.chunk_id, b.final_score
        );
    }
    s
}
