//! Multiple-choice benchmark harness.
//!
//! Items are JSONL records `{"id", "question", "options": [..], "answer": "A".."E", "subject"}`.
//! Each item is rendered with a fixed template, sent through a [`ChatModel`]
//! and the reply is mapped back to an option label.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;
use std::sync::LazyLock;

use futures::stream::{self, StreamExt};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatModel, CompletionRequest};
use crate::ingest::LineFailure;
use crate::text::tokenize;

pub const LABELS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];
pub const INSTRUCTION: &str = "Answer with the letter of the correct option.";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer_key: char,
    pub subject: String,
}

impl McqItem {
    pub fn labels(&self) -> &'static [char] {
        &LABELS[..self.options.len()]
    }
}

#[derive(Debug, Deserialize)]
struct RawItem {
    id: serde_json::Value,
    question: String,
    options: Vec<String>,
    answer: String,
    #[serde(default)]
    subject: Option<String>,
}

fn validate_item(raw: RawItem) -> Result<McqItem, String> {
    let id = match raw.id {
        serde_json::Value::String(s) if !s.is_empty() => s,
        serde_json::Value::Number(n) => n.to_string(),
        other => return Err(format!("id must be a non-empty string or number, got {other}")),
    };
    if raw.question.trim().is_empty() {
        return Err("question is empty".into());
    }
    if !(2..=LABELS.len()).contains(&raw.options.len()) {
        return Err(format!("expected 2 to 5 options, got {}", raw.options.len()));
    }
    if let Some(i) = raw.options.iter().position(|o| o.trim().is_empty()) {
        return Err(format!("option {} is empty", LABELS[i]));
    }
    let key = raw.answer.trim().to_ascii_uppercase();
    let labels = &LABELS[..raw.options.len()];
    let answer_key = match key.chars().collect::<Vec<_>>()[..] {
        [c] if labels.contains(&c) => c,
        _ => {
            return Err(format!(
                "answer {:?} is not one of the {} option labels",
                raw.answer,
                labels.len()
            ))
        }
    };
    Ok(McqItem {
        id,
        question: raw.question,
        options: raw.options,
        answer_key,
        subject: raw
            .subject
            .filter(|s| !s.trim().is_empty())
            .unwrap_or_else(|| "unspecified".into()),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct McqSet {
    pub items: Vec<McqItem>,
    pub skipped: Vec<LineFailure>,
}

pub fn parse_mcq<R: BufRead>(reader: R) -> Result<McqSet, std::io::Error> {
    let mut set = McqSet::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawItem>(&line)
            .map_err(|e| format!("malformed JSON: {e}"))
            .and_then(validate_item);
        match parsed {
            Ok(item) => set.items.push(item),
            Err(reason) => {
                log::warn!("skipping MCQ line {}: {reason}", i + 1);
                set.skipped.push(LineFailure { line: i + 1, reason });
            }
        }
    }
    Ok(set)
}

pub fn load_mcq(path: &Path) -> Result<McqSet, EvalError> {
    let io = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    parse_mcq(std::io::BufReader::new(file)).map_err(io)
}

pub fn format_mcq_prompt(item: &McqItem) -> String {
    let mut s = format!("Question: {}\n\n", item.question.trim());
    for (label, option) in item.labels().iter().zip(&item.options) {
        let _ = writeln!(s, "{label}. {}", option.trim());
    }
    s.push('\n');
    s.push_str(INSTRUCTION);
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    Label(char),
    Unparseable,
}

static ANSWER_IS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i:answer\s+is)\s*:?\s*\(?([A-E])\b").unwrap());

/// Maps a model reply to a label. Rules, first match wins:
/// 1. the reply opens with a bare label letter, alone or followed by `.`, `)`, `:` or `,`;
/// 2. an "answer is X" phrase (case-insensitive phrase, uppercase letter);
/// 3. the longest option text contained verbatim in the reply.
pub fn parse_choice(output: &str, options: &[String]) -> Choice {
    let labels = &LABELS[..options.len().min(LABELS.len())];
    let toks = tokenize(output);
    if let Some(pos) = toks.iter().position(|t| t.is_word()) {
        let t = &toks[pos];
        let mut chars = t.text.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            let next = toks.get(pos + 1).map(|n| n.text);
            let leading_ok = toks[..pos]
                .iter()
                .all(|p| matches!(p.text, "(" | "[" | "*" | "\"" | "'"));
            if leading_ok && labels.contains(&c) && matches!(next, None | Some("." | ")" | "]" | ":" | "," | "*")) {
                return Choice::Label(c);
            }
        }
    }
    for cap in ANSWER_IS.captures_iter(output) {
        let c = cap[1].chars().next().unwrap();
        if labels.contains(&c) {
            return Choice::Label(c);
        }
    }
    let mut by_len: Vec<(usize, &String)> = options.iter().enumerate().collect();
    by_len.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    by_len
        .into_iter()
        .find(|(_, o)| !o.trim().is_empty() && output.contains(o.trim()))
        .map_or(Choice::Unparseable, |(i, _)| Choice::Label(LABELS[i]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemStatus {
    Parsed,
    Unparseable,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemLog {
    pub id: String,
    pub subject: String,
    pub answer_key: char,
    pub model_raw: String,
    pub parsed_label: Option<char>,
    pub status: ItemStatus,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl Tally {
    fn add(&mut self, correct: bool) {
        self.n += 1;
        self.correct += usize::from(correct);
        self.accuracy = self.correct as f64 / self.n as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub subjects: BTreeMap<String, Tally>,
    pub overall: Tally,
    pub unparseable: usize,
    /// Items whose request failed; excluded from the tallies.
    pub failures: usize,
    pub items: Vec<ItemLog>,
}

impl EvalReport {
    pub fn from_items(model_id: impl Into<String>, items: Vec<ItemLog>) -> Self {
        let mut subjects: BTreeMap<String, Tally> = BTreeMap::new();
        let mut overall = Tally::default();
        let (mut unparseable, mut failures) = (0, 0);
        for it in &items {
            match it.status {
                ItemStatus::Failed => {
                    failures += 1;
                    continue;
                }
                ItemStatus::Unparseable => unparseable += 1,
                ItemStatus::Parsed => {}
            }
            subjects.entry(it.subject.clone()).or_default().add(it.correct);
            overall.add(it.correct);
        }
        EvalReport {
            model_id: model_id.into(),
            subjects,
            overall,
            unparseable,
            failures,
            items,
        }
    }

    pub fn to_table(&self) -> String {
        let width = self.subjects.keys().map(String::len).max().unwrap_or(0).max(7);
        let mut s = format!(
            "{:<width$}  {:>6}  {:>7}  {:>8}\n",
            "subject", "n", "correct", "accuracy"
        );
        let row = |s: &mut String, name: &str, t: &Tally| {
            let _ = writeln!(s, "{name:<width$}  {:>6}  {:>7}  {:>8.4}", t.n, t.correct, t.accuracy);
        };
        for (name, t) in &self.subjects {
            row(&mut s, name, t);
        }
        row(&mut s, "overall", &self.overall);
        if self.unparseable > 0 || self.failures > 0 {
            let _ = writeln!(s, "unparseable: {}  failed: {}", self.unparseable, self.failures);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub concurrency: usize,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            concurrency: 2,
            max_tokens: 32,
            temperature: 0.0,
        }
    }
}

async fn eval_item(item: &McqItem, model: &dyn ChatModel, opts: &EvalOptions) -> ItemLog {
    let req = CompletionRequest {
        max_tokens: opts.max_tokens,
        temperature: opts.temperature,
        ..CompletionRequest::new(model.model_id(), format_mcq_prompt(item))
    };
    let mut log = ItemLog {
        id: item.id.clone(),
        subject: item.subject.clone(),
        answer_key: item.answer_key,
        model_raw: String::new(),
        parsed_label: None,
        status: ItemStatus::Failed,
        correct: false,
        error: None,
    };
    match model.complete(&req).await {
        Ok(r) => {
            let choice = parse_choice(&r.text, &item.options);
            log.model_raw = r.text;
            match choice {
                Choice::Label(c) => {
                    log.parsed_label = Some(c);
                    log.status = ItemStatus::Parsed;
                    log.correct = c == item.answer_key;
                }
                Choice::Unparseable => {
                    log::info!("item {}: unparseable reply {:?}", item.id, log.model_raw);
                    log.status = ItemStatus::Unparseable;
                }
            }
        }
        Err(e) => {
            log::error!("item {}: {e}", item.id);
            log.error = Some(e.to_string());
        }
    }
    log
}

/// Evaluates every item once with at most `concurrency` requests in flight.
/// The item log follows input order.
pub async fn run_eval(items: &[McqItem], model: &dyn ChatModel, opts: &EvalOptions) -> EvalReport {
    let logs: Vec<ItemLog> = stream::iter(items)
        .map(|item| eval_item(item, model, opts))
        .buffered(opts.concurrency.max(1))
        .collect()
        .await;
    EvalReport::from_items(model.model_id(), logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parse_choice_rules() {
        let o = opts(&["Aspirin", "Heparin", "Warfarin", "Low molecular weight heparin"]);
        assert_eq!(parse_choice("B", &o), Choice::Label('B'));
        assert_eq!(parse_choice("(D).", &o), Choice::Label('D'));
        assert_eq!(parse_choice("The answer is (C) because...", &o), Choice::Label('C'));
        assert_eq!(parse_choice("I think the Answer is: A", &o), Choice::Label('A'));
        assert_eq!(parse_choice("I am unsure", &o), Choice::Unparseable);
        assert_eq!(
            parse_choice("Start Low molecular weight heparin now", &o),
            Choice::Label('D')
        );
        assert_eq!(parse_choice("Heparin", &o), Choice::Label('B'));
        assert_eq!(
            parse_choice("A patient like this needs Warfarin", &o),
            Choice::Label('C')
        );
        assert_eq!(parse_choice("E", &o), Choice::Unparseable);
    }

    #[test]
    fn loader_reports_skips() {
        let raw = concat!(
            r#"{"id": 1, "question": "q1", "options": ["a", "b", "c", "d"], "answer": "b", "subject": "anatomy"}"#,
            "\n",
            r#"{"id": "2", "question": "q2", "options": ["a", "b", "c", "d"], "answer": "E", "subject": "anatomy"}"#,
            "\n",
            "not json\n",
            "\n",
            r#"{"id": "3", "question": "q3", "options": ["a"], "answer": "A"}"#,
            "\n",
        );
        let set = parse_mcq(raw.as_bytes()).unwrap();
        assert_eq!(set.items.len(), 1);
        assert_eq!(set.items[0].answer_key, 'B');
        assert_eq!(set.items[0].id, "1");
        assert_eq!(set.skipped.iter().map(|f| f.line).collect::<Vec<_>>(), vec![2, 3, 5]);
        assert!(set.skipped[0].reason.contains("answer"));
        assert!(parse_mcq("".as_bytes()).unwrap().items.is_empty());
    }

    #[test]
    fn prompt_template() {
        let item = McqItem {
            id: "x".into(),
            question: "Which drug reverses heparin?".into(),
            options: opts(&["Vitamin K", "Protamine sulfate"]),
            answer_key: 'B',
            subject: "pharmacology".into(),
        };
        assert_eq!(
            format_mcq_prompt(&item),
            "Question: Which drug reverses heparin?\n\nA. Vitamin K\nB. Protamine sulfate\n\nAnswer with the letter of the correct option."
        );
    }

    #[test]
    fn report_tallies() {
        let log = |subject: &str, correct, status| ItemLog {
            id: "i".into(),
            subject: subject.into(),
            answer_key: 'A',
            model_raw: String::new(),
            parsed_label: None,
            status,
            correct,
            error: None,
        };
        let r = EvalReport::from_items(
            "m",
            vec![
                log("a", true, ItemStatus::Parsed),
                log("a", false, ItemStatus::Unparseable),
                log("b", true, ItemStatus::Parsed),
                log("b", false, ItemStatus::Failed),
            ],
        );
        assert_eq!(r.overall.n, 3);
        assert_eq!(r.overall.correct, 2);
        assert_eq!(r.subjects["a"].accuracy, 0.5);
        assert_eq!(r.subjects["b"].n, 1);
        assert_eq!((r.unparseable, r.failures), (1, 1));
        assert!(r.to_table().contains("overall"));
    }
}
