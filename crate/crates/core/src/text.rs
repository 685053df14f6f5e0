//! Rule tokenizer shared by chunking, BM25 and budget accounting.
//!
//! A token is either a maximal run of alphanumeric characters or a single
//! non-whitespace, non-alphanumeric character. Whitespace separates tokens and
//! is never emitted.

use std::ops::Range;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    pub text: &'a str,
    pub span: Range<usize>,
}

impl<'a> Token<'a> {
    pub fn is_word(&self) -> bool {
        self.text.chars().next().is_some_and(char::is_alphanumeric)
    }

    pub fn is_sentence_end(&self) -> bool {
        matches!(self.text, "." | "?" | "!")
    }

    fn new(text: &'a str, start: usize, end: usize) -> Self {
        Token {
            text: &text[start..end],
            span: start..end,
        }
    }
}

pub fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if run_start.is_none() {
                run_start = Some(i);
            }
            continue;
        }
        if let Some(start) = run_start.take() {
            tokens.push(Token::new(text, start, i));
        }
        if !c.is_whitespace() {
            tokens.push(Token::new(text, i, i + c.len_utf8()));
        }
    }
    if let Some(start) = run_start {
        tokens.push(Token::new(text, start, text.len()));
    }
    tokens
}

pub fn token_count(text: &str) -> usize {
    tokenize(text).len()
}

/// Lowercased alphanumeric tokens; the term stream for lexical indexing.
pub fn terms(text: &str) -> impl Iterator<Item = String> + '_ {
    tokenize(text)
        .into_iter()
        .filter(|t| t.is_word())
        .map(|t| t.text.to_lowercase())
}
