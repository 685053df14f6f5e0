//! Regex-based redaction of direct identifiers.
//!
//! This is a pluggable hook, not a certified de-identification method. Each
//! rule replaces its matches with a `[CATEGORY]` placeholder.

use std::path::Path;

use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

/// Upper bound on scrub passes; a rule set that has not converged by then is
/// a configuration bug caught by [`RedactionRuleSet::new`].
const MAX_PASSES: usize = 8;

#[derive(Debug, Error)]
pub enum RedactionError {
    #[error("invalid pattern for category {category}: {source}")]
    Pattern {
        category: String,
        #[source]
        source: regex::Error,
    },
    #[error("placeholder [{category}] is itself matched by rule {matched_by}")]
    SelfMatchingPlaceholder { category: String, matched_by: String },
    #[error("category must be non-empty uppercase letters or '_': {0:?}")]
    BadCategory(String),
    #[error("cannot read rule file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse rule file: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone)]
pub struct RedactionRule {
    pub category: String,
    pattern: Regex,
}

impl RedactionRule {
    pub fn placeholder(&self) -> String {
        format!("[{}]", self.category)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RedactionRuleSet {
    rules: Vec<RedactionRule>,
}

#[derive(Debug, Deserialize)]
struct RuleFile {
    #[serde(default, rename = "rule")]
    rules: Vec<RuleSpec>,
}

#[derive(Debug, Deserialize)]
struct RuleSpec {
    category: String,
    pattern: String,
}

impl RedactionRuleSet {
    /// Compiles `(category, pattern)` pairs, applied in the given order.
    pub fn new<I, C, P>(specs: I) -> Result<Self, RedactionError>
    where
        I: IntoIterator<Item = (C, P)>,
        C: Into<String>,
        P: AsRef<str>,
    {
        let mut rules = Vec::new();
        for (category, pattern) in specs {
            let category = category.into();
            if category.is_empty() || !category.chars().all(|c| c.is_ascii_uppercase() || c == '_') {
                return Err(RedactionError::BadCategory(category));
            }
            let pattern = Regex::new(pattern.as_ref()).map_err(|source| RedactionError::Pattern {
                category: category.clone(),
                source,
            })?;
            rules.push(RedactionRule { category, pattern });
        }
        for rule in &rules {
            let placeholder = rule.placeholder();
            if let Some(other) = rules.iter().find(|r| r.pattern.is_match(&placeholder)) {
                return Err(RedactionError::SelfMatchingPlaceholder {
                    category: rule.category.clone(),
                    matched_by: other.category.clone(),
                });
            }
        }
        Ok(RedactionRuleSet { rules })
    }

    /// Loads a TOML file of `[[rule]]` tables with `category` and `pattern`.
    pub fn from_file(path: &Path) -> Result<Self, RedactionError> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_toml(&raw)
    }

    pub fn from_toml(raw: &str) -> Result<Self, RedactionError> {
        let file: RuleFile = toml::from_str(raw)?;
        Self::new(file.rules.into_iter().map(|r| (r.category, r.pattern)))
    }

    pub fn default_rules() -> Self {
        Self::new([
            ("EMAIL", r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}"),
            (
                "DOB",
                r"(?i)\b(?:DOB|date of birth|born)\s*:?\s*\d{1,4}[-/.]\d{1,2}[-/.]\d{1,4}\b",
            ),
            (
                "ID",
                r"(?i)\b(?:MRN|SSN|patient id|id no\.?)\s*[:#]?\s*[A-Z0-9-]*\d[A-Z0-9-]*\b",
            ),
            (
                "PHONE",
                r"(?:\+\d{1,2}[\s.-]?)?(?:\(\d{3}\)[\s.-]?|\b\d{3}[\s.-]?|\b)\d{3}[\s.-]\d{4}\b",
            ),
            (
                "NAME",
                r"\b(?:Dr|Mr|Mrs|Ms|Miss|Prof)\.?\s+[A-Z][a-z]+(?:\s+[A-Z][a-z]+)?",
            ),
        ])
        .expect("built-in redaction rules compile")
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> &[RedactionRule] {
        &self.rules
    }

    /// Replaces every rule match with its placeholder and returns the number of
    /// replacements. Passes repeat until no rule fires, so the output is a
    /// fixed point and scrubbing it again reports zero redactions.
    pub fn scrub(&self, text: &str) -> (String, usize) {
        let mut current = text.to_string();
        let mut total = 0;
        for _ in 0..MAX_PASSES {
            let mut pass = 0;
            for rule in &self.rules {
                let n = rule.pattern.find_iter(&current).count();
                if n > 0 {
                    current = rule
                        .pattern
                        .replace_all(&current, rule.placeholder().as_str())
                        .into_owned();
                    pass += n;
                }
            }
            total += pass;
            if pass == 0 {
                break;
            }
        }
        (current, total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phone_fixture() {
        let rules = RedactionRuleSet::default_rules();
        assert_eq!(
            rules.scrub("Call 555-0123 re: pt"),
            ("Call [PHONE] re: pt".to_string(), 1)
        );
    }

    #[test]
    fn no_identifiers() {
        let rules = RedactionRuleSet::default_rules();
        assert_eq!(
            rules.scrub("no identifiers here"),
            ("no identifiers here".to_string(), 0)
        );
    }

    #[test]
    fn each_category() {
        let rules = RedactionRuleSet::default_rules();
        let (out, n) =
            rules.scrub("Seen by Dr. Alvarez. DOB: 1990-04-12, MRN: A12345, mail j.doe@example.org or (312) 555-0199.");
        assert_eq!(out, "Seen by [NAME]. [DOB], [ID], mail [EMAIL] or [PHONE].");
        assert_eq!(n, 5);
    }

    #[test]
    fn fixture_corpus_is_idempotent() {
        let rules = RedactionRuleSet::default_rules();
        for text in [
            "Mrs. Patel called from 555 123 4567 about patient id 99-12.",
            "born 01/02/1988; contact a@b.co",
            "Protocol v2.1 for DKA, see page 555-1234.",
        ] {
            let (once, _) = rules.scrub(text);
            assert_eq!(rules.scrub(&once), (once.clone(), 0));
        }
    }

    #[test]
    fn bad_pattern_fails_at_load() {
        let err = RedactionRuleSet::new([("BAD", "(unclosed")]).unwrap_err();
        assert!(matches!(err, RedactionError::Pattern { .. }));
    }

    #[test]
    fn placeholder_must_not_match_any_rule() {
        let err = RedactionRuleSet::new([("X", r"\[X\]")]).unwrap_err();
        assert!(matches!(err, RedactionError::SelfMatchingPlaceholder { .. }));
    }

    #[test]
    fn toml_rules() {
        let rules = RedactionRuleSet::from_toml(
            r#"
            [[rule]]
            category = "BED"
            pattern = 'bed \d+'
            "#,
        )
        .unwrap();
        assert_eq!(rules.scrub("moved to bed 12"), ("moved to [BED]".into(), 1));
    }

    proptest::proptest! {
        #[test]
        fn idempotent_on_arbitrary_input(s in "[A-Za-z0-9 .:@()+/-]{0,120}") {
            let rules = RedactionRuleSet::default_rules();
            let (once, _) = rules.scrub(&s);
            let (twice, n) = rules.scrub(&once);
            proptest::prop_assert_eq!(n, 0);
            proptest::prop_assert_eq!(twice, once);
        }
    }
}
