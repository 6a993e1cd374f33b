//! Deterministic surface-text analysis.
//!
//! Everything here is a pure function of its input text plus a fixed set of
//! lexicons. The default lexicons are compiled in from `lexicons/*.txt`;
//! [`Lexicons::from_dir`] loads replacements with the same file names.

mod entities;
mod features;
mod predicates;
mod sentences;
mod tokenize;

use std::collections::HashSet;
use std::path::Path;

pub use entities::EntitySpan;
pub use features::{RouterFeatures, SentenceFeatures};
pub use predicates::{PredicateAssignment, Regime};
pub use sentences::Sentence;
pub use tokenize::{Token, TokenizedText};

use crate::error::{Error, Result};

const COMPARISON_WORDS: &str = include_str!("../../lexicons/comparison_words.txt");
const YES_NO_VERBS: &str = include_str!("../../lexicons/yes_no_verbs.txt");
const RELATION_VERBS: &str = include_str!("../../lexicons/relation_verbs.txt");
const STOPWORDS: &str = include_str!("../../lexicons/stopwords.txt");
const ABBREVIATIONS: &str = include_str!("../../lexicons/abbreviations.txt");

/// Closed word lists used by the heuristics. All entries are lowercase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicons {
    pub comparison_words: HashSet<String>,
    pub yes_no_verbs: HashSet<String>,
    pub relation_verbs: HashSet<String>,
    /// Capitalized tokens from this list never start a proper-noun span.
    pub stopwords: HashSet<String>,
    /// Abbreviations (without the final period) that do not end a sentence.
    pub abbreviations: HashSet<String>,
}

fn parse_list(content: &str) -> HashSet<String> {
    content
        .lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_lowercase())
        .collect()
}

impl Default for Lexicons {
    fn default() -> Self {
        Lexicons {
            comparison_words: parse_list(COMPARISON_WORDS),
            yes_no_verbs: parse_list(YES_NO_VERBS),
            relation_verbs: parse_list(RELATION_VERBS),
            stopwords: parse_list(STOPWORDS),
            abbreviations: parse_list(ABBREVIATIONS),
        }
    }
}

impl Lexicons {
    /// Loads lexicons from a directory. Missing files fall back to the
    /// compiled-in defaults.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut lex = Lexicons::default();
        let slots: [(&str, &mut HashSet<String>); 5] = [
            ("comparison_words.txt", &mut lex.comparison_words),
            ("yes_no_verbs.txt", &mut lex.yes_no_verbs),
            ("relation_verbs.txt", &mut lex.relation_verbs),
            ("stopwords.txt", &mut lex.stopwords),
            ("abbreviations.txt", &mut lex.abbreviations),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.exists() {
                let content = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                *slot = parse_list(&content);
            }
        }
        Ok(lex)
    }
}

/// Lowercases and collapses every whitespace run to a single space.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Bundles the lexicons with the analysis operations that consult them.
#[derive(Debug, Clone, Default)]
pub struct TextAnalyzer {
    pub lexicons: Lexicons,
}

impl TextAnalyzer {
    pub fn new(lexicons: Lexicons) -> Self {
        TextAnalyzer { lexicons }
    }

    pub fn split_sentences(&self, text: &str) -> Vec<Sentence> {
        sentences::split(text, &self.lexicons.abbreviations)
    }

    pub fn tokenize(&self, text: &str) -> TokenizedText {
        let sentences = self.split_sentences(text);
        tokenize::tokenize(text, &sentences)
    }

    pub fn proper_noun_spans(&self, tokens: &TokenizedText) -> Vec<EntitySpan> {
        entities::proper_noun_spans(tokens, &self.lexicons.stopwords)
    }

    /// Distinct normalized proper-noun spans of a text.
    pub fn entity_set(&self, text: &str) -> std::collections::BTreeSet<String> {
        self.proper_noun_spans(&self.tokenize(text))
            .into_iter()
            .map(|s| s.normalized)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_lexicons_carry_seed_lists() {
        let lex = Lexicons::default();
        for w in ["differ", "same", "versus", "whereas", "earlier", "or"] {
            assert!(lex.comparison_words.contains(w), "{w}");
        }
        assert_eq!(lex.comparison_words.len(), 17);
        assert_eq!(lex.yes_no_verbs.len(), 9);
        assert_eq!(lex.relation_verbs.len(), 18);
        assert!(lex.stopwords.contains("which"));
    }

    #[test]
    fn lexicon_dir_overrides_single_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("relation_verbs.txt"), "# custom\nAuthored\n").unwrap();
        let lex = Lexicons::from_dir(dir.path()).unwrap();
        assert_eq!(lex.relation_verbs.len(), 1);
        assert!(lex.relation_verbs.contains("authored"));
        assert_eq!(lex.comparison_words, Lexicons::default().comparison_words);
    }

    #[test]
    fn normalize_collapses_case_and_space() {
        assert_eq!(normalize("  Person \t  Y\n"), "person y");
        assert_eq!(normalize(""), "");
    }
}
