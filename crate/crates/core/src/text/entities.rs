use std::collections::HashSet;

use serde::Serialize;

use super::tokenize::TokenizedText;

/// A run of capitalized tokens treated as one proper noun.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EntitySpan {
    pub surface: String,
    pub normalized: String,
    /// Token index range `[first, last)`.
    pub first: usize,
    pub last: usize,
}

impl EntitySpan {
    pub fn token_count(&self) -> usize {
        self.last - self.first
    }
}

/// Capitalization heuristic for proper nouns.
///
/// A span is a maximal run of capitalized tokens separated only by
/// whitespace. Stopwords never open a run. A run made of a lone
/// sentence-initial token is dropped unless the same word also appears
/// capitalized in a non-initial position.
pub(super) fn proper_noun_spans(t: &TokenizedText, stopwords: &HashSet<String>) -> Vec<EntitySpan> {
    let toks = &t.tokens;
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut open: Option<usize> = None;
    for (i, tok) in toks.iter().enumerate() {
        let cap = tok.is_capitalized();
        if open.is_some() && cap && !tok.sentence_initial && t.space_joined(i) {
            continue;
        }
        if let Some(s) = open.take() {
            runs.push((s, i));
        }
        if cap && !stopwords.contains(&tok.text.to_lowercase()) {
            open = Some(i);
        }
    }
    if let Some(s) = open {
        runs.push((s, toks.len()));
    }

    let mid_sentence_caps: HashSet<&str> = toks
        .iter()
        .filter(|t| t.is_capitalized() && !t.sentence_initial)
        .map(|t| t.text.as_str())
        .collect();

    runs.into_iter()
        .filter(|&(s, e)| {
            e - s > 1 || !toks[s].sentence_initial || mid_sentence_caps.contains(toks[s].text.as_str())
        })
        .map(|(s, e)| {
            let surface = toks[s..e]
                .iter()
                .map(|t| t.text.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            EntitySpan {
                normalized: surface.to_lowercase(),
                surface,
                first: s,
                last: e,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use crate::text::TextAnalyzer;

    fn spans(text: &str) -> Vec<String> {
        let a = TextAnalyzer::default();
        a.proper_noun_spans(&a.tokenize(text))
            .into_iter()
            .map(|s| s.surface)
            .collect()
    }

    #[test]
    fn comparison_question_has_two_entities() {
        assert_eq!(
            spans("Which of Person A or Person B was born earlier?"),
            ["Person A", "Person B"]
        );
    }

    #[test]
    fn lowercase_text_has_none() {
        assert!(spans("the director of the film").is_empty());
    }

    #[test]
    fn lone_sentence_initial_is_dropped() {
        assert_eq!(spans("Paris is in France."), ["France"]);
    }

    #[test]
    fn recurring_initial_word_is_kept() {
        assert_eq!(
            spans("Paris is large. Many visit Paris often."),
            ["Paris", "Paris"]
        );
    }

    #[test]
    fn multi_token_initial_run_is_kept() {
        assert_eq!(spans("Film X was directed by Person Y."), ["Film X", "Person Y"]);
    }

    #[test]
    fn punctuation_breaks_runs() {
        assert_eq!(spans("She lived in Lyon, France and Rome."), ["Lyon", "France", "Rome"]);
    }

    #[test]
    fn stopword_never_opens_a_span() {
        assert_eq!(spans("Who directed The Godfather?"), ["Godfather"]);
    }
}
