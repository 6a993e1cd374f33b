use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::TextAnalyzer;

/// Router inputs, in model column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterFeatures {
    pub q_comparison_word: u8,
    pub q_ynstart: u8,
    pub q_entity_count: u32,
    pub b_new_entity_count: u32,
    pub b_rel_frac: f64,
}

impl RouterFeatures {
    pub const NAMES: [&'static str; 5] = [
        "q_comparison_word",
        "q_ynstart",
        "q_entity_count",
        "b_new_entity_count",
        "b_rel_frac",
    ];

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            f64::from(self.q_comparison_word),
            f64::from(self.q_ynstart),
            f64::from(self.q_entity_count),
            f64::from(self.b_new_entity_count),
            self.b_rel_frac,
        ]
    }
}

/// Selector inputs for one candidate sentence, in model column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceFeatures {
    pub new_entity_count: u32,
    pub has_relation_verb: u8,
    pub position_frac: f64,
    pub length_tokens: u32,
    pub ne_density: f64,
}

impl SentenceFeatures {
    pub const NAMES: [&'static str; 5] = [
        "new_entity_count",
        "has_relation_verb",
        "position_frac",
        "length_tokens",
        "ne_density",
    ];

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            f64::from(self.new_entity_count),
            f64::from(self.has_relation_verb),
            self.position_frac,
            f64::from(self.length_tokens),
            self.ne_density,
        ]
    }
}

fn count_u32(n: usize) -> u32 {
    u32::try_from(n).unwrap_or(u32::MAX)
}

impl TextAnalyzer {
    fn new_entities(&self, text: &str, question_entities: &BTreeSet<String>) -> usize {
        self.entity_set(text).difference(question_entities).count()
    }

    /// Features for routing one query. `b_rel` is empty when the selector
    /// abstained.
    pub fn router_features(&self, question: &str, b_rel: &str, bridge_body: &str) -> RouterFeatures {
        let q_tokens = self.tokenize(question);
        let lex = &self.lexicons;
        let q_comparison_word = q_tokens
            .tokens
            .iter()
            .any(|t| lex.comparison_words.contains(&t.text.to_lowercase()));
        let q_ynstart = q_tokens
            .tokens
            .first()
            .is_some_and(|t| lex.yes_no_verbs.contains(&t.text.to_lowercase()));
        let q_entities: BTreeSet<String> = self
            .proper_noun_spans(&q_tokens)
            .into_iter()
            .map(|s| s.normalized)
            .collect();

        let (b_new, b_rel_frac) = if b_rel.trim().is_empty() {
            (0, 0.0)
        } else {
            let rel_len = self.tokenize(b_rel).len();
            let body_len = self.tokenize(bridge_body).len();
            let frac = if body_len == 0 {
                0.0
            } else {
                (rel_len as f64 / body_len as f64).min(1.0)
            };
            (self.new_entities(b_rel, &q_entities), frac)
        };

        RouterFeatures {
            q_comparison_word: u8::from(q_comparison_word),
            q_ynstart: u8::from(q_ynstart),
            q_entity_count: count_u32(q_entities.len()),
            b_new_entity_count: count_u32(b_new),
            b_rel_frac,
        }
    }

    /// Features for sentence `index` of a passage with `total` sentences.
    pub fn sentence_features(&self, sentence: &str, question: &str, index: usize, total: usize) -> SentenceFeatures {
        let tokens = self.tokenize(sentence);
        let spans = self.proper_noun_spans(&tokens);
        let q_entities = self.entity_set(question);
        let new_entities: BTreeSet<&str> = spans
            .iter()
            .map(|s| s.normalized.as_str())
            .filter(|s| !q_entities.contains(*s))
            .collect();
        let has_relation_verb = tokens
            .tokens
            .iter()
            .any(|t| self.lexicons.relation_verbs.contains(&t.text.to_lowercase()));
        let denom = total.saturating_sub(1).max(1) as f64;
        let position_frac = (index as f64 / denom).clamp(0.0, 1.0);
        let length = tokens.len();
        let ne_tokens: usize = spans.iter().map(|s| s.token_count()).sum();
        let ne_density = if length == 0 {
            0.0
        } else {
            ne_tokens as f64 / length as f64
        };
        SentenceFeatures {
            new_entity_count: count_u32(new_entities.len()),
            has_relation_verb: u8::from(has_relation_verb),
            position_frac,
            length_tokens: count_u32(length),
            ne_density,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const COMPARISON: &str = "Which of Person A or Person B was born earlier?";

    #[test]
    fn comparison_question_features() {
        let a = TextAnalyzer::default();
        let f = a.router_features(COMPARISON, "", "Person A was born in 1900.");
        assert_eq!(f.q_comparison_word, 1);
        assert_eq!(f.q_ynstart, 0);
        assert_eq!(f.q_entity_count, 2);
        assert_eq!(f.b_new_entity_count, 0);
        assert_eq!(f.b_rel_frac, 0.0);
    }

    #[test]
    fn yes_no_start() {
        let a = TextAnalyzer::default();
        let f = a.router_features("Did Person A direct Film X?", "", "x");
        assert_eq!(f.q_ynstart, 1);
        assert_eq!(f.q_entity_count, 2);
    }

    #[test]
    fn whole_single_sentence_bridge() {
        let a = TextAnalyzer::default();
        let body = "Film X was directed by Person Y.";
        let f = a.router_features("Who directed Film X?", body, body);
        assert_eq!(f.b_rel_frac, 1.0);
        assert_eq!(f.b_new_entity_count, 1);
        assert_eq!(f.q_comparison_word, 0);
    }

    #[test]
    fn partial_bridge_fraction() {
        let a = TextAnalyzer::default();
        let body = "Film X is a drama. Film X was directed by Person Y.";
        let f = a.router_features("Who directed Film X?", "Film X was directed by Person Y.", body);
        assert!((f.b_rel_frac - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn relation_sentence_features() {
        let a = TextAnalyzer::default();
        let f = a.sentence_features("Film X was directed by Person Y.", "Who directed Film X?", 0, 1);
        assert_eq!(f.new_entity_count, 1);
        assert_eq!(f.has_relation_verb, 1);
        assert_eq!(f.position_frac, 0.0);
        assert_eq!(f.length_tokens, 7);
        assert!((f.ne_density - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn position_fraction_endpoints() {
        let a = TextAnalyzer::default();
        assert_eq!(a.sentence_features("x.", "q", 3, 4).position_frac, 1.0);
        assert!((a.sentence_features("x.", "q", 1, 3).position_frac - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stopword_sentence_has_zero_density() {
        let a = TextAnalyzer::default();
        let f = a.sentence_features("The A An.", "q", 0, 1);
        assert_eq!(f.ne_density, 0.0);
        assert_eq!(f.has_relation_verb, 0);
    }
}
