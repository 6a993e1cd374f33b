use serde::{Deserialize, Serialize};

use super::{normalize, TextAnalyzer};
use crate::corpus::{Passage, Query};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    QDominant,
    BDominant,
    Uncovered,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::QDominant => "Q_dominant",
            Regime::BDominant => "B_dominant",
            Regime::Uncovered => "uncovered",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateAssignment {
    pub p1: bool,
    pub p2: bool,
    pub regime: Regime,
}

impl PredicateAssignment {
    /// P1 alone decides Q-dominance; P2 only matters when P1 is false.
    pub fn new(p1: bool, p2: bool) -> Self {
        let regime = match (p1, p2) {
            (true, _) => Regime::QDominant,
            (false, true) => Regime::BDominant,
            (false, false) => Regime::Uncovered,
        };
        PredicateAssignment { p1, p2, regime }
    }
}

impl TextAnalyzer {
    /// Hop-2 title appears in the question (case- and whitespace-insensitive).
    pub fn p1_proxy(&self, q: &Query) -> bool {
        let title = normalize(&q.hop2_title);
        !title.is_empty() && normalize(&q.question).contains(&title)
    }

    /// Hop-2 title appears within a single sentence of the bridge body.
    pub fn p2_proxy(&self, bridge: &Passage, hop2_title: &str) -> bool {
        self.first_sentence_containing(&bridge.body, hop2_title).is_some()
    }

    /// Index of the first sentence of `body` containing the normalized title.
    pub fn first_sentence_containing(&self, body: &str, title: &str) -> Option<usize> {
        let title = normalize(title);
        if title.is_empty() {
            return None;
        }
        self.split_sentences(body)
            .iter()
            .position(|s| normalize(&s.text).contains(&title))
    }

    pub fn assign_predicates(&self, q: &Query, bridge: &Passage) -> PredicateAssignment {
        PredicateAssignment::new(self.p1_proxy(q), self.p2_proxy(bridge, &q.hop2_title))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::QueryType;

    fn query(question: &str, title: &str) -> Query {
        Query {
            id: "q".into(),
            question: question.into(),
            qtype: QueryType::Other,
            bridge_id: "b".into(),
            gold_id: "g".into(),
            pool_ids: vec![],
            hop2_title: title.into(),
        }
    }

    fn bridge(body: &str) -> Passage {
        Passage {
            id: "b".into(),
            title: "Film X".into(),
            body: body.into(),
        }
    }

    #[test]
    fn truth_table() {
        assert_eq!(PredicateAssignment::new(true, true).regime, Regime::QDominant);
        assert_eq!(PredicateAssignment::new(true, false).regime, Regime::QDominant);
        assert_eq!(PredicateAssignment::new(false, true).regime, Regime::BDominant);
        assert_eq!(PredicateAssignment::new(false, false).regime, Regime::Uncovered);
    }

    #[test]
    fn p1_verbatim_and_normalized() {
        let a = TextAnalyzer::default();
        assert!(a.p1_proxy(&query("Was Person Y born before 1950?", "Person Y")));
        assert!(a.p1_proxy(&query("Was person   y born before 1950?", " PERSON Y ")));
        assert!(!a.p1_proxy(&query("Who is the director of Film X?", "Person Y")));
        assert!(!a.p1_proxy(&query("Who is the director of Film X?", "  ")));
    }

    #[test]
    fn p2_sentence_containment() {
        let a = TextAnalyzer::default();
        assert!(a.p2_proxy(&bridge("Film X was directed by Person Y."), "Person Y"));
        assert!(!a.p2_proxy(&bridge("Film X is a 1990 drama."), "Person Y"));
        // The title straddles a sentence boundary: whole-body containment
        // holds, per-sentence containment does not.
        let split = bridge("Fans shouted Hello! World leaders listened.");
        assert!(normalize(&split.body).contains("hello! world"));
        assert!(!a.p2_proxy(&split, "Hello! World"));
    }

    #[test]
    fn first_sentence_lowest_index() {
        let a = TextAnalyzer::default();
        let body = "Alpha one. Person Y met Zed. Beta two. Person Y left.";
        assert_eq!(a.first_sentence_containing(body, "person y"), Some(1));
        assert_eq!(a.first_sentence_containing(body, "Nobody"), None);
    }
}
