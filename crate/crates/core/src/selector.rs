//! Relation-sentence selection over bridge passages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, Dataset, Passage};
use crate::error::{Error, Result};
use crate::linear_model::{contiguous_folds, train, LinearModel, TrainConfig};
use crate::text::{SentenceFeatures, TextAnalyzer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenSentence {
    pub text: String,
    pub index: usize,
    /// Byte span of the sentence in the passage body.
    pub start: usize,
    pub end: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: Option<ChosenSentence>,
    pub abstained: bool,
}

impl SelectionResult {
    fn abstain() -> Self {
        SelectionResult {
            chosen: None,
            abstained: true,
        }
    }

    pub fn text(&self) -> &str {
        self.chosen.as_ref().map(|c| c.text.as_str()).unwrap_or("")
    }
}

/// Index of the first sentence naming the hop-2 title, if any.
pub fn oracle_label(analyzer: &TextAnalyzer, bridge: &Passage, hop2_title: &str) -> Option<usize> {
    analyzer.first_sentence_containing(&bridge.body, hop2_title)
}

/// One line of `annotations.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub bridge_id: String,
    pub question_id: String,
    pub gold_sentence_index: usize,
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    read_jsonl(path)
}

/// A bridge passage, the question it serves, and the index of its
/// relation-bearing sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedPassage {
    pub bridge: Passage,
    pub question: String,
    pub gold_index: usize,
}

/// Joins annotation records with the dataset's passages and questions.
pub fn resolve_annotations(ds: &Dataset, annotations: &[Annotation]) -> Result<Vec<AnnotatedPassage>> {
    annotations
        .iter()
        .map(|a| {
            let bridge = ds
                .passage(&a.bridge_id)
                .ok_or_else(|| Error::DanglingIds(vec![a.bridge_id.clone()]))?;
            let question = ds
                .queries
                .iter()
                .find(|q| q.id == a.question_id)
                .ok_or_else(|| Error::Invalid(format!("annotation names unknown query '{}'", a.question_id)))?;
            Ok(AnnotatedPassage {
                bridge: bridge.clone(),
                question: question.question.clone(),
                gold_index: a.gold_sentence_index,
            })
        })
        .collect()
}

fn passage_rows(analyzer: &TextAnalyzer, body: &str, question: &str) -> Vec<Vec<f64>> {
    let sentences = analyzer.split_sentences(body);
    let total = sentences.len();
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| analyzer.sentence_features(&s.text, question, i, total).to_vec())
        .collect()
}

/// Per-sentence training rows: the gold sentence is labelled 1, the others 0.
pub fn expand_annotations(analyzer: &TextAnalyzer, annotated: &[AnnotatedPassage]) -> Result<(Vec<Vec<f64>>, Vec<u8>)> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (n, a) in annotated.iter().enumerate() {
        let rows = passage_rows(analyzer, &a.bridge.body, &a.question);
        if a.gold_index >= rows.len() {
            return Err(Error::Invalid(format!(
                "annotation {n} (passage '{}'): gold index {} but only {} sentences",
                a.bridge.id,
                a.gold_index,
                rows.len()
            )));
        }
        for (i, row) in rows.into_iter().enumerate() {
            x.push(row);
            y.push(u8::from(i == a.gold_index));
        }
    }
    Ok((x, y))
}

pub fn train_selector(analyzer: &TextAnalyzer, annotated: &[AnnotatedPassage], cfg: &TrainConfig) -> Result<LinearModel> {
    let (x, y) = expand_annotations(analyzer, annotated)?;
    train(&x, &y, &SentenceFeatures::NAMES, cfg)
}

/// Scores every sentence and returns the most probable one; ties go to the
/// lowest index. Abstains for passages without sentences or when the best
/// probability falls below `abstain_threshold`.
pub fn select(
    analyzer: &TextAnalyzer,
    bridge: &Passage,
    question: &str,
    model: &LinearModel,
    abstain_threshold: f64,
) -> Result<SelectionResult> {
    model.expect_features(&SentenceFeatures::NAMES)?;
    let sentences = analyzer.split_sentences(&bridge.body);
    let total = sentences.len();
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in sentences.iter().enumerate() {
        let f = analyzer.sentence_features(&s.text, question, i, total);
        let p = model.predict_proba(&f.to_vec())?;
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((i, p));
        }
    }
    match best {
        Some((i, p)) if p >= abstain_threshold => {
            let s = &sentences[i];
            Ok(SelectionResult {
                chosen: Some(ChosenSentence {
                    text: s.text.clone(),
                    index: i,
                    start: s.start,
                    end: s.end,
                    confidence: p,
                }),
                abstained: false,
            })
        }
        _ => Ok(SelectionResult::abstain()),
    }
}

/// Fraction of passages whose selected sentence is the annotated one.
pub fn selector_accuracy(analyzer: &TextAnalyzer, model: &LinearModel, annotated: &[AnnotatedPassage]) -> Result<f64> {
    if annotated.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for a in annotated {
        let r = select(analyzer, &a.bridge, &a.question, model, 0.0)?;
        if r.chosen.is_some_and(|c| c.index == a.gold_index) {
            hits += 1;
        }
    }
    Ok(hits as f64 / annotated.len() as f64)
}

/// Selector accuracy where each passage is scored by a model trained on the
/// other folds. Folds are contiguous runs of passages.
pub fn cross_fitted_selector_accuracy(
    analyzer: &TextAnalyzer,
    annotated: &[AnnotatedPassage],
    k: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let n = annotated.len();
    if k < 2 || n < k {
        return Err(Error::Invalid(format!("cross-fitting needs 2 <= k <= n (k={k}, n={n})")));
    }
    let mut hits = 0usize;
    for (f, held_out) in contiguous_folds(n, k).into_iter().enumerate() {
        let train_set: Vec<AnnotatedPassage> = annotated
            .iter()
            .enumerate()
            .filter(|(i, _)| !held_out.contains(i))
            .map(|(_, a)| a.clone())
            .collect();
        let model = train_selector(analyzer, &train_set, cfg).map_err(|e| Error::Fold {
            fold: f,
            source: Box::new(e),
        })?;
        for a in &annotated[held_out] {
            let r = select(analyzer, &a.bridge, &a.question, &model, 0.0)?;
            if r.chosen.is_some_and(|c| c.index == a.gold_index) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / n as f64)
}
