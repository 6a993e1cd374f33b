//! The deployment pipeline: select a relation sentence, extract router
//! features, choose between question-only and fused scoring, rank the pool.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, Query};
use crate::embedding::{text_key, Mode, VectorStore};
use crate::error::{Error, Result};
use crate::linear_model::LinearModel;
use crate::selector::{select, SelectionResult};
use crate::text::{RouterFeatures, TextAnalyzer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Q,
    Union,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    #[default]
    Frozen,
    PWeighted,
}

impl std::str::FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(AlphaMode::Frozen),
            "p_weighted" | "p-weighted" => Ok(AlphaMode::PWeighted),
            other => Err(Error::Invalid(format!("unknown alpha mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub tau: f64,
    pub alpha: f64,
    pub alpha_mode: AlphaMode,
    pub k: usize,
    pub abstain_threshold: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            tau: 0.5,
            alpha: 0.25,
            alpha_mode: AlphaMode::Frozen,
            k: 5,
            abstain_threshold: 0.0,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !self.tau.is_finite() {
            return Err(Error::Invalid("tau must be finite".into()));
        }
        if self.k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        Ok(())
    }

    /// Fusion weight for a query with router probability `p_union`.
    pub fn alpha_for(&self, p_union: f64) -> f64 {
        match self.alpha_mode {
            AlphaMode::Frozen => self.alpha,
            AlphaMode::PWeighted => p_weighted_alpha(p_union),
        }
    }
}

/// `clip(p * 0.5, 0.1, 0.5)`.
pub fn p_weighted_alpha(p_union: f64) -> f64 {
    (p_union * 0.5).clamp(0.1, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub action: Action,
    pub p_union: f64,
    pub alpha_used: f64,
    pub features: RouterFeatures,
    pub selection: SelectionResult,
}

impl RoutingDecision {
    /// Store key of the selected sentence's query-mode embedding.
    pub fn b_rel_key(&self) -> Option<String> {
        self.selection.chosen.as_ref().map(|c| text_key(&c.text))
    }
}

/// Selection plus features: everything routing needs before a probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub selection: SelectionResult,
    pub features: RouterFeatures,
}

pub fn prepare(
    analyzer: &TextAnalyzer,
    query: &Query,
    bridge: &Passage,
    selector_model: &LinearModel,
    abstain_threshold: f64,
) -> Result<Prepared> {
    let selection = select(analyzer, bridge, &query.question, selector_model, abstain_threshold)?;
    let features = analyzer.router_features(&query.question, selection.text(), &bridge.body);
    Ok(Prepared { selection, features })
}

/// Applies the threshold rule. An abstaining selector forces `Q`.
pub fn decide(prepared: Prepared, p_union: f64, cfg: &RouterConfig) -> RoutingDecision {
    let action = if !prepared.selection.abstained && p_union >= cfg.tau {
        Action::Union
    } else {
        Action::Q
    };
    RoutingDecision {
        action,
        p_union,
        alpha_used: cfg.alpha_for(p_union),
        features: prepared.features,
        selection: prepared.selection,
    }
}

pub fn route(
    analyzer: &TextAnalyzer,
    query: &Query,
    bridge: &Passage,
    selector_model: &LinearModel,
    router_model: &LinearModel,
    cfg: &RouterConfig,
) -> Result<RoutingDecision> {
    router_model.expect_features(&RouterFeatures::NAMES)?;
    let prepared = prepare(analyzer, query, bridge, selector_model, cfg.abstain_threshold)?;
    let p_union = router_model.predict_proba(&prepared.features.to_vec())?;
    Ok(decide(prepared, p_union, cfg))
}

/// `(1 - alpha) * q + alpha * b`, element-wise.
pub fn fuse_scores(q_scores: &[f64], brel_scores: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if q_scores.len() != brel_scores.len() {
        return Err(Error::LengthMismatch {
            left: q_scores.len(),
            right: brel_scores.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(q_scores
        .iter()
        .zip(brel_scores)
        .map(|(q, b)| (1.0 - alpha) * q + alpha * b)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    /// Every candidate, best first.
    pub entries: Vec<(String, f64)>,
    pub k: usize,
}

impl RankedList {
    /// Sorts by descending score; equal scores order by candidate id.
    pub fn new(ids: &[String], scores: &[f64], k: usize) -> Result<Self> {
        if ids.len() != scores.len() {
            return Err(Error::LengthMismatch {
                left: ids.len(),
                right: scores.len(),
            });
        }
        let mut entries: Vec<(String, f64)> = ids.iter().cloned().zip(scores.iter().copied()).collect();
        entries.sort_by(|a, b| match b.1.total_cmp(&a.1) {
            Ordering::Equal => a.0.cmp(&b.0),
            o => o,
        });
        Ok(RankedList { entries, k })
    }

    pub fn top_k(&self) -> &[(String, f64)] {
        &self.entries[..self.k.min(self.entries.len())]
    }

    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|(c, _)| c == id).map(|p| p + 1)
    }
}

pub fn recall_at_k(ranked: &RankedList, gold_id: &str, k: usize) -> bool {
    ranked.entries.iter().take(k).any(|(c, _)| c == gold_id)
}

/// Pool scores for the question alone.
pub fn question_scores(query: &Query, store: &VectorStore) -> Result<Vec<f64>> {
    store.score(&query.id, Mode::Query, &query.pool_ids)
}

/// Pool scores fused with the query-mode vector stored under `text_id`.
pub fn fused_scores(query: &Query, text_id: &str, alpha: f64, store: &VectorStore) -> Result<Vec<f64>> {
    let q = question_scores(query, store)?;
    let b = store.score(text_id, Mode::Query, &query.pool_ids)?;
    fuse_scores(&q, &b, alpha)
}

/// Ranks the pool under the decided action.
pub fn retrieve(query: &Query, decision: &RoutingDecision, store: &VectorStore, k: usize) -> Result<RankedList> {
    let scores = match (decision.action, decision.b_rel_key()) {
        (Action::Union, Some(key)) => fused_scores(query, &key, decision.alpha_used, store)?,
        _ => question_scores(query, store)?,
    };
    RankedList::new(&query.pool_ids, &scores, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Union hits at k while Q misses.
    #[default]
    StrictRecall,
    /// Union ranks the gold passage strictly higher than Q.
    RankGain,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict_recall" | "strict-recall" => Ok(LabelMode::StrictRecall),
            "rank_gain" | "rank-gain" => Ok(LabelMode::RankGain),
            other => Err(Error::Invalid(format!("unknown label mode '{other}'"))),
        }
    }
}

/// Self-supervised router label computed from embedding scores alone.
#[allow(clippy::too_many_arguments)]
pub fn self_supervised_label(
    analyzer: &TextAnalyzer,
    query: &Query,
    bridge: &Passage,
    store: &VectorStore,
    selector_model: &LinearModel,
    alpha: f64,
    k: usize,
    mode: LabelMode,
) -> Result<u8> {
    let selection = select(analyzer, bridge, &query.question, selector_model, 0.0)?;
    let Some(chosen) = selection.chosen else {
        return Ok(0);
    };
    let q_rank = RankedList::new(&query.pool_ids, &question_scores(query, store)?, k)?;
    let u_scores = fused_scores(query, &text_key(&chosen.text), alpha, store)?;
    let u_rank = RankedList::new(&query.pool_ids, &u_scores, k)?;
    let label = match mode {
        LabelMode::StrictRecall => recall_at_k(&u_rank, &query.gold_id, k) && !recall_at_k(&q_rank, &query.gold_id, k),
        LabelMode::RankGain => match (u_rank.rank_of(&query.gold_id), q_rank.rank_of(&query.gold_id)) {
            (Some(u), Some(q)) => u < q,
            _ => false,
        },
    };
    Ok(u8::from(label))
}

/// Where the router probability comes from during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum UnionProbability<'a> {
    Model(&'a LinearModel),
    /// Precomputed per-query probabilities, e.g. out-of-fold predictions.
    Table(&'a HashMap<String, f64>),
}

impl UnionProbability<'_> {
    pub fn get(&self, query_id: &str, features: &RouterFeatures) -> Result<f64> {
        match self {
            UnionProbability::Model(m) => m.predict_proba(&features.to_vec()),
            UnionProbability::Table(t) => t
                .get(query_id)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("no router probability for query '{query_id}'"))),
        }
    }
}
