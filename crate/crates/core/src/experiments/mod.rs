//! Evaluation protocols over a fully materialized dataset and vector store:
//! main evaluation, oracle decomposition, ablations, threshold sweep,
//! bridge knockout, margin calibration and regime analyses.
//!
//! Embedding ids follow one convention throughout. A question is stored in
//! query mode under its query id, a passage in document mode under its
//! passage id (text from [`passage_doc_text`]), and any other text used as a
//! query (selected sentences, whole bridges, knockout variants) in query
//! mode under [`text_key`] of the text.

mod calibration;
mod knockout;
mod output;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use calibration::{
    annotation_agreement, compute_margins, margin_calibration, mixture_decomposition, prevalence_weighted_delta,
    regime_assignment_eval, synthetic_calibration, CalibrationReport, MarginRecord, RegimeAgreement, RegimeRow,
    RegimeTable, SigmaMode, SyntheticCalibration, SyntheticParams, TypeCalibration,
};
pub use knockout::{minus_variant, run_knockout, KnockoutRecord, KnockoutReport, KnockoutSummary};
pub use output::{write_csv, write_json};

use crate::corpus::{Dataset, Passage, Query, QueryType};
use crate::embedding::{text_key, Mode, VectorStore};
use crate::error::{Error, Result};
use crate::linear_model::LinearModel;
use crate::routing::{
    decide, fuse_scores, prepare, question_scores, self_supervised_label, Action, AlphaMode, LabelMode, Prepared,
    RankedList, RouterConfig, UnionProbability,
};
use crate::stats::{paired_outcomes, McNemar};
use crate::text::{RouterFeatures, TextAnalyzer};

/// Everything a routed evaluation reads.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub analyzer: &'a TextAnalyzer,
    pub dataset: &'a Dataset,
    pub store: &'a VectorStore,
    pub selector: &'a LinearModel,
    pub router: UnionProbability<'a>,
    pub cfg: RouterConfig,
}

/// Document-mode text for a passage.
pub fn passage_doc_text(p: &Passage) -> String {
    format!("{}\n{}", p.title, p.body)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequiredText {
    pub id: String,
    pub mode: Mode,
    pub text: String,
}

/// Which derived texts an experiment scores with, beyond questions and
/// passages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TextNeeds {
    pub selected: bool,
    pub oracle: bool,
    pub full_bridge: bool,
    pub minus: bool,
}

impl TextNeeds {
    pub const ALL: TextNeeds = TextNeeds {
        selected: true,
        oracle: true,
        full_bridge: true,
        minus: true,
    };
}

/// Texts to embed for the given needs, deduplicated and sorted by
/// `(id, mode)`. `selected` and `minus` need a selector model.
pub fn required_texts(
    analyzer: &TextAnalyzer,
    ds: &Dataset,
    selector: Option<&LinearModel>,
    needs: TextNeeds,
) -> Result<Vec<RequiredText>> {
    let mut out: BTreeMap<(String, Mode), String> = BTreeMap::new();
    let query_text = |out: &mut BTreeMap<(String, Mode), String>, text: &str| {
        if !text.is_empty() {
            out.insert((text_key(text), Mode::Query), text.to_string());
        }
    };
    for q in &ds.queries {
        out.insert((q.id.clone(), Mode::Query), q.question.clone());
        let bridge = ds.bridge(q)?;
        for pid in q.pool_ids.iter().chain([&q.gold_id]) {
            if let Some(p) = ds.passage(pid) {
                out.insert((pid.clone(), Mode::Doc), passage_doc_text(p));
            }
        }
        if needs.full_bridge {
            query_text(&mut out, &bridge.body);
        }
        if needs.oracle {
            if let Some(i) = analyzer.first_sentence_containing(&bridge.body, &q.hop2_title) {
                query_text(&mut out, &analyzer.split_sentences(&bridge.body)[i].text);
            }
        }
        if needs.selected || needs.minus {
            let model = selector.ok_or_else(|| Error::Invalid("selected-sentence texts need a selector model".into()))?;
            let sel = crate::selector::select(analyzer, bridge, &q.question, model, 0.0)?;
            if let Some(c) = &sel.chosen {
                if needs.selected {
                    query_text(&mut out, &c.text);
                }
                if needs.minus && analyzer.split_sentences(&bridge.body).len() > 1 {
                    query_text(&mut out, &minus_variant(&bridge.body, c.start, c.end));
                }
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|((id, mode), text)| RequiredText { id, mode, text })
        .collect())
}

pub fn missing_texts<'r>(store: &VectorStore, required: &'r [RequiredText]) -> Vec<&'r RequiredText> {
    required.iter().filter(|r| !store.contains(&r.id, r.mode)).collect()
}

/// Errors with a listing of the first missing texts, if any.
pub fn ensure_embedded(store: &VectorStore, required: &[RequiredText]) -> Result<()> {
    let missing = missing_texts(store, required);
    if missing.is_empty() {
        return Ok(());
    }
    const SHOWN: usize = 10;
    let mut listed: Vec<String> = missing
        .iter()
        .take(SHOWN)
        .map(|r| {
            let excerpt: String = r.text.chars().take(40).collect();
            format!("{} [{}] {:?}", r.id, r.mode.as_str(), excerpt)
        })
        .collect();
    if missing.len() > SHOWN {
        listed.push(format!("... and {} more", missing.len() - SHOWN));
    }
    Err(Error::MissingTexts(listed))
}

/// Per-query work shared by every policy.
struct QueryState<'q> {
    query: &'q Query,
    bridge: &'q Passage,
    prepared: Prepared,
    p_union: f64,
    q_scores: Vec<f64>,
    /// Pool scores of the selected sentence; absent when the selector abstained.
    rel_scores: Option<Vec<f64>>,
}

fn gold_rank(query: &Query, scores: &[f64], k: usize) -> Result<Option<usize>> {
    Ok(RankedList::new(&query.pool_ids, scores, k)?.rank_of(&query.gold_id))
}

fn is_hit(rank: Option<usize>, k: usize) -> bool {
    rank.is_some_and(|r| r <= k)
}

impl QueryState<'_> {
    fn q_rank(&self, k: usize) -> Result<Option<usize>> {
        gold_rank(self.query, &self.q_scores, k)
    }

    /// Gold rank under the Union action; falls back to Q when the selector
    /// abstained.
    fn union_rank(&self, alpha: f64, k: usize) -> Result<Option<usize>> {
        match &self.rel_scores {
            Some(rel) => gold_rank(self.query, &fuse_scores(&self.q_scores, rel, alpha)?, k),
            None => self.q_rank(k),
        }
    }
}

fn query_states<'q>(ctx: &EvalContext<'q>) -> Result<Vec<QueryState<'q>>> {
    ctx.cfg.validate()?;
    let needs = TextNeeds {
        selected: true,
        ..Default::default()
    };
    ensure_embedded(ctx.store, &required_texts(ctx.analyzer, ctx.dataset, Some(ctx.selector), needs)?)?;
    ctx.dataset
        .queries
        .par_iter()
        .map(|query| {
            let bridge = ctx.dataset.bridge(query)?;
            let prepared = prepare(ctx.analyzer, query, bridge, ctx.selector, ctx.cfg.abstain_threshold)?;
            let p_union = ctx.router.get(&query.id, &prepared.features)?;
            let q_scores = question_scores(query, ctx.store)?;
            let rel_scores = match &prepared.selection.chosen {
                Some(c) => Some(ctx.store.score(&text_key(&c.text), Mode::Query, &query.pool_ids)?),
                None => None,
            };
            Ok(QueryState {
                query,
                bridge,
                prepared,
                p_union,
                q_scores,
                rel_scores,
            })
        })
        .collect()
}

/// A rule deciding, per query, between question-only and fused scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum Policy {
    QOnly,
    /// Union with the selected sentence for every query.
    Unrouted { alpha: f64 },
    /// Union with the whole bridge body for every query.
    FullBridge { alpha: f64 },
    Routed { tau: f64, alpha: f64, alpha_mode: AlphaMode },
    /// Union iff the selected sentence names a new entity and the question
    /// has no comparison word.
    NeHeuristic { alpha: f64 },
    /// Per-query best of Q and Union.
    OracleRouter { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyOutcome {
    pub query_ids: Vec<String>,
    pub hits: Vec<bool>,
    /// Queries scored with the Union action.
    pub union: Vec<bool>,
}

impl PolicyOutcome {
    pub fn r_at_k(&self) -> f64 {
        fraction(&self.hits)
    }

    pub fn union_rate(&self) -> f64 {
        fraction(&self.union)
    }
}

fn fraction(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        0.0
    } else {
        flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64
    }
}

fn apply_policy(ctx: &EvalContext, states: &[QueryState], policy: Policy) -> Result<PolicyOutcome> {
    let k = ctx.cfg.k;
    let rows: Vec<(bool, bool)> = states
        .par_iter()
        .map(|s| -> Result<(bool, bool)> {
            let has_rel = s.rel_scores.is_some();
            match policy {
                Policy::QOnly => Ok((is_hit(s.q_rank(k)?, k), false)),
                Policy::Unrouted { alpha } => Ok((is_hit(s.union_rank(alpha, k)?, k), has_rel)),
                Policy::FullBridge { alpha } => {
                    let full = ctx.store.score(&text_key(&s.bridge.body), Mode::Query, &s.query.pool_ids)?;
                    let fused = fuse_scores(&s.q_scores, &full, alpha)?;
                    Ok((is_hit(gold_rank(s.query, &fused, k)?, k), true))
                }
                Policy::Routed { tau, alpha, alpha_mode } => {
                    let cfg = RouterConfig {
                        tau,
                        alpha,
                        alpha_mode,
                        ..ctx.cfg
                    };
                    let d = decide(s.prepared.clone(), s.p_union, &cfg);
                    let rank = match d.action {
                        Action::Union => s.union_rank(d.alpha_used, k)?,
                        Action::Q => s.q_rank(k)?,
                    };
                    Ok((is_hit(rank, k), d.action == Action::Union))
                }
                Policy::NeHeuristic { alpha } => {
                    let f = &s.prepared.features;
                    if has_rel && f.b_new_entity_count >= 1 && f.q_comparison_word == 0 {
                        Ok((is_hit(s.union_rank(alpha, k)?, k), true))
                    } else {
                        Ok((is_hit(s.q_rank(k)?, k), false))
                    }
                }
                Policy::OracleRouter { alpha } => {
                    let q_hit = is_hit(s.q_rank(k)?, k);
                    let u_hit = is_hit(s.union_rank(alpha, k)?, k);
                    Ok((q_hit || u_hit, !q_hit && u_hit))
                }
            }
        })
        .collect::<Result<_>>()?;
    Ok(PolicyOutcome {
        query_ids: states.iter().map(|s| s.query.id.clone()).collect(),
        hits: rows.iter().map(|r| r.0).collect(),
        union: rows.iter().map(|r| r.1).collect(),
    })
}

pub fn evaluate_policy(ctx: &EvalContext, policy: Policy) -> Result<PolicyOutcome> {
    let states = query_states(ctx)?;
    apply_policy(ctx, &states, policy)
}

fn deployed_policy(cfg: &RouterConfig) -> Policy {
    Policy::Routed {
        tau: cfg.tau,
        alpha: cfg.alpha,
        alpha_mode: cfg.alpha_mode,
    }
}

/// One routed query, flat so it can go to CSV as well as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub query_id: String,
    pub qtype: QueryType,
    pub q_comparison_word: u8,
    pub q_ynstart: u8,
    pub q_entity_count: u32,
    pub b_new_entity_count: u32,
    pub b_rel_frac: f64,
    pub selected_index: Option<usize>,
    pub selector_confidence: Option<f64>,
    pub p_union: f64,
    pub action: Action,
    pub alpha_used: f64,
    pub gold_rank_q: Option<usize>,
    /// Gold rank had the Union action been taken (with `alpha_used`).
    pub gold_rank_union: Option<usize>,
    pub hit_q: bool,
    pub hit_router: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n: usize,
    pub k: usize,
    pub r_at_k_q: f64,
    pub r_at_k_router: f64,
    pub delta: f64,
    pub delta_pp: f64,
    /// Queries only the router gets right.
    pub wins: u64,
    /// Queries only the question-only baseline gets right.
    pub losses: u64,
    pub mcnemar: McNemar,
    /// Fraction of queries sent to Union.
    pub routing_rate: f64,
    pub abstentions: usize,
    /// Sorted by query id.
    pub traces: Vec<QueryTrace>,
}

pub fn run_main_eval(ctx: &EvalContext) -> Result<EvalReport> {
    let k = ctx.cfg.k;
    let states = query_states(ctx)?;
    let mut traces: Vec<QueryTrace> = states
        .par_iter()
        .map(|s| -> Result<QueryTrace> {
            let d = decide(s.prepared.clone(), s.p_union, &ctx.cfg);
            let gold_rank_q = s.q_rank(k)?;
            let gold_rank_union = match s.rel_scores {
                Some(_) => s.union_rank(d.alpha_used, k)?,
                None => None,
            };
            let routed_rank = match d.action {
                Action::Union => gold_rank_union,
                Action::Q => gold_rank_q,
            };
            let f: RouterFeatures = d.features;
            let chosen = d.selection.chosen.as_ref();
            Ok(QueryTrace {
                query_id: s.query.id.clone(),
                qtype: s.query.qtype,
                q_comparison_word: f.q_comparison_word,
                q_ynstart: f.q_ynstart,
                q_entity_count: f.q_entity_count,
                b_new_entity_count: f.b_new_entity_count,
                b_rel_frac: f.b_rel_frac,
                selected_index: chosen.map(|c| c.index),
                selector_confidence: chosen.map(|c| c.confidence),
                p_union: d.p_union,
                action: d.action,
                alpha_used: d.alpha_used,
                gold_rank_q,
                gold_rank_union,
                hit_q: is_hit(gold_rank_q, k),
                hit_router: is_hit(routed_rank, k),
            })
        })
        .collect::<Result<_>>()?;
    traces.sort_by(|a, b| a.query_id.cmp(&b.query_id));

    let base: Vec<bool> = traces.iter().map(|t| t.hit_q).collect();
    let routed: Vec<bool> = traces.iter().map(|t| t.hit_router).collect();
    let mcnemar = paired_outcomes(&base, &routed);
    let r_q = fraction(&base);
    let r_router = fraction(&routed);
    Ok(EvalReport {
        dataset: ctx.dataset.name.clone(),
        n: traces.len(),
        k,
        r_at_k_q: r_q,
        r_at_k_router: r_router,
        delta: r_router - r_q,
        delta_pp: 100.0 * (r_router - r_q),
        wins: mcnemar.wins,
        losses: mcnemar.losses,
        mcnemar,
        routing_rate: fraction(&traces.iter().map(|t| t.action == Action::Union).collect::<Vec<_>>()),
        abstentions: states.iter().filter(|s| s.prepared.selection.abstained).count(),
        traces,
    })
}

/// One condition of an ablation or oracle table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: String,
    pub r_at_k: f64,
    /// Difference from the question-only baseline, in percentage points.
    pub delta_pp: f64,
    pub union_rate: f64,
}

fn row(condition: &str, outcome: &PolicyOutcome, baseline: f64) -> AblationRow {
    AblationRow {
        condition: condition.into(),
        r_at_k: outcome.r_at_k(),
        delta_pp: 100.0 * (outcome.r_at_k() - baseline),
        union_rate: outcome.union_rate(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub rows: Vec<AblationRow>,
    /// Oracle router minus learned router, in points.
    pub routing_gap_pp: f64,
    /// Oracle selector minus learned router, in points.
    pub selector_gap_pp: f64,
    /// Fraction of queries whose bridge has no sentence naming the hop-2 title.
    pub no_oracle_sentence_rate: f64,
}

/// Baseline, learned router, learned router fed the oracle sentence, and
/// the per-query best action.
pub fn run_oracle_analysis(ctx: &EvalContext) -> Result<OracleReport> {
    let k = ctx.cfg.k;
    let needs = TextNeeds {
        selected: true,
        oracle: true,
        ..Default::default()
    };
    ensure_embedded(ctx.store, &required_texts(ctx.analyzer, ctx.dataset, Some(ctx.selector), needs)?)?;
    let states = query_states(ctx)?;
    let baseline = apply_policy(ctx, &states, Policy::QOnly)?;
    let learned = apply_policy(ctx, &states, deployed_policy(&ctx.cfg))?;
    let oracle_router = apply_policy(ctx, &states, Policy::OracleRouter { alpha: ctx.cfg.alpha })?;

    let oracle_rows: Vec<(bool, bool, bool)> = states
        .par_iter()
        .zip(learned.hits.par_iter().zip(&learned.union))
        .map(|(s, (&learned_hit, &learned_union))| -> Result<(bool, bool, bool)> {
            let Some(idx) = ctx.analyzer.first_sentence_containing(&s.bridge.body, &s.query.hop2_title) else {
                return Ok((learned_hit, learned_union, false));
            };
            let sentence = &ctx.analyzer.split_sentences(&s.bridge.body)[idx].text;
            let features = ctx.analyzer.router_features(&s.query.question, sentence, &s.bridge.body);
            let p = ctx.router.get(&s.query.id, &features)?;
            if p >= ctx.cfg.tau {
                let rel = ctx.store.score(&text_key(sentence), Mode::Query, &s.query.pool_ids)?;
                let fused = fuse_scores(&s.q_scores, &rel, ctx.cfg.alpha_for(p))?;
                Ok((is_hit(gold_rank(s.query, &fused, k)?, k), true, true))
            } else {
                Ok((is_hit(s.q_rank(k)?, k), false, true))
            }
        })
        .collect::<Result<_>>()?;
    let oracle_selector = PolicyOutcome {
        query_ids: learned.query_ids.clone(),
        hits: oracle_rows.iter().map(|r| r.0).collect(),
        union: oracle_rows.iter().map(|r| r.1).collect(),
    };
    let covered = oracle_rows.iter().filter(|r| r.2).count();

    let b = baseline.r_at_k();
    Ok(OracleReport {
        rows: vec![
            row("q_only", &baseline, b),
            row("learned_router", &learned, b),
            row("oracle_selector", &oracle_selector, b),
            row("oracle_router", &oracle_router, b),
        ],
        routing_gap_pp: 100.0 * (oracle_router.r_at_k() - learned.r_at_k()),
        selector_gap_pp: 100.0 * (oracle_selector.r_at_k() - learned.r_at_k()),
        no_oracle_sentence_rate: if states.is_empty() {
            0.0
        } else {
            1.0 - covered as f64 / states.len() as f64
        },
    })
}

/// The six ablation conditions: question only, full bridge and unrouted
/// sentence at alpha 0.5, routed at 0.5 and 0.25, and the entity-count
/// heuristic router.
pub fn run_ablations(ctx: &EvalContext) -> Result<Vec<AblationRow>> {
    let needs = TextNeeds {
        selected: true,
        full_bridge: true,
        ..Default::default()
    };
    ensure_embedded(ctx.store, &required_texts(ctx.analyzer, ctx.dataset, Some(ctx.selector), needs)?)?;
    let states = query_states(ctx)?;
    let routed = |alpha| Policy::Routed {
        tau: ctx.cfg.tau,
        alpha,
        alpha_mode: AlphaMode::Frozen,
    };
    let conditions = [
        ("q_only", Policy::QOnly),
        ("full_bridge_alpha_0.5", Policy::FullBridge { alpha: 0.5 }),
        ("b_rel_unrouted_alpha_0.5", Policy::Unrouted { alpha: 0.5 }),
        ("b_rel_routed_alpha_0.5", routed(0.5)),
        ("b_rel_routed_alpha_0.25", routed(0.25)),
        ("ne_heuristic", Policy::NeHeuristic { alpha: 0.25 }),
    ];
    let outcomes: Vec<PolicyOutcome> = conditions
        .iter()
        .map(|(_, p)| apply_policy(ctx, &states, *p))
        .collect::<Result<_>>()?;
    let b = outcomes[0].r_at_k();
    Ok(conditions
        .iter()
        .zip(&outcomes)
        .map(|((name, _), o)| row(name, o, b))
        .collect())
}

/// `0.50, 0.55, ..., 0.75`.
pub fn default_taus() -> Vec<f64> {
    (0..=5).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub r_at_k: f64,
    pub delta_pp: f64,
    pub union_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Reference endpoints: every query on Q, every query on Union.
    pub all_q_r_at_k: f64,
    pub all_union_r_at_k: f64,
}

pub fn threshold_sweep(ctx: &EvalContext, taus: &[f64]) -> Result<SweepReport> {
    let states = query_states(ctx)?;
    let all_q = apply_policy(ctx, &states, Policy::QOnly)?;
    let all_union = apply_policy(ctx, &states, Policy::Unrouted { alpha: ctx.cfg.alpha })?;
    let b = all_q.r_at_k();
    let rows = taus
        .iter()
        .map(|&tau| {
            let o = apply_policy(
                ctx,
                &states,
                Policy::Routed {
                    tau,
                    alpha: ctx.cfg.alpha,
                    alpha_mode: ctx.cfg.alpha_mode,
                },
            )?;
            Ok(SweepRow {
                tau,
                r_at_k: o.r_at_k(),
                delta_pp: 100.0 * (o.r_at_k() - b),
                union_rate: o.union_rate(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport {
        rows,
        all_q_r_at_k: b,
        all_union_r_at_k: all_union.r_at_k(),
    })
}

/// Router features and self-supervised labels, one row per query in
/// dataset order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouterTrainingSet {
    pub query_ids: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<u8>,
}

pub fn router_training_set(
    analyzer: &TextAnalyzer,
    ds: &Dataset,
    store: &VectorStore,
    selector: &LinearModel,
    alpha: f64,
    k: usize,
    mode: LabelMode,
) -> Result<RouterTrainingSet> {
    let needs = TextNeeds {
        selected: true,
        ..Default::default()
    };
    ensure_embedded(store, &required_texts(analyzer, ds, Some(selector), needs)?)?;
    let rows: Vec<(Vec<f64>, u8)> = ds
        .queries
        .par_iter()
        .map(|q| {
            let bridge = ds.bridge(q)?;
            let prepared = prepare(analyzer, q, bridge, selector, 0.0)?;
            let label = self_supervised_label(analyzer, q, bridge, store, selector, alpha, k, mode)?;
            Ok((prepared.features.to_vec(), label))
        })
        .collect::<Result<_>>()?;
    let (x, y) = rows.into_iter().unzip();
    Ok(RouterTrainingSet {
        query_ids: ds.queries.iter().map(|q| q.id.clone()).collect(),
        x,
        y,
    })
}
