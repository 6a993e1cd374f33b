use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ensure_embedded, required_texts, TextNeeds};
use crate::corpus::{Dataset, Query, QueryType};
use crate::embedding::{text_key, Mode, VectorStore};
use crate::error::{Error, Result};
use crate::linear_model::LinearModel;
use crate::routing::fuse_scores;
use crate::selector::select;
use crate::stats::{per_query_auc, separation_margin, sign_test, McNemar};
use crate::text::TextAnalyzer;

/// Bridge body with the byte span `start..end` removed, whitespace collapsed.
pub fn minus_variant(body: &str, start: usize, end: usize) -> String {
    let joined = format!("{} {}", &body[..start], &body[end..]);
    joined.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutRecord {
    pub query_id: String,
    pub qtype: QueryType,
    pub auc_full: f64,
    pub auc_rel: f64,
    pub auc_minus: f64,
    pub s_full: f64,
    pub s_rel: f64,
    pub s_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedQuery {
    pub query_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutSummary {
    pub n: usize,
    pub excluded: usize,
    pub mean_auc_full: f64,
    pub mean_auc_rel: f64,
    pub mean_auc_minus: f64,
    /// Mean of `auc_rel - auc_full`.
    pub mean_delta_rel: f64,
    /// Mean of `auc_minus - auc_full`.
    pub mean_delta_minus: f64,
    pub sign_test_rel: McNemar,
    pub sign_test_minus: McNemar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutReport {
    /// Weight of the bridge variant when fused with the question; 1 scores
    /// with the variant alone.
    pub alpha: f64,
    pub records: Vec<KnockoutRecord>,
    pub excluded: Vec<ExcludedQuery>,
    pub summary: KnockoutSummary,
}

enum Outcome {
    Kept(KnockoutRecord),
    Excluded(ExcludedQuery),
}

fn excluded(q: &Query, reason: &str) -> Outcome {
    Outcome::Excluded(ExcludedQuery {
        query_id: q.id.clone(),
        reason: reason.into(),
    })
}

/// Scores the gold passage and the rest of the pool with the variant text
/// fused into the question at `alpha`.
fn variant_auc(query: &Query, text: &str, alpha: f64, store: &VectorStore) -> Result<(f64, f64)> {
    let candidates: Vec<&str> = std::iter::once(query.gold_id.as_str())
        .chain(query.pool_ids.iter().map(String::as_str).filter(|p| *p != query.gold_id))
        .collect();
    let q = store.score(&query.id, Mode::Query, &candidates)?;
    let v = store.score(&text_key(text), Mode::Query, &candidates)?;
    let fused = fuse_scores(&q, &v, alpha)?;
    let auc = per_query_auc(fused[0], &fused[1..])?;
    let margin = separation_margin(fused[0], &fused[1..])?;
    Ok((auc, margin.s))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Compares retrieval with the full bridge, the selected sentence alone and
/// the bridge without that sentence. Single-sentence bridges, abstentions
/// and pools holding nothing but the gold passage are excluded.
pub fn run_knockout(
    analyzer: &TextAnalyzer,
    ds: &Dataset,
    store: &VectorStore,
    selector: &LinearModel,
    alpha: f64,
) -> Result<KnockoutReport> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let needs = TextNeeds {
        selected: true,
        full_bridge: true,
        minus: true,
        ..Default::default()
    };
    ensure_embedded(store, &required_texts(analyzer, ds, Some(selector), needs)?)?;

    let outcomes: Vec<Outcome> = ds
        .queries
        .par_iter()
        .map(|q| -> Result<Outcome> {
            let bridge = ds.bridge(q)?;
            if analyzer.split_sentences(&bridge.body).len() < 2 {
                return Ok(excluded(q, "single-sentence bridge"));
            }
            if q.pool_ids.iter().all(|p| *p == q.gold_id) {
                return Ok(excluded(q, "pool has no negatives"));
            }
            let sel = select(analyzer, bridge, &q.question, selector, 0.0)?;
            let Some(chosen) = sel.chosen else {
                return Ok(excluded(q, "selector abstained"));
            };
            let minus = minus_variant(&bridge.body, chosen.start, chosen.end);
            let (auc_full, s_full) = variant_auc(q, &bridge.body, alpha, store)?;
            let (auc_rel, s_rel) = variant_auc(q, &chosen.text, alpha, store)?;
            let (auc_minus, s_minus) = variant_auc(q, &minus, alpha, store)?;
            Ok(Outcome::Kept(KnockoutRecord {
                query_id: q.id.clone(),
                qtype: q.qtype,
                auc_full,
                auc_rel,
                auc_minus,
                s_full,
                s_rel,
                s_minus,
            }))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Kept(r) => records.push(r),
            Outcome::Excluded(e) => excluded.push(e),
        }
    }
    records.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    excluded.sort_by(|a, b| a.query_id.cmp(&b.query_id));

    let d_rel: Vec<f64> = records.iter().map(|r| r.auc_rel - r.auc_full).collect();
    let d_minus: Vec<f64> = records.iter().map(|r| r.auc_minus - r.auc_full).collect();
    let summary = KnockoutSummary {
        n: records.len(),
        excluded: excluded.len(),
        mean_auc_full: mean(records.iter().map(|r| r.auc_full)),
        mean_auc_rel: mean(records.iter().map(|r| r.auc_rel)),
        mean_auc_minus: mean(records.iter().map(|r| r.auc_minus)),
        mean_delta_rel: mean(d_rel.iter().copied()),
        mean_delta_minus: mean(d_minus.iter().copied()),
        sign_test_rel: sign_test(&d_rel),
        sign_test_minus: sign_test(&d_minus),
    };
    Ok(KnockoutReport {
        alpha,
        records,
        excluded,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minus_variant_collapses_whitespace() {
        let body = "One here.  Two there.\nThree.";
        let start = body.find("Two").unwrap();
        let end = start + "Two there.".len();
        assert_eq!(minus_variant(body, start, end), "One here. Three.");
        assert_eq!(minus_variant("Only.", 0, 5), "");
    }
}
