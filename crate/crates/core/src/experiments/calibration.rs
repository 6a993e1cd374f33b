use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ensure_embedded, required_texts, TextNeeds};
use crate::corpus::{Dataset, QueryType};
use crate::embedding::{text_key, Mode, VectorStore};
use crate::error::{Error, Result};
use crate::selector::Annotation;
use crate::stats::{
    calibration_fit, cantelli_check, cohen_kappa, inversion_accuracy, kendall_tau, per_query_auc, phi,
    separation_margin, Agreement, CalibrationFit, CantelliCheck, KendallTau, Margin,
};
use crate::text::{Regime, TextAnalyzer};

/// Question and bridge separation margins for one query. Each side has its
/// own pool standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub query_id: String,
    pub qtype: QueryType,
    pub s_q: f64,
    pub sigma_q: f64,
    pub auc_q: f64,
    pub s_b: f64,
    pub sigma_b: f64,
    pub auc_b: f64,
    /// One of the two pools has zero spread.
    pub degenerate: bool,
}

/// Margins and AUCs of the gold passage against the rest of the pool, under
/// the question and under the whole bridge body. Queries whose pool holds
/// no negatives are skipped. Sorted by query id.
pub fn compute_margins(analyzer: &TextAnalyzer, ds: &Dataset, store: &VectorStore) -> Result<Vec<MarginRecord>> {
    let needs = TextNeeds {
        full_bridge: true,
        ..Default::default()
    };
    ensure_embedded(store, &required_texts(analyzer, ds, None, needs)?)?;
    let rows: Vec<Option<MarginRecord>> = ds
        .queries
        .par_iter()
        .map(|q| -> Result<Option<MarginRecord>> {
            let candidates: Vec<&str> = std::iter::once(q.gold_id.as_str())
                .chain(q.pool_ids.iter().map(String::as_str).filter(|p| *p != q.gold_id))
                .collect();
            if candidates.len() < 2 {
                log::warn!("query {}: pool has no negatives, skipped", q.id);
                return Ok(None);
            }
            let bridge = ds.bridge(q)?;
            let sq = store.score(&q.id, Mode::Query, &candidates)?;
            let sb = store.score(&text_key(&bridge.body), Mode::Query, &candidates)?;
            let mq = separation_margin(sq[0], &sq[1..])?;
            let mb = separation_margin(sb[0], &sb[1..])?;
            Ok(Some(MarginRecord {
                query_id: q.id.clone(),
                qtype: q.qtype,
                s_q: mq.s,
                sigma_q: mq.sigma,
                auc_q: per_query_auc(sq[0], &sq[1..])?,
                s_b: mb.s,
                sigma_b: mb.sigma,
                auc_b: per_query_auc(sb[0], &sb[1..])?,
                degenerate: mq.degenerate || mb.degenerate,
            }))
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<MarginRecord> = rows.into_iter().flatten().collect();
    out.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Each query's own pool deviation.
    #[default]
    PerQuery,
    /// One pooled deviation, `sqrt(mean(sigma_i^2))`, for every query.
    Global,
}

impl std::str::FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_query" | "per-query" => Ok(SigmaMode::PerQuery),
            "global" => Ok(SigmaMode::Global),
            other => Err(Error::Invalid(format!("unknown sigma mode '{other}'"))),
        }
    }
}

fn margins_for(s: &[f64], sigma: &[f64], mode: SigmaMode) -> Vec<Margin> {
    let global = (sigma.iter().map(|x| x * x).sum::<f64>() / sigma.len().max(1) as f64).sqrt();
    s.iter()
        .zip(sigma)
        .map(|(&s, &sd)| {
            let sigma = match mode {
                SigmaMode::PerQuery => sd,
                SigmaMode::Global => global,
            };
            Margin {
                s,
                sigma,
                degenerate: sigma == 0.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeCalibration {
    pub qtype: QueryType,
    pub n: usize,
    pub mean_s_q: f64,
    pub mean_s_b: f64,
    pub mean_auc_q: f64,
    pub mean_auc_b: f64,
    /// Absent below three queries.
    pub fit_q: Option<CalibrationFit>,
    pub fit_b: Option<CalibrationFit>,
    /// Absent when undefined (fewer than two queries or all tied).
    pub kendall_q: Option<KendallTau>,
    pub kendall_b: Option<KendallTau>,
    /// Cantelli check on bridge AUCs with sigma their standard deviation.
    pub cantelli_b: Option<CantelliCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub sigma_mode: SigmaMode,
    pub cantelli_t: f64,
    pub n: usize,
    pub fit_q: CalibrationFit,
    pub fit_b: CalibrationFit,
    pub kendall_q: Option<KendallTau>,
    pub kendall_b: Option<KendallTau>,
    /// Inversion accuracy over pairs of queries of the same type.
    pub per_type: Vec<TypeCalibration>,
    /// Inversion accuracy over pairs of per-type means of predicted and
    /// observed AUC.
    pub type_mean_inversion_q: f64,
    pub type_mean_inversion_b: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

struct Side {
    margins: Vec<Margin>,
    aucs: Vec<f64>,
}

impl Side {
    fn predicted(&self) -> Vec<f64> {
        self.margins.iter().map(|m| phi(m.z())).collect()
    }

    fn fit(&self) -> Option<CalibrationFit> {
        calibration_fit(&self.margins, &self.aucs).ok()
    }

    fn kendall(&self) -> Option<KendallTau> {
        kendall_tau(&self.predicted(), &self.aucs).ok()
    }
}

fn sides(records: &[&MarginRecord], mode: SigmaMode) -> (Side, Side) {
    let col = |f: fn(&MarginRecord) -> f64| records.iter().map(|r| f(r)).collect::<Vec<f64>>();
    let q = Side {
        margins: margins_for(&col(|r| r.s_q), &col(|r| r.sigma_q), mode),
        aucs: col(|r| r.auc_q),
    };
    let b = Side {
        margins: margins_for(&col(|r| r.s_b), &col(|r| r.sigma_b), mode),
        aucs: col(|r| r.auc_b),
    };
    (q, b)
}

/// Calibration of `phi(S / sigma)` against empirical AUC, overall and per
/// query type, for both the question and the bridge.
pub fn margin_calibration(records: &[MarginRecord], mode: SigmaMode, cantelli_t: f64) -> Result<CalibrationReport> {
    let all: Vec<&MarginRecord> = records.iter().collect();
    let (q, b) = sides(&all, mode);
    let fit_q = calibration_fit(&q.margins, &q.aucs)?;
    let fit_b = calibration_fit(&b.margins, &b.aucs)?;

    let mut by_type: BTreeMap<QueryType, Vec<&MarginRecord>> = BTreeMap::new();
    for r in records {
        by_type.entry(r.qtype).or_default().push(r);
    }
    let mut per_type = Vec::new();
    let mut means = Vec::new();
    for (qtype, rs) in &by_type {
        let (tq, tb) = sides(rs, mode);
        let sd_b = {
            let m = mean(&tb.aucs);
            (tb.aucs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / tb.aucs.len() as f64).sqrt()
        };
        means.push((
            mean(&tq.predicted()),
            mean(&tq.aucs),
            mean(&tb.predicted()),
            mean(&tb.aucs),
        ));
        per_type.push(TypeCalibration {
            qtype: *qtype,
            n: rs.len(),
            mean_s_q: mean(&rs.iter().map(|r| r.s_q).collect::<Vec<_>>()),
            mean_s_b: mean(&rs.iter().map(|r| r.s_b).collect::<Vec<_>>()),
            mean_auc_q: mean(&tq.aucs),
            mean_auc_b: mean(&tb.aucs),
            fit_q: tq.fit(),
            fit_b: tb.fit(),
            kendall_q: tq.kendall(),
            kendall_b: tb.kendall(),
            cantelli_b: cantelli_check(&tb.aucs, sd_b, cantelli_t).ok(),
        });
    }
    let col = |i: usize| -> Vec<f64> {
        means
            .iter()
            .map(|m| match i {
                0 => m.0,
                1 => m.1,
                2 => m.2,
                _ => m.3,
            })
            .collect()
    };
    Ok(CalibrationReport {
        sigma_mode: mode,
        cantelli_t,
        n: records.len(),
        fit_q,
        fit_b,
        kendall_q: q.kendall(),
        kendall_b: b.kendall(),
        per_type,
        type_mean_inversion_q: inversion_accuracy(&col(0), &col(1)).0,
        type_mean_inversion_b: inversion_accuracy(&col(2), &col(3)).0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub qtype: QueryType,
    pub n: usize,
    pub prevalence: f64,
    /// Mean of `auc_q - auc_b` over the type.
    pub delta_q_minus_b: f64,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeTable {
    pub n: usize,
    /// Sorted by prevalence, largest first.
    pub rows: Vec<RegimeRow>,
    /// `sum(prevalence * delta)` with delta = `auc_q - auc_b`.
    pub aggregate_q_minus_b: f64,
    /// The same aggregate under the opposite sign convention.
    pub aggregate_b_minus_q: f64,
    /// Mean of `auc_q - auc_b` over all queries.
    pub micro_delta_q_minus_b: f64,
}

/// `sum(prevalence * delta)` over `(prevalence, delta)` rows.
pub fn prevalence_weighted_delta(rows: &[(f64, f64)]) -> f64 {
    rows.iter().map(|(p, d)| p * d).sum()
}

fn verdict(delta: f64) -> &'static str {
    if delta > 0.0 {
        Regime::QDominant.as_str()
    } else if delta < 0.0 {
        Regime::BDominant.as_str()
    } else {
        "neutral"
    }
}

/// Splits the aggregate question-minus-bridge AUC difference into per-type
/// prevalence and effect.
pub fn mixture_decomposition(per_query: &[(QueryType, f64, f64)]) -> Result<RegimeTable> {
    if per_query.is_empty() {
        return Err(Error::Degenerate("no queries to decompose".into()));
    }
    let n = per_query.len();
    let mut groups: BTreeMap<QueryType, Vec<f64>> = BTreeMap::new();
    for (t, q, b) in per_query {
        groups.entry(*t).or_default().push(q - b);
    }
    let mut rows: Vec<RegimeRow> = groups
        .into_iter()
        .map(|(qtype, deltas)| {
            let d = mean(&deltas);
            RegimeRow {
                qtype,
                n: deltas.len(),
                prevalence: deltas.len() as f64 / n as f64,
                delta_q_minus_b: d,
                verdict: verdict(d).into(),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.n.cmp(&a.n).then(a.qtype.cmp(&b.qtype)));
    let aggregate = prevalence_weighted_delta(&rows.iter().map(|r| (r.prevalence, r.delta_q_minus_b)).collect::<Vec<_>>());
    Ok(RegimeTable {
        n,
        aggregate_q_minus_b: aggregate,
        aggregate_b_minus_q: -aggregate,
        micro_delta_q_minus_b: mean(&per_query.iter().map(|(_, q, b)| q - b).collect::<Vec<_>>()),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeAgreement {
    pub n: usize,
    /// Queries with `s_q == s_b`, which have no margin-derived label.
    pub excluded_ties: usize,
    /// Fraction where the question-title proxy and the margin sign agree.
    pub agreement: f64,
    pub kappa: Agreement,
    /// Counts by full predicate regime, then margin-derived label.
    pub table: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Compares the title-in-question regime with the label given by the sign of
/// `s_q - s_b`. Uncovered queries count on the bridge side of the binary
/// comparison and keep their own row in `table`.
pub fn regime_assignment_eval(
    analyzer: &TextAnalyzer,
    ds: &Dataset,
    margins: &[MarginRecord],
) -> Result<RegimeAgreement> {
    let queries: HashMap<&str, _> = ds.queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut predicted = Vec::new();
    let mut observed = Vec::new();
    let mut table: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut ties = 0;
    for m in margins {
        let q = queries
            .get(m.query_id.as_str())
            .ok_or_else(|| Error::Invalid(format!("margin record for unknown query '{}'", m.query_id)))?;
        let delta = m.s_q - m.s_b;
        if delta == 0.0 {
            ties += 1;
            continue;
        }
        let obs = if delta > 0.0 { Regime::QDominant } else { Regime::BDominant };
        let regime = analyzer.assign_predicates(q, ds.bridge(q)?).regime;
        let pred = if regime == Regime::QDominant {
            Regime::QDominant
        } else {
            Regime::BDominant
        };
        *table
            .entry(regime.as_str().into())
            .or_default()
            .entry(obs.as_str().into())
            .or_default() += 1;
        predicted.push(pred.as_str());
        observed.push(obs.as_str());
    }
    let kappa = cohen_kappa(&predicted, &observed)?;
    Ok(RegimeAgreement {
        n: predicted.len(),
        excluded_ties: ties,
        agreement: kappa.observed,
        kappa,
        table,
    })
}

/// Cohen's kappa between two annotators' gold sentence indices, over the
/// `(bridge_id, question_id)` pairs both labelled.
pub fn annotation_agreement(a: &[Annotation], b: &[Annotation]) -> Result<Agreement> {
    let index: HashMap<(&str, &str), usize> = b
        .iter()
        .map(|x| ((x.bridge_id.as_str(), x.question_id.as_str()), x.gold_sentence_index))
        .collect();
    let (left, right): (Vec<usize>, Vec<usize>) = a
        .iter()
        .filter_map(|x| {
            index
                .get(&(x.bridge_id.as_str(), x.question_id.as_str()))
                .map(|&other| (x.gold_sentence_index, other))
        })
        .unzip();
    if left.is_empty() {
        return Err(Error::Degenerate("annotation files share no items".into()));
    }
    cohen_kappa(&left, &right)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub n: usize,
    pub pool_size: usize,
    pub sigma: f64,
    /// Standardized margins are drawn uniformly from `[-z_max, z_max]`.
    pub z_max: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            n: 10_000,
            pool_size: 200,
            sigma: 0.1,
            z_max: 5.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCalibration {
    pub params: SyntheticParams,
    pub fit: CalibrationFit,
    /// The same AUCs randomly re-paired with the margins.
    pub shuffled: CalibrationFit,
}

/// Draws a gold score `z * sigma` and a pool of `N(0, sigma^2)` scores per
/// query, then fits `phi(S / sigma)` to the empirical AUCs, using the
/// sample mean and deviation of each pool. Query `i` draws from stream `i`
/// of a ChaCha8 generator seeded with `seed`, so results do not depend on
/// thread scheduling.
pub fn synthetic_calibration(params: SyntheticParams) -> Result<SyntheticCalibration> {
    let SyntheticParams {
        n,
        pool_size,
        sigma,
        z_max,
        seed,
    } = params;
    if pool_size == 0 {
        return Err(Error::Invalid("pool size must be positive".into()));
    }
    if !(z_max >= 0.0 && z_max.is_finite()) {
        return Err(Error::Invalid(format!("z_max must be finite and non-negative, got {z_max}")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(format!("sigma {sigma}: {e}")))?;
    let draws: Vec<(Margin, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let z: f64 = if z_max > 0.0 { rng.random_range(-z_max..=z_max) } else { 0.0 };
            let gold = z * sigma;
            let pool: Vec<f64> = (0..pool_size).map(|_| rng.sample(normal)).collect();
            Ok((separation_margin(gold, &pool)?, per_query_auc(gold, &pool)?))
        })
        .collect::<Result<_>>()?;
    let (margins, aucs): (Vec<Margin>, Vec<f64>) = draws.into_iter().unzip();
    let fit = calibration_fit(&margins, &aucs)?;
    let mut shuffled_aucs = aucs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    shuffled_aucs.shuffle(&mut rng);
    let shuffled = calibration_fit(&margins, &shuffled_aucs)?;
    Ok(SyntheticCalibration { params, fit, shuffled })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reported_prevalence_arithmetic() {
        let rows = [(0.48, 0.650), (0.18, 0.0), (0.22, -0.108), (0.12, -0.118)];
        let agg = prevalence_weighted_delta(&rows);
        // 0.312 - 0.02376 - 0.01416
        assert!((agg - 0.27408).abs() < 1e-12, "{agg}");
    }

    #[test]
    fn single_type_and_symmetric_types() {
        let t = mixture_decomposition(&[(QueryType::Compositional, 0.7, 0.9), (QueryType::Compositional, 0.6, 0.6)]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert!((t.aggregate_q_minus_b - (-0.1)).abs() < 1e-12);
        assert_eq!(t.rows[0].verdict, "B_dominant");

        let t = mixture_decomposition(&[(QueryType::Comparison, 0.9, 0.6), (QueryType::Inference, 0.6, 0.9)]).unwrap();
        assert!(t.aggregate_q_minus_b.abs() < 1e-12);
        assert_eq!(t.aggregate_b_minus_q, -t.aggregate_q_minus_b);
    }

    #[test]
    fn aggregate_equals_micro_mean() {
        let data = [
            (QueryType::Comparison, 0.9, 0.2),
            (QueryType::Comparison, 0.8, 0.5),
            (QueryType::Comparison, 0.7, 0.1),
            (QueryType::Inference, 0.3, 0.9),
            (QueryType::Other, 0.5, 0.5),
        ];
        let t = mixture_decomposition(&data).unwrap();
        assert!((t.aggregate_q_minus_b - t.micro_delta_q_minus_b).abs() < 1e-12);
        assert_eq!(t.rows[0].qtype, QueryType::Comparison);
        assert_eq!(t.rows.iter().find(|r| r.qtype == QueryType::Other).unwrap().verdict, "neutral");
    }

    #[test]
    fn synthetic_is_seeded() {
        let p = SyntheticParams {
            n: 200,
            pool_size: 50,
            ..Default::default()
        };
        let a = synthetic_calibration(p).unwrap();
        let b = synthetic_calibration(p).unwrap();
        assert_eq!(a, b);
        assert!(a.fit.r_squared > 0.95, "{:?}", a.fit);
        assert!(a.shuffled.r_squared < 0.5, "{:?}", a.shuffled);
    }

    #[test]
    fn vanishing_pool_spread_saturates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0, 1e-9).unwrap();
        let pool: Vec<f64> = (0..200).map(|_| rng.sample(normal)).collect();
        let m = separation_margin(0.05, &pool).unwrap();
        assert_eq!(per_query_auc(0.05, &pool).unwrap(), 1.0);
        assert_eq!(phi(m.z()), 1.0);
    }

    #[test]
    fn annotation_kappa_over_shared_items() {
        let ann = |b: &str, i| Annotation {
            bridge_id: b.into(),
            question_id: format!("q{b}"),
            gold_sentence_index: i,
        };
        let a = vec![ann("1", 0), ann("2", 1), ann("3", 2)];
        let b = vec![ann("1", 0), ann("2", 1), ann("3", 2), ann("9", 0)];
        let k = annotation_agreement(&a, &b).unwrap();
        assert_eq!((k.n, k.kappa), (3, 1.0));
        assert!(annotation_agreement(&a, &[ann("9", 0)]).is_err());
    }
}
