mod common;

use std::collections::HashMap;

use hoproute_core::corpus::filter_hop1_correct;
use hoproute_core::experiments::{
    compute_margins, evaluate_policy, margin_calibration, mixture_decomposition, regime_assignment_eval,
    run_ablations, run_knockout, run_main_eval, run_oracle_analysis, threshold_sweep, EvalContext, Policy,
    SigmaMode,
};
use hoproute_core::routing::{AlphaMode, UnionProbability};

use common::{default_cfg, Fixture};

#[test]
fn router_that_routes_exactly_the_helped_queries() {
    let fx = Fixture::new(40, 41);
    let ctx = fx.ctx(default_cfg());
    let q = evaluate_policy(&ctx, Policy::QOnly).unwrap();
    let u = evaluate_policy(&ctx, Policy::Unrouted { alpha: 0.25 }).unwrap();
    let helped: HashMap<String, f64> = q
        .query_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), if !q.hits[i] && u.hits[i] { 1.0 } else { 0.0 }))
        .collect();
    let flipped = helped.values().filter(|p| **p == 1.0).count();
    assert!(flipped > 0);

    let ctx = EvalContext {
        router: UnionProbability::Table(&helped),
        ..ctx
    };
    let r = run_main_eval(&ctx).unwrap();
    assert_eq!(r.wins as usize, flipped);
    assert_eq!(r.losses, 0);
    let want = flipped as f64 / 40.0;
    assert!((r.delta - want).abs() < 1e-12, "{} vs {want}", r.delta);
    assert_eq!(r.routing_rate, want);

    let oracle = run_oracle_analysis(&ctx).unwrap();
    assert!(oracle.routing_gap_pp.abs() < 1e-9);
}

#[test]
fn main_eval_accounting() {
    let fx = Fixture::new(30, 42);
    let r = run_main_eval(&fx.model_ctx(default_cfg())).unwrap();
    assert_eq!(r.n, 30);
    let net = (r.wins as f64 - r.losses as f64) / 30.0;
    assert!((r.r_at_k_router - r.r_at_k_q - net).abs() < 1e-12);
    assert!((r.delta_pp - 100.0 * r.delta).abs() < 1e-9);
    let ids: Vec<&str> = r.traces.iter().map(|t| t.query_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    for t in &r.traces {
        assert_eq!(t.hit_q, t.gold_rank_q.is_some_and(|k| k <= 5));
        assert_eq!(t.alpha_used, 0.25);
    }
}

#[test]
fn p_weighted_alpha_is_recorded() {
    let fx = Fixture::new(20, 43);
    let cfg = hoproute_core::routing::RouterConfig {
        alpha_mode: AlphaMode::PWeighted,
        ..default_cfg()
    };
    let r = run_main_eval(&fx.ctx(cfg)).unwrap();
    for t in &r.traces {
        let want = (t.p_union * 0.5).clamp(0.1, 0.5);
        assert_eq!(t.alpha_used, want);
    }
}

#[test]
fn ablation_and_oracle_rows() {
    let fx = Fixture::new(30, 44);
    let ctx = fx.ctx(default_cfg());
    let rows = run_ablations(&ctx).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.condition.as_str()).collect();
    assert_eq!(
        names,
        [
            "q_only",
            "full_bridge_alpha_0.5",
            "b_rel_unrouted_alpha_0.5",
            "b_rel_routed_alpha_0.5",
            "b_rel_routed_alpha_0.25",
            "ne_heuristic"
        ]
    );
    assert_eq!(rows[0].delta_pp, 0.0);

    let o = run_oracle_analysis(&ctx).unwrap();
    let r: Vec<f64> = o.rows.iter().map(|r| r.r_at_k).collect();
    // The oracle router is at least as good as either fixed action.
    assert!(r[3] >= r[0] && r[3] >= r[1]);
    // Oracle sentences coincide with the selected ones here.
    assert_eq!(o.no_oracle_sentence_rate, 0.0);
    assert!(o.selector_gap_pp.abs() < 1e-9);
}

#[test]
fn sweep_is_monotone_in_union_rate() {
    let fx = Fixture::new(50, 45);
    let ctx = fx.ctx(default_cfg());
    let s = threshold_sweep(&ctx, &hoproute_core::experiments::default_taus()).unwrap();
    assert_eq!(s.rows.len(), 6);
    assert!(s.rows.windows(2).all(|w| w[0].union_rate >= w[1].union_rate));
    assert_eq!(s.rows[0].tau, 0.5);
    assert_eq!(s.rows[5].tau, 0.75);
}

#[test]
fn knockout_signature_on_constructed_corpus() {
    let fx = Fixture::new(40, 46);
    let r = run_knockout(&fx.analyzer, &fx.dataset, &fx.store, &fx.selector, 1.0).unwrap();
    assert_eq!(r.summary.n, 40);
    assert!(r.summary.mean_delta_minus < -0.2);
    assert!(r.summary.sign_test_minus.p_exact < 1e-6);
    for rec in &r.records {
        assert!(rec.auc_full > rec.auc_minus - 1e-12, "{rec:?}");
    }
    // Fusing back the question dilutes but keeps the direction.
    let fused = run_knockout(&fx.analyzer, &fx.dataset, &fx.store, &fx.selector, 0.5).unwrap();
    assert!(fused.summary.mean_delta_minus < 0.0);
    assert!(run_knockout(&fx.analyzer, &fx.dataset, &fx.store, &fx.selector, 1.5).is_err());
}

#[test]
fn margins_calibration_and_regimes() {
    let fx = Fixture::new(40, 47);
    let margins = compute_margins(&fx.analyzer, &fx.dataset, &fx.store).unwrap();
    assert_eq!(margins.len(), 40);
    let cal = margin_calibration(&margins, SigmaMode::PerQuery, 0.6).unwrap();
    assert!(margins.iter().all(|m| m.auc_b == 1.0));
    assert!(cal.fit_q.r_squared > 0.5, "{}", cal.fit_q.r_squared);
    let global = margin_calibration(&margins, SigmaMode::Global, 0.6).unwrap();
    assert_eq!(global.fit_b.n, cal.fit_b.n);

    let per_query: Vec<_> = margins.iter().map(|m| (m.qtype, m.auc_q, m.auc_b)).collect();
    let table = mixture_decomposition(&per_query).unwrap();
    let total: f64 = table.rows.iter().map(|r| r.prevalence).sum();
    assert!((total - 1.0).abs() < 1e-12);

    // Tied margins are excluded, never dropped silently.
    let agreement = regime_assignment_eval(&fx.analyzer, &fx.dataset, &margins).unwrap();
    assert!(agreement.n + agreement.excluded_ties == 40);
}

#[test]
fn hop1_filter_keeps_top_five() {
    let fx = Fixture::new(10, 48);
    let ranks: HashMap<String, u32> = fx
        .dataset
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| (q.id.clone(), i as u32 + 1))
        .collect();
    let kept = filter_hop1_correct(&fx.dataset, &ranks).unwrap();
    let want: Vec<&str> = fx.dataset.queries.iter().filter(|q| ranks[&q.id] <= 5).map(|q| q.id.as_str()).collect();
    assert_eq!(kept.queries.iter().map(|q| q.id.as_str()).collect::<Vec<_>>(), want);

    let mut partial = ranks.clone();
    partial.remove("q0002");
    assert!(matches!(
        filter_hop1_correct(&fx.dataset, &partial),
        Err(hoproute_core::Error::MissingRank(ids)) if ids == ["q0002"]
    ));
}
