use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use hoproute_core::corpus::{filter_hop1_correct, load_dataset, load_hop1_ranks, Dataset, DatasetFiles, DatasetFormat};
use hoproute_core::embedding::{HttpTransport, Mode, RemoteEmbedder, VectorStore};
use hoproute_core::experiments::{
    annotation_agreement, compute_margins, margin_calibration, missing_texts, mixture_decomposition,
    regime_assignment_eval, required_texts, router_training_set, run_ablations, run_knockout, run_main_eval,
    run_oracle_analysis, synthetic_calibration, threshold_sweep, write_csv, EvalContext, TextNeeds,
};
use hoproute_core::linear_model::{cross_fit, LinearModel};
use hoproute_core::routing::UnionProbability;
use hoproute_core::selector::{
    cross_fitted_selector_accuracy, load_annotations, resolve_annotations, selector_accuracy, train_selector,
};
use hoproute_core::text::{Lexicons, Regime, RouterFeatures, TextAnalyzer};
use hoproute_core::Error;

use crate::config::{EffectiveConfig, Settings};
use crate::report::{FrozenRule, ReportWriter};

pub const EXPERIMENTS: [&str; 10] = [
    "main-eval",
    "knockout",
    "oracle",
    "ablations",
    "threshold-sweep",
    "synthetic-calibration",
    "calibration",
    "mixture",
    "regime-assignment",
    "kappa",
];

/// A bad command line or config file.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// 2 for unparseable input, 3 for integrity failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() || cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_exit_code(e);
        }
    }
    1
}

fn core_exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } | Error::Json(_) | Error::Format(_) => 2,
        Error::DanglingIds(_)
        | Error::MissingRank(_)
        | Error::Invalid(_)
        | Error::DimensionMismatch { .. }
        | Error::MissingEmbedding { .. }
        | Error::MissingTexts(_) => 3,
        Error::Fold { source, .. } => core_exit_code(source),
        _ => 1,
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| UsageError(format!("--{flag} is required (flag or config file)")).into())
}

fn set_parallelism(s: &Settings) {
    if let Some(n) = s.parallelism {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
}

fn analyzer(s: &Settings) -> anyhow::Result<TextAnalyzer> {
    let lex = match &s.lexicon_dir {
        Some(dir) => Lexicons::from_dir(dir)?,
        None => Lexicons::default(),
    };
    Ok(TextAnalyzer::new(lex))
}

fn dataset(s: &Settings) -> anyhow::Result<Dataset> {
    let files = DatasetFiles {
        queries: required(&s.queries, "queries")?.to_path_buf(),
        passages: required(&s.passages, "passages")?.to_path_buf(),
    };
    let ds = load_dataset(&files, DatasetFormat::Jsonl)?;
    match &s.hop1_ranks {
        Some(p) => {
            let before = ds.len();
            let filtered = filter_hop1_correct(&ds, &load_hop1_ranks(p)?)?;
            log::info!("hop-1 filter kept {} of {before} queries", filtered.len());
            Ok(filtered)
        }
        None => Ok(ds),
    }
}

fn load_store(s: &Settings) -> anyhow::Result<VectorStore> {
    Ok(VectorStore::load(required(&s.store, "store")?)?)
}

fn load_model(path: &Option<PathBuf>, flag: &str) -> anyhow::Result<LinearModel> {
    let p = required(path, flag)?;
    LinearModel::load(p).with_context(|| format!("loading {}", p.display()))
}

pub fn ingest(s: &Settings) -> anyhow::Result<()> {
    let ds = dataset(s)?;
    let a = analyzer(s)?;
    println!("queries: {}", ds.len());
    println!("passages: {}", ds.passages.len());
    for (t, n) in ds.type_counts() {
        println!("  {t}: {n}");
    }
    let mut regimes: BTreeMap<&str, usize> = BTreeMap::new();
    for q in &ds.queries {
        let r = a.assign_predicates(q, ds.bridge(q)?).regime;
        *regimes.entry(r.as_str()).or_default() += 1;
    }
    for r in [Regime::QDominant, Regime::BDominant, Regime::Uncovered] {
        println!("regime {}: {}", r.as_str(), regimes.get(r.as_str()).copied().unwrap_or(0));
    }
    Ok(())
}

pub fn embed(s: &Settings, dry_run: bool) -> anyhow::Result<()> {
    set_parallelism(s);
    let ds = dataset(s)?;
    let a = analyzer(s)?;
    let selector = match &s.selector {
        Some(_) => Some(load_model(&s.selector, "selector")?),
        None => {
            log::warn!("no selector model: selected-sentence and knockout texts are not listed");
            None
        }
    };
    let needs = if selector.is_some() {
        TextNeeds::ALL
    } else {
        TextNeeds {
            oracle: true,
            full_bridge: true,
            ..Default::default()
        }
    };
    let texts = required_texts(&a, &ds, selector.as_ref(), needs)?;
    let store_path = required(&s.store, "store")?;
    let mut store = if store_path.exists() {
        Some(VectorStore::load(store_path)?)
    } else {
        None
    };
    let missing: Vec<_> = match &store {
        Some(st) => missing_texts(st, &texts).into_iter().cloned().collect(),
        None => texts.clone(),
    };
    println!("required embeddings: {}", texts.len());
    println!("missing embeddings: {}", missing.len());
    if dry_run || missing.is_empty() {
        return Ok(());
    }

    let provider = s
        .provider
        .clone()
        .ok_or_else(|| UsageError("a [provider] section in the config file is required to fetch embeddings".into()))?;
    let transport = HttpTransport::new(&provider)?;
    let embedder = RemoteEmbedder::new(provider, Box::new(transport), s.cache.clone())?;
    let mut fetched = 0;
    for mode in [Mode::Query, Mode::Doc] {
        let batch: Vec<_> = missing.iter().filter(|r| r.mode == mode).collect();
        if batch.is_empty() {
            continue;
        }
        let inputs: Vec<String> = batch.iter().map(|r| r.text.clone()).collect();
        let vectors = embedder.fetch(&inputs, mode)?;
        for (r, v) in batch.iter().zip(vectors) {
            let st = store.get_or_insert_with(|| VectorStore::new(v.len()));
            st.insert(r.id.clone(), mode, v)?;
            fetched += 1;
        }
    }
    if let Some(st) = &store {
        st.save(store_path)?;
    }
    println!("fetched: {fetched} ({} provider requests)", embedder.call_count());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OofRecord {
    pub id: String,
    pub label: u8,
    pub p_union: f64,
    pub fold: usize,
}

#[derive(Debug, Serialize)]
struct TrainDiagnostics {
    n: usize,
    positives: usize,
    fold_sizes: Vec<usize>,
    selector_trained: bool,
    selector_accuracy_in_sample: Option<f64>,
    selector_accuracy_cross_fitted: Option<f64>,
    router_weights: BTreeMap<String, f64>,
    router_bias: f64,
    router_iterations: usize,
    out_of_fold_accuracy: f64,
}

pub fn train(s: &Settings) -> anyhow::Result<()> {
    set_parallelism(s);
    let cfg = s.effective()?;
    let ds = dataset(s)?;
    let a = analyzer(s)?;
    let store = load_store(s)?;
    let out_dir = s.out_dir();
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let (selector, trained, acc_in, acc_cf) = match &s.annotations {
        Some(path) => {
            let annotated = resolve_annotations(&ds, &load_annotations(path)?)?;
            let model = train_selector(&a, &annotated, &cfg.train)?;
            let acc_in = selector_accuracy(&a, &model, &annotated)?;
            let k = cfg.folds.min(annotated.len());
            let acc_cf = if k >= 2 {
                match cross_fitted_selector_accuracy(&a, &annotated, k, &cfg.train) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        log::warn!("cross-fitted selector accuracy unavailable: {e}");
                        None
                    }
                }
            } else {
                None
            };
            let path = out_dir.join("selector.json");
            model.save(&path)?;
            println!("selector: {} (in-sample accuracy {acc_in:.4})", path.display());
            (model, true, Some(acc_in), acc_cf)
        }
        None => {
            if s.selector.is_none() {
                bail!(UsageError("either --annotations or a prebuilt --selector is required".into()));
            }
            log::warn!("no annotations given; skipping selector training and using the prebuilt selector");
            (load_model(&s.selector, "selector")?, false, None, None)
        }
    };

    let set = router_training_set(&a, &ds, &store, &selector, cfg.router.alpha, cfg.router.k, cfg.label_mode)?;
    let cf = cross_fit(&set.x, &set.y, &RouterFeatures::NAMES, cfg.folds, &cfg.train)?;
    for (i, f) in cf.folds.iter().enumerate() {
        log::info!("fold {i}: {} queries ({}..{})", f.len(), f.start, f.end);
    }
    let router_path = out_dir.join("router.json");
    cf.full_model.save(&router_path)?;

    let mut oof = Vec::with_capacity(set.y.len());
    for (fold, range) in cf.folds.iter().enumerate() {
        for i in range.clone() {
            oof.push(OofRecord {
                id: set.query_ids[i].clone(),
                label: set.y[i],
                p_union: cf.out_of_fold_probs[i],
                fold,
            });
        }
    }
    let oof_path = out_dir.join("router_oof.jsonl");
    let mut lines = String::new();
    for r in &oof {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    std::fs::write(&oof_path, lines).with_context(|| format!("writing {}", oof_path.display()))?;

    let correct = oof
        .iter()
        .filter(|r| u8::from(r.p_union >= cfg.router.tau) == r.label)
        .count();
    let diagnostics = TrainDiagnostics {
        n: set.y.len(),
        positives: set.y.iter().filter(|y| **y == 1).count(),
        fold_sizes: cf.folds.iter().map(|f| f.len()).collect(),
        selector_trained: trained,
        selector_accuracy_in_sample: acc_in,
        selector_accuracy_cross_fitted: acc_cf,
        router_weights: cf
            .full_model
            .feature_names
            .iter()
            .cloned()
            .zip(cf.full_model.weights.iter().copied())
            .collect(),
        router_bias: cf.full_model.bias,
        router_iterations: cf.full_model.train_meta.iterations,
        out_of_fold_accuracy: correct as f64 / oof.len().max(1) as f64,
    };
    let writer = ReportWriter {
        out_dir: &out_dir,
        experiment: "train",
        dataset: Some(&ds.name),
        config: &cfg,
        deterministic: true,
    };
    let diag_path = writer.write(&diagnostics)?;
    println!(
        "router: {} ({} queries, {} positive, folds {:?})",
        router_path.display(),
        diagnostics.n,
        diagnostics.positives,
        diagnostics.fold_sizes
    );
    println!("out-of-fold probabilities: {}", oof_path.display());
    println!("diagnostics: {}", diag_path.display());
    Ok(())
}

pub fn load_oof(path: &Path) -> anyhow::Result<HashMap<String, f64>> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = HashMap::new();
    for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: OofRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(r.id, r.p_union);
    }
    Ok(out)
}

struct Loaded {
    ds: Dataset,
    analyzer: TextAnalyzer,
    store: VectorStore,
    selector: LinearModel,
    router: Option<LinearModel>,
    oof: Option<HashMap<String, f64>>,
}

impl Loaded {
    fn new(s: &Settings, need_router: bool) -> anyhow::Result<Self> {
        let oof = s.oof.as_deref().map(load_oof).transpose()?;
        let router = if need_router && oof.is_none() {
            Some(load_model(&s.router, "router")?)
        } else {
            None
        };
        Ok(Loaded {
            ds: dataset(s)?,
            analyzer: analyzer(s)?,
            store: load_store(s)?,
            selector: load_model(&s.selector, "selector")?,
            router,
            oof,
        })
    }

    fn ctx(&self, cfg: &EffectiveConfig) -> EvalContext<'_> {
        let router = match (&self.oof, &self.router) {
            (Some(t), _) => UnionProbability::Table(t),
            (None, Some(m)) => UnionProbability::Model(m),
            (None, None) => unreachable!("router source checked at load"),
        };
        EvalContext {
            analyzer: &self.analyzer,
            dataset: &self.ds,
            store: &self.store,
            selector: &self.selector,
            router,
            cfg: cfg.router,
        }
    }
}

pub fn experiment(name: &str, s: &Settings, deterministic: bool) -> anyhow::Result<()> {
    if !EXPERIMENTS.contains(&name) {
        bail!(UsageError(format!(
            "unknown experiment '{name}'; valid names: {}",
            EXPERIMENTS.join(", ")
        )));
    }
    set_parallelism(s);
    let cfg = s.effective()?;
    let out_dir = s.out_dir();
    eprintln!("{}", FrozenRule::new(&cfg.router).banner());

    if name == "synthetic-calibration" {
        let r = synthetic_calibration(cfg.experiment.synthetic)?;
        let w = ReportWriter {
            out_dir: &out_dir,
            experiment: name,
            dataset: None,
            config: &cfg,
            deterministic,
        };
        println!("r_squared: {:.6}", r.fit.r_squared);
        println!("inversion_accuracy: {:.6}", r.fit.inversion_accuracy);
        println!("shuffled r_squared: {:.6}", r.shuffled.r_squared);
        println!("report: {}", w.write(&r)?.display());
        return Ok(());
    }
    if name == "kappa" {
        let a = load_annotations(required(&s.annotations, "annotations")?)?;
        let b = load_annotations(required(&s.annotations_b, "annotations-b")?)?;
        let k = annotation_agreement(&a, &b)?;
        let w = ReportWriter {
            out_dir: &out_dir,
            experiment: name,
            dataset: None,
            config: &cfg,
            deterministic,
        };
        println!("n: {}  observed: {:.4}  kappa: {:.4}", k.n, k.observed, k.kappa);
        println!("report: {}", w.write(&k)?.display());
        return Ok(());
    }

    let needs_models = matches!(name, "main-eval" | "oracle" | "ablations" | "threshold-sweep");
    let (loaded, plain) = if needs_models || name == "knockout" {
        (Some(Loaded::new(s, needs_models)?), None)
    } else {
        (None, Some((dataset(s)?, analyzer(s)?, load_store(s)?)))
    };
    let ds_name = match (&loaded, &plain) {
        (Some(l), _) => l.ds.name.clone(),
        (_, Some(p)) => p.0.name.clone(),
        _ => unreachable!(),
    };
    let w = ReportWriter {
        out_dir: &out_dir,
        experiment: name,
        dataset: Some(&ds_name),
        config: &cfg,
        deterministic,
    };

    let report = match name {
        "main-eval" => {
            let l = loaded.as_ref().expect("loaded");
            let r = run_main_eval(&l.ctx(&cfg))?;
            println!("queries: {}", r.n);
            println!("R@{} question only: {:.4}", r.k, r.r_at_k_q);
            println!("R@{} routed: {:.4}", r.k, r.r_at_k_router);
            println!("delta: {:+.2} pp  ({}W / {}L)", r.delta_pp, r.wins, r.losses);
            println!(
                "McNemar exact p: {:.3e}  one-sided: {:.3e}  chi-square p: {:.3e}",
                r.mcnemar.p_exact, r.mcnemar.p_exact_one_sided, r.mcnemar.p_chi2
            );
            println!("routed to Union: {:.1}%", 100.0 * r.routing_rate);
            std::fs::create_dir_all(&out_dir)?;
            write_csv(&w.path("-traces.csv")?, &r.traces)?;
            w.write(&r)?
        }
        "oracle" => {
            let l = loaded.as_ref().expect("loaded");
            let r = run_oracle_analysis(&l.ctx(&cfg))?;
            for row in &r.rows {
                println!("{:<20} R@k={:.4} delta={:+.2} pp", row.condition, row.r_at_k, row.delta_pp);
            }
            println!("routing gap: {:+.2} pp", r.routing_gap_pp);
            println!("selector gap: {:+.2} pp", r.selector_gap_pp);
            println!("no oracle sentence: {:.1}%", 100.0 * r.no_oracle_sentence_rate);
            std::fs::create_dir_all(&out_dir)?;
            write_csv(&w.path(".csv")?, &r.rows)?;
            w.write(&r)?
        }
        "ablations" => {
            let l = loaded.as_ref().expect("loaded");
            let rows = run_ablations(&l.ctx(&cfg))?;
            for row in &rows {
                println!("{:<26} R@k={:.4} delta={:+.2} pp", row.condition, row.r_at_k, row.delta_pp);
            }
            std::fs::create_dir_all(&out_dir)?;
            write_csv(&w.path(".csv")?, &rows)?;
            w.write(&rows)?
        }
        "threshold-sweep" => {
            let l = loaded.as_ref().expect("loaded");
            let r = threshold_sweep(&l.ctx(&cfg), &cfg.experiment.taus)?;
            for row in &r.rows {
                println!("tau={:.2} R@k={:.4} union={:.1}%", row.tau, row.r_at_k, 100.0 * row.union_rate);
            }
            std::fs::create_dir_all(&out_dir)?;
            write_csv(&w.path(".csv")?, &r.rows)?;
            w.write(&r)?
        }
        "knockout" => {
            let l = loaded.as_ref().expect("loaded");
            let r = run_knockout(&l.analyzer, &l.ds, &l.store, &l.selector, cfg.experiment.knockout_alpha)?;
            let sm = &r.summary;
            println!("queries: {} (excluded {})", sm.n, sm.excluded);
            println!(
                "mean AUC full {:.4}  rel {:.4}  minus {:.4}",
                sm.mean_auc_full, sm.mean_auc_rel, sm.mean_auc_minus
            );
            println!(
                "delta rel {:+.4} (sign p {:.3e})  delta minus {:+.4} (sign p {:.3e})",
                sm.mean_delta_rel, sm.sign_test_rel.p_exact, sm.mean_delta_minus, sm.sign_test_minus.p_exact
            );
            std::fs::create_dir_all(&out_dir)?;
            write_csv(&w.path(".csv")?, &r.records)?;
            w.write(&r)?
        }
        "calibration" | "mixture" | "regime-assignment" => {
            let (ds, a, store) = plain.as_ref().expect("plain");
            let margins = compute_margins(a, ds, store)?;
            std::fs::create_dir_all(&out_dir)?;
            write_csv(&w.path("-margins.csv")?, &margins)?;
            match name {
                "calibration" => {
                    let r = margin_calibration(&margins, cfg.experiment.sigma_mode, cfg.experiment.cantelli_t)?;
                    println!(
                        "question: R^2 {:.4} inversion {:.4}",
                        r.fit_q.r_squared, r.fit_q.inversion_accuracy
                    );
                    println!(
                        "bridge:   R^2 {:.4} inversion {:.4}",
                        r.fit_b.r_squared, r.fit_b.inversion_accuracy
                    );
                    w.write(&r)?
                }
                "mixture" => {
                    let per_query: Vec<_> = margins.iter().map(|m| (m.qtype, m.auc_q, m.auc_b)).collect();
                    let r = mixture_decomposition(&per_query)?;
                    for row in &r.rows {
                        println!(
                            "{:<18} {:>5.1}% delta(q-b) {:+.4} {}",
                            row.qtype.as_str(),
                            100.0 * row.prevalence,
                            row.delta_q_minus_b,
                            row.verdict
                        );
                    }
                    println!("aggregate (q-b): {:+.4}  micro: {:+.4}", r.aggregate_q_minus_b, r.micro_delta_q_minus_b);
                    write_csv(&w.path(".csv")?, &r.rows)?;
                    w.write(&r)?
                }
                _ => {
                    let r = regime_assignment_eval(a, ds, &margins)?;
                    println!("agreement: {:.4}  kappa: {:.4}  (n={})", r.agreement, r.kappa.kappa, r.n);
                    w.write(&r)?
                }
            }
        }
        _ => unreachable!("name checked above"),
    };
    println!("report: {}", report.display());
    Ok(())
}
