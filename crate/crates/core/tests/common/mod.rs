//! Synthetic corpus with hand-built vectors, shared by the integration tests.
//!
//! Each query has a hidden topic direction `t`. The relation sentence of the
//! bridge embeds to `t`, the gold passage sits near `t`, the rest of the
//! bridge embeds to an unrelated filler direction `f`, and the whole bridge
//! to `t + f`. Question vectors mix `t` with noise at a per-query strength,
//! so question-only retrieval succeeds on some queries and not others.
#![allow(dead_code)]

pub mod echo;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use hoproute_core::corpus::{write_dataset, Dataset, DatasetFiles, Passage, Query, QueryType};
use hoproute_core::embedding::{text_key, Mode, VectorStore};
use hoproute_core::experiments::{minus_variant, missing_texts, required_texts, EvalContext, TextNeeds};
use hoproute_core::linear_model::LinearModel;
use hoproute_core::routing::{RouterConfig, UnionProbability};
use hoproute_core::selector::select;
use hoproute_core::text::{Lexicons, RouterFeatures, SentenceFeatures, TextAnalyzer};

pub const DIM: usize = 32;
pub const POOL: usize = 20;

pub struct Fixture {
    pub analyzer: TextAnalyzer,
    pub dataset: Dataset,
    pub store: VectorStore,
    pub selector: LinearModel,
    pub router: LinearModel,
    /// Router probabilities spread over `[0, 1)`.
    pub p_table: HashMap<String, f64>,
}

fn unit(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..DIM).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn mix(a: &[f64], wa: f64, b: &[f64], wb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

const TYPES: [QueryType; 4] = [
    QueryType::Compositional,
    QueryType::Comparison,
    QueryType::Inference,
    QueryType::BridgeComparison,
];

pub fn selector_model() -> LinearModel {
    let names = SentenceFeatures::NAMES.iter().map(|s| s.to_string()).collect();
    LinearModel::from_parts(names, vec![0.5, 4.0, 0.0, 0.0, 0.0], -2.0).unwrap()
}

pub fn router_model() -> LinearModel {
    let names = RouterFeatures::NAMES.iter().map(|s| s.to_string()).collect();
    LinearModel::from_parts(names, vec![-1.5, -0.5, 0.1, 0.8, 0.5], -0.4).unwrap()
}

impl Fixture {
    pub fn new(n: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let analyzer = TextAnalyzer::new(Lexicons::default());
        let selector = selector_model();
        let mut queries = Vec::new();
        let mut passages = Vec::new();
        // (id, mode) -> vector; texts resolved after the dataset is built.
        let mut vectors: Vec<(String, Mode, Vec<f64>)> = Vec::new();
        let mut topics = Vec::new();

        for i in 0..n {
            let qid = format!("q{i:04}");
            let t = unit(&mut rng);
            let f = unit(&mut rng);
            let noise = unit(&mut rng);
            let strength = [0.0, 0.2, 0.4, 0.7, 1.5][i % 5];
            let qvec = mix(&t, strength, &noise, 1.0);

            let target = format!("Target{i} Group");
            let bridge = Passage {
                id: format!("b{i:04}"),
                title: format!("Topic{i}"),
                body: format!(
                    "Topic{i} is an old subject. It was founded by {target} in the north. Many people still study it."
                ),
            };
            let gold = Passage {
                id: format!("g{i:04}"),
                title: target.clone(),
                body: format!("{target} is an organization."),
            };
            let gvec = mix(&t, 1.0, &unit(&mut rng), 0.3);
            let mut pool_ids = vec![gold.id.clone()];
            vectors.push((gold.id.clone(), Mode::Doc, gvec));
            for j in 0..POOL - 1 {
                let neg = Passage {
                    id: format!("n{i:04}_{j:02}"),
                    title: format!("Other{i}x{j}"),
                    body: "An unrelated passage.".into(),
                };
                vectors.push((neg.id.clone(), Mode::Doc, unit(&mut rng)));
                pool_ids.push(neg.id.clone());
                passages.push(neg);
            }
            let at = rng.random_range(0..POOL);
            pool_ids.swap(0, at);

            let question = if i % 3 == 1 {
                format!("Which is older, Topic{i} or the Harbor Museum?")
            } else {
                format!("Who founded the subject that Topic{i} describes?")
            };
            queries.push(Query {
                id: qid.clone(),
                question,
                qtype: TYPES[i % TYPES.len()],
                bridge_id: bridge.id.clone(),
                gold_id: gold.id.clone(),
                pool_ids,
                hop2_title: target,
            });
            vectors.push((qid, Mode::Query, qvec));
            topics.push((bridge.clone(), t, f));
            passages.push(bridge);
            passages.push(gold);
        }

        let dataset = Dataset::new("synthetic", queries, passages).unwrap();
        let mut store = VectorStore::new(DIM);
        for (id, mode, v) in vectors {
            store.insert(id, mode, v).unwrap();
        }
        for (q, (bridge, t, f)) in dataset.queries.iter().zip(&topics) {
            let sel = select(&analyzer, bridge, &q.question, &selector, 0.0).unwrap();
            let chosen = sel.chosen.expect("selector picks a sentence");
            assert!(chosen.text.contains("founded"), "selector picked {:?}", chosen.text);
            let sentences = analyzer.split_sentences(&bridge.body);
            for s in &sentences {
                let v = if s.text == chosen.text { t.clone() } else { f.clone() };
                store.insert(text_key(&s.text), Mode::Query, v).unwrap();
            }
            store.insert(text_key(&bridge.body), Mode::Query, mix(t, 1.0, f, 1.0)).unwrap();
            let minus = minus_variant(&bridge.body, chosen.start, chosen.end);
            store.insert(text_key(&minus), Mode::Query, f.clone()).unwrap();
        }
        let needed = required_texts(&analyzer, &dataset, Some(&selector), TextNeeds::ALL).unwrap();
        assert!(missing_texts(&store, &needed).is_empty());

        let p_table = dataset
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.id.clone(), (i as f64 * 0.37) % 1.0))
            .collect();
        Fixture {
            analyzer,
            dataset,
            store,
            selector,
            router: router_model(),
            p_table,
        }
    }

    pub fn ctx(&self, cfg: RouterConfig) -> EvalContext<'_> {
        EvalContext {
            analyzer: &self.analyzer,
            dataset: &self.dataset,
            store: &self.store,
            selector: &self.selector,
            router: UnionProbability::Table(&self.p_table),
            cfg,
        }
    }

    pub fn model_ctx(&self, cfg: RouterConfig) -> EvalContext<'_> {
        EvalContext {
            router: UnionProbability::Model(&self.router),
            ..self.ctx(cfg)
        }
    }

    /// Writes dataset, store and models; returns their paths in that order
    /// (queries, passages, store, selector, router).
    pub fn write(&self, dir: &Path) -> [PathBuf; 5] {
        let files = DatasetFiles {
            queries: dir.join("queries.jsonl"),
            passages: dir.join("passages.jsonl"),
        };
        write_dataset(&self.dataset, &files).unwrap();
        let store = dir.join("store.bin");
        self.store.save(&store).unwrap();
        let selector = dir.join("selector.json");
        self.selector.save(&selector).unwrap();
        let router = dir.join("router.json");
        self.router.save(&router).unwrap();
        [files.queries, files.passages, store, selector, router]
    }
}

pub fn default_cfg() -> RouterConfig {
    RouterConfig {
        tau: 0.5,
        alpha: 0.25,
        alpha_mode: Default::default(),
        k: 5,
        abstain_threshold: 0.0,
    }
}
