//! Two-hop QA datasets: queries, passages and their referential integrity.
//!
//! Queries and passages live in separate JSON-lines files. Candidate pools
//! ship with the queries; nothing here performs retrieval.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Queries whose bridge passage ranks at or above this position in hop-1
/// retrieval are kept for evaluation.
pub const HOP1_TOP_K: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryType {
    Comparison,
    BridgeComparison,
    Compositional,
    Inference,
    #[default]
    Other,
}

impl QueryType {
    pub const ALL: [QueryType; 5] = [
        QueryType::Comparison,
        QueryType::BridgeComparison,
        QueryType::Compositional,
        QueryType::Inference,
        QueryType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryType::Comparison => "comparison",
            QueryType::BridgeComparison => "bridge_comparison",
            QueryType::Compositional => "compositional",
            QueryType::Inference => "inference",
            QueryType::Other => "other",
        }
    }
}

impl std::fmt::Display for QueryType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub qtype: QueryType,
    pub bridge_id: String,
    pub gold_id: String,
    pub pool_ids: Vec<String>,
    /// Canonical title of the hop-2 gold passage. Filled from the gold
    /// passage when the file leaves it empty.
    #[serde(default)]
    pub hop2_title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Dataset {
    pub name: String,
    pub queries: Vec<Query>,
    pub passages: BTreeMap<String, Passage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    Jsonl,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            other => Err(Error::Invalid(format!("unknown dataset format '{other}'"))),
        }
    }
}

/// Locations of the two files making up a dataset.
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub queries: PathBuf,
    pub passages: PathBuf,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct RankRecord {
    id: String,
    rank: u32,
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(files: &DatasetFiles, format: DatasetFormat) -> Result<Dataset> {
    let DatasetFormat::Jsonl = format;
    let passages: Vec<Passage> = read_jsonl(&files.passages)?;
    let queries: Vec<Query> = read_jsonl(&files.queries)?;
    let name = files
        .queries
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Dataset::new(name, queries, passages)
}

pub fn write_dataset(ds: &Dataset, files: &DatasetFiles) -> Result<()> {
    write_jsonl(&files.passages, ds.passages.values())?;
    write_jsonl(&files.queries, &ds.queries)
}

pub fn load_hop1_ranks(path: &Path) -> Result<HashMap<String, u32>> {
    let records: Vec<RankRecord> = read_jsonl(path)?;
    Ok(records.into_iter().map(|r| (r.id, r.rank)).collect())
}

/// Keep only the queries whose bridge passage was retrieved in the hop-1
/// top five. Order is preserved.
pub fn filter_hop1_correct(ds: &Dataset, hop1_ranks: &HashMap<String, u32>) -> Result<Dataset> {
    let missing: Vec<String> = ds
        .queries
        .iter()
        .filter(|q| !hop1_ranks.contains_key(&q.id))
        .map(|q| q.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingRank(missing));
    }
    let queries = ds
        .queries
        .iter()
        .filter(|q| hop1_ranks[&q.id] <= HOP1_TOP_K)
        .cloned()
        .collect();
    Ok(Dataset {
        name: ds.name.clone(),
        queries,
        passages: ds.passages.clone(),
    })
}

impl Dataset {
    /// Builds a dataset, validating every record and the references between
    /// queries and passages.
    pub fn new(name: impl Into<String>, mut queries: Vec<Query>, passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for p in passages {
            if p.id.is_empty() {
                return Err(Error::Invalid("passage with empty id".into()));
            }
            if p.body.trim().is_empty() {
                return Err(Error::Invalid(format!("passage '{}' has an empty body", p.id)));
            }
            if by_id.contains_key(&p.id) {
                return Err(Error::Invalid(format!("duplicate passage id '{}'", p.id)));
            }
            by_id.insert(p.id.clone(), p);
        }

        let mut seen_queries = HashSet::new();
        let mut dangling = BTreeSet::new();
        for q in &queries {
            if q.id.is_empty() {
                return Err(Error::Invalid("query with empty id".into()));
            }
            if !seen_queries.insert(q.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate query id '{}'", q.id)));
            }
            if q.bridge_id == q.gold_id {
                return Err(Error::Invalid(format!(
                    "query '{}': bridge and gold passage are both '{}'",
                    q.id, q.gold_id
                )));
            }
            let mut pool = HashSet::with_capacity(q.pool_ids.len());
            for pid in &q.pool_ids {
                if !pool.insert(pid.as_str()) {
                    return Err(Error::Invalid(format!(
                        "query '{}': duplicate pool id '{pid}'",
                        q.id
                    )));
                }
            }
            for pid in std::iter::once(&q.bridge_id)
                .chain(std::iter::once(&q.gold_id))
                .chain(&q.pool_ids)
            {
                if !by_id.contains_key(pid) {
                    dangling.insert(pid.clone());
                }
            }
        }
        if !dangling.is_empty() {
            return Err(Error::DanglingIds(dangling.into_iter().collect()));
        }

        for q in &mut queries {
            if q.hop2_title.trim().is_empty() {
                q.hop2_title = by_id[&q.gold_id].title.clone();
            }
        }

        Ok(Dataset {
            name: name.into(),
            queries,
            passages: by_id,
        })
    }

    pub fn passage(&self, id: &str) -> Option<&Passage> {
        self.passages.get(id)
    }

    /// Bridge passage of a query. Integrity is checked at construction, so
    /// this only fails for queries that do not belong to the dataset.
    pub fn bridge(&self, q: &Query) -> Result<&Passage> {
        self.passage(&q.bridge_id)
            .ok_or_else(|| Error::DanglingIds(vec![q.bridge_id.clone()]))
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn type_counts(&self) -> BTreeMap<QueryType, usize> {
        let mut counts = BTreeMap::new();
        for q in &self.queries {
            *counts.entry(q.qtype).or_insert(0) += 1;
        }
        counts
    }
}
