//! Candidate pre-filtering, dense first-stage retrieval, re-ranking and
//! lexical and generative baselines.

mod bm25;
mod dense;
mod rerank;

pub use bm25::{bm25_rank, Bm25Index, DEFAULT_B, DEFAULT_K1};
pub use dense::{build_index, read_index, retrieve_topk, write_index, DenseIndex, DenseRetriever, INDEX_MAGIC};
pub use rerank::{grounded_llm_rank, merge_pseudo_items, ql_rerank, rerank_cross, GroundedRanker};

use crate::corpus::{ItemCatalog, ItemRecord};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("index was built with encoder {index:016x} but the query encoder is {model:016x}")]
    FingerprintMismatch { index: u64, model: u64 },
    #[error("item {0} is not in the catalog")]
    UnknownItem(String),
    #[error("cannot build an index over zero items")]
    EmptyIndex,
    #[error("first-stage ranking is empty")]
    EmptyRanking,
    #[error("bad index file: {0}")]
    BadIndexFile(String),
    #[error("bad test query line {line}: {reason}")]
    BadQueryFile { line: usize, reason: String },
    #[error("bad run file line {line}: {reason}")]
    BadRunFile { line: usize, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ql(#[from] crate::qlfilter::QlError),
    #[error(transparent)]
    Qgen(#[from] crate::qgen::QgenError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RetrievalError + '_ {
    move |source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub item_id: String,
    pub score: f64,
    pub rank: usize,
}

/// A ranking for one query. Dense first-stage scores are distances
/// (ascending); every other stage uses descending scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
    pub stage_tag: String,
}

impl RankedList {
    /// Assigns ranks 1.. to already ordered `(item_id, score)` pairs.
    pub fn from_ordered(query_id: &str, stage_tag: &str, ordered: Vec<(String, f64)>) -> Self {
        Self {
            query_id: query_id.to_string(),
            entries: ordered
                .into_iter()
                .enumerate()
                .map(|(i, (item_id, score))| RankedEntry {
                    item_id,
                    score,
                    rank: i + 1,
                })
                .collect(),
            stage_tag: stage_tag.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.item_id.as_str())
    }

    /// First `k` entries.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            query_id: self.query_id.clone(),
            entries: self.entries.iter().take(k).cloned().collect(),
            stage_tag: self.stage_tag.clone(),
        }
    }
}

/// An evaluation request with its optional location and category filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestQuery {
    pub query_id: String,
    pub text: String,
    #[serde(default)]
    pub city: String,
    #[serde(default)]
    pub category: String,
}

/// Reads line-delimited JSON test queries.
pub fn read_test_queries(path: &Path) -> Result<Vec<TestQuery>, RetrievalError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RetrievalError::BadQueryFile {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Items in `city` (case-insensitive exact match) that list `category`.
/// An empty city or category matches everything.
pub fn prefilter_candidates<'a>(catalog: &'a ItemCatalog, city: &str, category: &str) -> Vec<&'a ItemRecord> {
    let city = city.trim().to_lowercase();
    let category = category.trim().to_lowercase();
    let out: Vec<&ItemRecord> = catalog
        .items()
        .iter()
        .filter(|it| city.is_empty() || it.city.trim().to_lowercase() == city)
        .filter(|it| category.is_empty() || it.categories.iter().any(|c| c.trim().to_lowercase() == category))
        .collect();
    if out.is_empty() {
        log::warn!("no candidates for city {city:?} and category {category:?}");
    }
    out
}

/// Writes rankings as TREC run lines `qid Q0 item_id rank score tag`.
pub fn write_run<W: Write>(mut w: W, lists: &[RankedList]) -> std::io::Result<()> {
    for l in lists {
        for e in &l.entries {
            writeln!(w, "{} Q0 {} {} {} {}", l.query_id, e.item_id, e.rank, e.score, l.stage_tag)?;
        }
    }
    Ok(())
}

pub fn write_run_file(path: &Path, lists: &[RankedList]) -> Result<(), RetrievalError> {
    let mut buf = Vec::new();
    write_run(&mut buf, lists).map_err(io_err(path))?;
    std::fs::write(path, buf).map_err(io_err(path))
}

/// Reads a TREC run; queries keep file order and entries are sorted by rank.
pub fn read_run<R: BufRead>(r: R) -> Result<Vec<RankedList>, RetrievalError> {
    let mut lists: Vec<RankedList> = Vec::new();
    let mut index: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for (n, line) in r.lines().enumerate() {
        let bad = |reason: &str| RetrievalError::BadRunFile {
            line: n + 1,
            reason: reason.to_string(),
        };
        let line = line.map_err(|e| bad(&e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let rank: usize = f[3].parse().map_err(|_| bad("rank is not an integer"))?;
        let score: f64 = f[4].parse().map_err(|_| bad("score is not a number"))?;
        let i = *index.entry(f[0].to_string()).or_insert_with(|| {
            lists.push(RankedList {
                query_id: f[0].to_string(),
                entries: Vec::new(),
                stage_tag: f[5].to_string(),
            });
            lists.len() - 1
        });
        lists[i].entries.push(RankedEntry {
            item_id: f[2].to_string(),
            score,
            rank,
        });
    }
    for l in &mut lists {
        l.entries.sort_by_key(|e| e.rank);
    }
    Ok(lists)
}

pub fn read_run_file(path: &Path) -> Result<Vec<RankedList>, RetrievalError> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    read_run(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    pub(crate) fn item(id: &str, city: &str, cats: &[&str], name: &str, snippet: &str) -> ItemRecord {
        ItemRecord {
            item_id: id.into(),
            name: name.into(),
            city: city.into(),
            categories: cats.iter().map(|c| c.to_string()).collect::<BTreeSet<_>>(),
            snippet: Some(snippet.into()),
        }
    }

    fn catalog() -> ItemCatalog {
        let mut items = Vec::new();
        for (i, city) in ["Pittsburgh", "Austin", "Boise"].iter().enumerate() {
            for j in 0..5 {
                let cat = if j % 2 == 0 { "Restaurants" } else { "Nightlife" };
                items.push(item(&format!("{i}-{j}"), city, &[cat], "n", "s"));
            }
        }
        ItemCatalog::from_items(items)
    }

    #[test]
    fn prefilter_city_and_category() {
        let c = catalog();
        let got = prefilter_candidates(&c, "pittsburgh", "restaurants");
        assert_eq!(got.iter().map(|i| i.item_id.as_str()).collect::<Vec<_>>(), ["0-0", "0-2", "0-4"]);
        assert_eq!(prefilter_candidates(&c, "Austin", "").len(), 5);
        assert_eq!(prefilter_candidates(&c, "", "").len(), 15);
        assert!(prefilter_candidates(&c, "Nowhere", "").is_empty());
    }

    #[test]
    fn prefilter_matches_linear_scan() {
        let c = catalog();
        let oracle = c
            .items()
            .iter()
            .filter(|i| i.city == "Boise" && i.categories.contains("Nightlife"))
            .count();
        assert_eq!(prefilter_candidates(&c, "BOISE", "nightlife").len(), oracle);
    }

    #[test]
    fn run_roundtrip() {
        let lists = vec![
            RankedList::from_ordered("q1", "bienc", vec![("a".into(), 0.25), ("b".into(), 1.5)]),
            RankedList::from_ordered("q2", "bienc", vec![("c".into(), -3.0)]),
        ];
        let mut buf = Vec::new();
        write_run(&mut buf, &lists).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "q1 Q0 a 1 0.25 bienc");
        assert_eq!(read_run(&buf[..]).unwrap(), lists);
    }

    #[test]
    fn malformed_run_rejected() {
        assert!(read_run("q1 Q0 a x 0.1 t\n".as_bytes()).is_err());
        assert!(read_run("q1 Q0 a 1\n".as_bytes()).is_err());
    }
}
