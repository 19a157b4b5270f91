//! Query-likelihood scoring and top-M retention of synthetic training pairs.
//!
//! A generated query rarely describes every item a user liked, so each of the
//! user's documents is scored by `log P(q | d)` and only the best-scoring
//! fraction is kept as training positives. The reference scorer is a
//! Dirichlet-smoothed unigram language model:
//!
//! `log P(q | d) = sum_t log[(tf(t, d) + mu * P(t | C)) / (|d| + mu)]`
//!
//! Any model that can score a query against a registered document can be
//! plugged in through [`QueryScorer`].

use crate::encoder::words;
use crate::qgen::SyntheticQuery;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

pub const DEFAULT_MU: f64 = 2000.0;

#[derive(Debug, thiserror::Error)]
pub enum QlError {
    #[error("cannot build language-model statistics from an empty corpus")]
    EmptyCorpus,
    #[error("smoothing parameter mu must be > 0, got {0}")]
    InvalidMu(f64),
    #[error("duplicate document id {0}")]
    DuplicateDoc(String),
    #[error("unknown document id {0}")]
    UnknownDoc(String),
    #[error("retain_fraction must be in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("no documents to filter")]
    NoDocs,
}

/// Scores `log P(query | doc)` for registered documents.
pub trait QueryScorer: Sync {
    fn score(&self, query: &str, doc_id: &str) -> Result<f64, QlError>;
}

/// Corpus and per-document term statistics for Dirichlet-smoothed scoring.
#[derive(Debug, Clone)]
pub struct LmStats {
    pub term_counts: HashMap<String, u64>,
    pub total_terms: u64,
    pub doc_term_counts: HashMap<String, HashMap<String, u32>>,
    pub doc_lengths: HashMap<String, u64>,
    pub mu: f64,
    unseen_terms: std::sync::Arc<AtomicU64>,
}

impl LmStats {
    /// Builds statistics over `(doc_id, text)` pairs.
    pub fn build<'a, I>(docs: I, mu: f64) -> Result<Self, QlError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(QlError::InvalidMu(mu));
        }
        let mut stats = LmStats {
            term_counts: HashMap::new(),
            total_terms: 0,
            doc_term_counts: HashMap::new(),
            doc_lengths: HashMap::new(),
            mu,
            unseen_terms: Default::default(),
        };
        for (id, text) in docs {
            if stats.doc_lengths.contains_key(id) {
                return Err(QlError::DuplicateDoc(id.to_string()));
            }
            let mut counts: HashMap<String, u32> = HashMap::new();
            let toks = words(text);
            for t in &toks {
                *counts.entry(t.clone()).or_default() += 1;
                *stats.term_counts.entry(t.clone()).or_default() += 1;
            }
            stats.total_terms += toks.len() as u64;
            stats.doc_lengths.insert(id.to_string(), toks.len() as u64);
            stats.doc_term_counts.insert(id.to_string(), counts);
        }
        if stats.doc_lengths.is_empty() {
            return Err(QlError::EmptyCorpus);
        }
        if stats.total_terms == 0 {
            return Err(QlError::EmptyCorpus);
        }
        Ok(stats)
    }

    pub fn num_docs(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.doc_lengths.contains_key(doc_id)
    }

    /// Background probability `P(t | C)`.
    pub fn corpus_prob(&self, term: &str) -> f64 {
        self.term_counts.get(term).copied().unwrap_or(0) as f64 / self.total_terms as f64
    }

    /// Number of query tokens skipped so far because they never occur in the corpus.
    pub fn unseen_term_count(&self) -> u64 {
        self.unseen_terms.load(Ordering::Relaxed)
    }

    /// Score plus the number of skipped out-of-corpus query tokens.
    pub fn score_detailed(&self, query: &str, doc_id: &str) -> Result<(f64, usize), QlError> {
        let counts = self
            .doc_term_counts
            .get(doc_id)
            .ok_or_else(|| QlError::UnknownDoc(doc_id.to_string()))?;
        let len = self.doc_lengths[doc_id] as f64;
        let mut total = 0.0;
        let mut skipped = 0;
        for t in words(query) {
            let p_c = self.corpus_prob(&t);
            if p_c == 0.0 {
                skipped += 1;
                continue;
            }
            let tf = f64::from(counts.get(&t).copied().unwrap_or(0));
            total += ((tf + self.mu * p_c) / (len + self.mu)).ln();
        }
        if skipped > 0 {
            self.unseen_terms.fetch_add(skipped as u64, Ordering::Relaxed);
        }
        Ok((total, skipped))
    }
}

impl QueryScorer for LmStats {
    fn score(&self, query: &str, doc_id: &str) -> Result<f64, QlError> {
        self.score_detailed(query, doc_id).map(|(s, _)| s)
    }
}

/// `log P(query | doc)` under `stats`.
pub fn ql_score(query: &str, doc_id: &str, stats: &LmStats) -> Result<f64, QlError> {
    stats.score(query, doc_id)
}

/// A document offered to [`filter_pairs`].
#[derive(Debug, Clone, Copy)]
pub struct CandidateDoc<'a> {
    pub doc_id: &'a str,
    pub item_id: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub query_id: String,
    pub user_id: String,
    pub doc_id: String,
    pub item_id: String,
    pub ql_score: f64,
    pub rank: usize,
    pub retained: bool,
}

/// `M = ceil(retain_fraction * n)`, at least 1.
pub fn retain_count(n: usize, retain_fraction: f64) -> usize {
    // Guard against 0.6 * 10 = 6.000000000000001 style rounding.
    let m = (retain_fraction * n as f64 - 1e-9).ceil() as usize;
    m.clamp(1, n)
}

/// Scores every document, ranks by `(-score, item_id, doc_id)` and marks the
/// top `ceil(retain_fraction * n)` as retained. All pairs are returned.
pub fn filter_pairs(
    query: &SyntheticQuery,
    docs: &[CandidateDoc<'_>],
    scorer: &dyn QueryScorer,
    retain_fraction: f64,
) -> Result<Vec<ScoredPair>, QlError> {
    if !(retain_fraction > 0.0 && retain_fraction <= 1.0) {
        return Err(QlError::InvalidFraction(retain_fraction));
    }
    if docs.is_empty() {
        return Err(QlError::NoDocs);
    }
    let mut scored = docs
        .iter()
        .map(|d| Ok((scorer.score(&query.text, d.doc_id)?, d)))
        .collect::<Result<Vec<_>, QlError>>()?;
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.item_id.cmp(b.1.item_id))
            .then_with(|| a.1.doc_id.cmp(b.1.doc_id))
    });
    let m = retain_count(docs.len(), retain_fraction);
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (score, d))| ScoredPair {
            query_id: query.query_id.clone(),
            user_id: query.user_id.clone(),
            doc_id: d.doc_id.to_string(),
            item_id: d.item_id.to_string(),
            ql_score: score,
            rank: i + 1,
            retained: i < m,
        })
        .collect())
}
