use super::{DenseRetriever, RankedList, RetrievalError};
use crate::corpus::ItemCatalog;
use crate::encoder::{CrossEncoderModel, ScoreMode};
use crate::qgen::{grounded_llm_generate, GroundedTemplate, Provider, ProviderConfig};
use crate::qlfilter::LmStats;
use rayon::prelude::*;
use std::collections::{HashMap, HashSet};

/// Re-orders `first` by descending score from `score`, ties by first-stage
/// rank. The output holds exactly the input items.
fn reorder<F>(first: &RankedList, tag: &str, score: F) -> Result<RankedList, RetrievalError>
where
    F: Fn(&str) -> Result<f64, RetrievalError> + Sync,
{
    let scores: Vec<f64> = first
        .entries
        .par_iter()
        .map(|e| score(&e.item_id))
        .collect::<Result<_, _>>()?;
    let mut order: Vec<usize> = (0..first.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| first.entries[a].rank.cmp(&first.entries[b].rank))
    });
    Ok(RankedList::from_ordered(
        &first.query_id,
        tag,
        order
            .into_iter()
            .map(|i| (first.entries[i].item_id.clone(), scores[i]))
            .collect(),
    ))
}

/// Scores every first-stage item with the cross-encoder (no dropout).
pub fn rerank_cross(
    model: &CrossEncoderModel,
    catalog: &ItemCatalog,
    query: &str,
    first: &RankedList,
) -> Result<RankedList, RetrievalError> {
    reorder(first, "cross", |id| {
        let item = catalog.get(id).ok_or_else(|| RetrievalError::UnknownItem(id.to_string()))?;
        Ok(model.score(query, &item.text(), ScoreMode::Inference))
    })
}

/// Re-orders the top `k` of `first` by query likelihood over item text.
/// `stats` must be keyed by item id.
pub fn ql_rerank(stats: &LmStats, query: &str, first: &RankedList, k: usize) -> Result<RankedList, RetrievalError> {
    reorder(&first.truncated(k), "ql", |id| Ok(stats.score_detailed(query, id)?.0))
}

/// Generative baseline: an LLM names places for the query, and each name is
/// mapped to its nearest catalog items.
pub struct GroundedRanker<'a> {
    pub template: &'a GroundedTemplate,
    pub provider: &'a dyn Provider,
    pub cfg: &'a ProviderConfig,
    pub n_items: usize,
    pub neighbors_per_item: usize,
}

/// Merges nearest neighbours of each pseudo-item, keeping each catalog item's
/// smallest distance. Ties go to the earlier pseudo-item, then to the
/// neighbour rank, then to item id. Scores are distances.
pub fn merge_pseudo_items(
    retriever: &DenseRetriever<'_>,
    query_id: &str,
    pseudo_items: &[String],
    neighbors_per_item: usize,
    allowed: Option<&HashSet<&str>>,
) -> RankedList {
    let mut best: HashMap<String, (f64, usize, usize)> = HashMap::new();
    for (p, name) in pseudo_items.iter().enumerate() {
        for (r, (id, d)) in retriever.nearest(name, neighbors_per_item, allowed).into_iter().enumerate() {
            let cand = (d, p, r);
            best.entry(id)
                .and_modify(|cur| {
                    if cand.0 < cur.0 {
                        *cur = cand;
                    }
                })
                .or_insert(cand);
        }
    }
    let mut merged: Vec<(String, (f64, usize, usize))> = best.into_iter().collect();
    merged.sort_by(|a, b| {
        a.1 .0
            .total_cmp(&b.1 .0)
            .then(a.1 .1.cmp(&b.1 .1))
            .then(a.1 .2.cmp(&b.1 .2))
            .then_with(|| a.0.cmp(&b.0))
    });
    RankedList::from_ordered(query_id, "grounded", merged.into_iter().map(|(id, (d, _, _))| (id, d)).collect())
}

/// Generates pseudo-items for `query` and merges their neighbours. An empty
/// generation yields an empty ranking.
pub fn grounded_llm_rank(
    ranker: &GroundedRanker<'_>,
    retriever: &DenseRetriever<'_>,
    query_id: &str,
    query: &str,
    allowed: Option<&HashSet<&str>>,
) -> Result<RankedList, RetrievalError> {
    let pseudo = grounded_llm_generate(query, ranker.template, ranker.provider, ranker.cfg, ranker.n_items)?;
    if pseudo.is_empty() {
        log::warn!("query {query_id}: no pseudo-items generated");
    }
    Ok(merge_pseudo_items(retriever, query_id, &pseudo, ranker.neighbors_per_item, allowed))
}
