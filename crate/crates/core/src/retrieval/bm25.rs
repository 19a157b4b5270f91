use super::RankedList;
use crate::corpus::ItemRecord;
use crate::encoder::words;
use std::collections::{BTreeSet, HashMap, HashSet};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Okapi BM25 over item text, using the encoder's word tokenizer.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<String>,
    tfs: Vec<HashMap<String, u32>>,
    lens: Vec<f64>,
    avgdl: f64,
    df: HashMap<String, usize>,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    pub fn build<'a, I>(items: I, k1: f64, b: f64) -> Self
    where
        I: IntoIterator<Item = &'a ItemRecord>,
    {
        let mut ids = Vec::new();
        let mut tfs = Vec::new();
        let mut lens = Vec::new();
        let mut df: HashMap<String, usize> = HashMap::new();
        for it in items {
            let toks = words(&it.text());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &toks {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            ids.push(it.item_id.clone());
            lens.push(toks.len() as f64);
            tfs.push(tf);
        }
        let avgdl = if lens.is_empty() {
            0.0
        } else {
            lens.iter().sum::<f64>() / lens.len() as f64
        };
        Self {
            ids,
            tfs,
            lens,
            avgdl,
            df,
            k1,
            b,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.ids.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn score_doc(&self, i: usize, terms: &BTreeSet<String>) -> f64 {
        let norm = if self.avgdl > 0.0 {
            self.k1 * (1.0 - self.b + self.b * self.lens[i] / self.avgdl)
        } else {
            self.k1
        };
        terms
            .iter()
            .filter_map(|t| self.tfs[i].get(t).map(|&tf| (t, f64::from(tf))))
            .map(|(t, tf)| self.idf(t) * tf * (self.k1 + 1.0) / (tf + norm))
            .sum()
    }

    /// Score of every indexed item for `query`, in index order.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let terms: BTreeSet<String> = words(query).into_iter().collect();
        (0..self.len()).map(|i| self.score_doc(i, &terms)).collect()
    }

    /// Top-`k` by descending score, ties by item id.
    pub fn rank(&self, query_id: &str, query: &str, k: usize, allowed: Option<&HashSet<&str>>) -> RankedList {
        let scores = self.scores(query);
        let mut order: Vec<usize> = (0..self.len())
            .filter(|&i| allowed.is_none_or(|a| a.contains(self.ids[i].as_str())))
            .collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| self.ids[a].cmp(&self.ids[b])));
        order.truncate(k);
        RankedList::from_ordered(
            query_id,
            "bm25",
            order.into_iter().map(|i| (self.ids[i].clone(), scores[i])).collect(),
        )
    }
}

/// Builds a BM25 index over `items` and ranks them for `query`.
pub fn bm25_rank(items: &[&ItemRecord], query_id: &str, query: &str, k: usize, k1: f64, b: f64) -> RankedList {
    Bm25Index::build(items.iter().copied(), k1, b).rank(query_id, query, k, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::tests::item;

    fn docs() -> Vec<ItemRecord> {
        vec![
            item("a", "c", &[], "", "spicy noodles noodles broth"),
            item("b", "c", &[], "", "quiet cafe with good coffee"),
            item("c", "c", &[], "", "noodles"),
        ]
    }

    #[test]
    fn matches_hand_computed_scores() {
        let d = docs();
        let idx = Bm25Index::build(&d, DEFAULT_K1, DEFAULT_B);
        // Hand oracle: N = 3, df(noodles) = 2, avgdl = (4 + 5 + 1) / 3.
        let idf = ((3.0 - 2.0 + 0.5) / (2.0 + 0.5) + 1.0f64).ln();
        let avgdl = 10.0 / 3.0;
        let s = |tf: f64, len: f64| idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * len / avgdl));
        let got = idx.scores("noodles");
        assert!((got[0] - s(2.0, 4.0)).abs() < 1e-12);
        assert_eq!(got[1], 0.0);
        assert!((got[2] - s(1.0, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn idf_formula() {
        let d = docs();
        let idx = Bm25Index::build(&d, DEFAULT_K1, DEFAULT_B);
        assert!((idx.idf("coffee") - (2.5f64 / 1.5 + 1.0).ln()).abs() < 1e-12);
        assert!((idx.idf("absent") - (3.5f64 / 0.5 + 1.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn ranking_order_and_ties() {
        let d = docs();
        let refs: Vec<&ItemRecord> = d.iter().collect();
        let r = bm25_rank(&refs, "q", "noodles", 3, DEFAULT_K1, DEFAULT_B);
        assert_eq!(r.entries[2].item_id, "b");
        assert!(r.entries[0].score >= r.entries[1].score);
        let none = bm25_rank(&refs, "q", "zzz", 3, DEFAULT_K1, DEFAULT_B);
        assert_eq!(none.item_ids().collect::<Vec<_>>(), ["a", "b", "c"]);
    }
}
