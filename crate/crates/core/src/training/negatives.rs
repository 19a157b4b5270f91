use super::{TrainError, TrainingExample};
use crate::encoder::{EncoderModel, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

/// A (query, positive document) training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPair {
    pub query_id: String,
    pub user_id: String,
    pub query_text: String,
    pub positive_doc_id: String,
    pub positive_text: String,
}

/// A document available as a negative, with its owning user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolDoc {
    pub doc_id: String,
    pub user_id: String,
    pub text: String,
}

/// One uniformly drawn negative per pair, never owned by the pair's user.
pub fn sample_random_negatives(
    pairs: &[TrainPair],
    pool: &[PoolDoc],
    seed: u64,
) -> Result<Vec<TrainingExample>, TrainError> {
    let mut owned: HashMap<&str, usize> = HashMap::new();
    for d in pool {
        *owned.entry(d.user_id.as_str()).or_default() += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .iter()
        .map(|p| {
            let own = owned.get(p.user_id.as_str()).copied().unwrap_or(0);
            if own >= pool.len() {
                return Err(TrainError::EmptyPool {
                    user_id: p.user_id.clone(),
                });
            }
            // Rejection sampling is uniform over the eligible docs.
            let neg = loop {
                let d = &pool[rng.random_range(0..pool.len())];
                if d.user_id != p.user_id {
                    break d;
                }
            };
            Ok(TrainingExample {
                query_id: p.query_id.clone(),
                query_text: p.query_text.clone(),
                positive_text: p.positive_text.clone(),
                negative_texts: vec![neg.text.clone()],
            })
        })
        .collect()
}

/// Inclusive 1-based rank window after clipping to a pool of `n` docs:
/// `[lo, hi]` when `n >= hi`, else `[min(lo, n - k), n]` (at least rank 1).
pub fn clipped_window(range: (usize, usize), n: usize, k: usize) -> (usize, usize) {
    let (lo, hi) = range;
    if n >= hi {
        (lo, hi)
    } else {
        (lo.min(n.saturating_sub(k)).max(1), n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedNegatives {
    /// `(pool index, 1-based rank)`, ordered by rank.
    pub picks: Vec<(usize, usize)>,
    pub window: (usize, usize),
}

/// Ranks a fixed document pool by bi-encoder distance.
pub struct NegativeMiner<'a> {
    model: &'a EncoderModel,
    pool: &'a [PoolDoc],
    vectors: Vec<Vector>,
}

impl<'a> NegativeMiner<'a> {
    pub fn new(model: &'a EncoderModel, pool: &'a [PoolDoc]) -> Self {
        let vectors = pool.par_iter().map(|d| model.embed_text(&d.text)).collect();
        Self {
            model,
            pool,
            vectors,
        }
    }

    /// Pool indices ordered by ascending distance to `query`, ties by doc id.
    pub fn ranking(&self, query: &str) -> Vec<usize> {
        let q = self.model.embed_text(query);
        let dist: Vec<f64> = self.vectors.iter().map(|v| q.l2_distance(v)).collect();
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        order.sort_by(|&a, &b| {
            dist[a]
                .total_cmp(&dist[b])
                .then_with(|| self.pool[a].doc_id.cmp(&self.pool[b].doc_id))
        });
        order
    }

    /// Draws `k` docs uniformly without replacement from the rank window,
    /// skipping doc ids in `exclude`. Takes all candidates (with a warning)
    /// when fewer than `k` remain.
    pub fn mine(
        &self,
        query: &str,
        exclude: &BTreeSet<&str>,
        range: (usize, usize),
        k: usize,
        seed: u64,
    ) -> MinedNegatives {
        let order = self.ranking(query);
        let window = clipped_window(range, order.len(), k);
        let candidates: Vec<(usize, usize)> = order
            .iter()
            .enumerate()
            .map(|(i, &idx)| (idx, i + 1))
            .filter(|&(idx, rank)| {
                rank >= window.0 && rank <= window.1 && !exclude.contains(self.pool[idx].doc_id.as_str())
            })
            .collect();
        let mut picks = if candidates.len() <= k {
            if candidates.len() < k {
                log::warn!(
                    "only {} hard-negative candidates in ranks {:?}; wanted {k}",
                    candidates.len(),
                    window
                );
            }
            candidates
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, candidates.len(), k)
                .into_iter()
                .map(|i| candidates[i])
                .collect()
        };
        picks.sort_by_key(|&(_, rank)| rank);
        MinedNegatives { picks, window }
    }

    pub fn pool(&self) -> &[PoolDoc] {
        self.pool
    }
}

/// Mines `k` hard negatives for one query; see [`NegativeMiner::mine`].
#[allow(clippy::too_many_arguments)]
pub fn mine_hard_negatives(
    biencoder: &EncoderModel,
    query_id: &str,
    query_text: &str,
    positive_text: &str,
    pool: &[PoolDoc],
    exclude: &BTreeSet<&str>,
    range: (usize, usize),
    k: usize,
    seed: u64,
) -> TrainingExample {
    let miner = NegativeMiner::new(biencoder, pool);
    let mined = miner.mine(query_text, exclude, range, k, seed);
    TrainingExample {
        query_id: query_id.to_string(),
        query_text: query_text.to_string(),
        positive_text: positive_text.to_string(),
        negative_texts: mined.picks.iter().map(|&(i, _)| pool[i].text.clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn pair(user: &str) -> TrainPair {
        TrainPair {
            query_id: format!("q-{user}"),
            user_id: user.into(),
            query_text: "q".into(),
            positive_doc_id: "p".into(),
            positive_text: "p".into(),
        }
    }

    fn doc(id: &str, user: &str) -> PoolDoc {
        PoolDoc {
            doc_id: id.into(),
            user_id: user.into(),
            text: format!("text {id}"),
        }
    }

    #[test]
    fn forced_choice_with_one_eligible() {
        let pool = vec![doc("a", "u1"), doc("b", "u2")];
        for seed in 0..20 {
            let ex = sample_random_negatives(&[pair("u1")], &pool, seed).unwrap();
            assert_eq!(ex[0].negative_texts, vec!["text b"]);
        }
    }

    #[test]
    fn same_seed_same_assignment() {
        let pool: Vec<_> = (0..50).map(|i| doc(&format!("d{i}"), &format!("u{}", i % 5))).collect();
        let pairs: Vec<_> = (0..5).map(|i| pair(&format!("u{i}"))).collect();
        assert_eq!(
            sample_random_negatives(&pairs, &pool, 4).unwrap(),
            sample_random_negatives(&pairs, &pool, 4).unwrap()
        );
    }

    #[test]
    fn empty_eligible_pool_errors() {
        let pool = vec![doc("a", "u1")];
        assert!(matches!(
            sample_random_negatives(&[pair("u1")], &pool, 0),
            Err(TrainError::EmptyPool { .. })
        ));
    }

    #[test]
    fn uniform_within_three_sigma() {
        // 10 eligible docs plus 2 owned; 10,000 draws.
        let mut pool: Vec<_> = (0..10).map(|i| doc(&format!("d{i}"), "other")).collect();
        pool.push(doc("own1", "u1"));
        pool.push(doc("own2", "u1"));
        let pairs: Vec<_> = (0..10_000).map(|_| pair("u1")).collect();
        let ex = sample_random_negatives(&pairs, &pool, 11).unwrap();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for e in &ex {
            *counts.entry(e.negative_texts[0].clone()).or_default() += 1;
        }
        assert!(!counts.contains_key("text own1") && !counts.contains_key("text own2"));
        let (n, p): (f64, f64) = (10_000.0, 0.1);
        let sigma = (n * p * (1.0 - p)).sqrt();
        for (k, c) in counts {
            assert!((c as f64 - n * p).abs() <= 3.0 * sigma, "{k}: {c}");
        }
    }

    #[test]
    fn window_clipping() {
        assert_eq!(clipped_window((100, 300), 1000, 4), (100, 300));
        assert_eq!(clipped_window((100, 300), 150, 4), (100, 150));
        assert_eq!(clipped_window((100, 300), 50, 4), (46, 50));
        assert_eq!(clipped_window((100, 300), 3, 4), (1, 3));
    }

    #[test]
    fn mined_ranks_inside_window() {
        let cfg = EncoderConfig {
            vocab_buckets: 1024,
            dim: 8,
            hash_seed: 0,
        };
        let model = EncoderModel::new(cfg, 5).unwrap();
        let pool: Vec<_> = (0..40).map(|i| doc(&format!("d{i:02}"), "x")).collect();
        let miner = NegativeMiner::new(&model, &pool);
        let full = miner.ranking("text d07");
        let exclude: BTreeSet<&str> = ["d07"].into_iter().collect();
        let mined = miner.mine("text d07", &exclude, (10, 20), 4, 3);
        assert_eq!(mined.picks.len(), 4);
        for &(idx, rank) in &mined.picks {
            assert!((10..=20).contains(&rank));
            assert_eq!(full[rank - 1], idx);
            assert_ne!(pool[idx].doc_id, "d07");
        }
    }
}
