//! Synthetic planted-signal corpus for end-to-end checks.
//!
//! Every category owns a handful of topics. A topic is a set of made-up
//! words: some are "canonical" and appear in item descriptions and reviews,
//! the rest are "anchors" that only reviews use. The synonym table rewrites
//! each canonical word into a phrase of unrelated made-up words, so queries
//! produced by the stub generator share almost no vocabulary with the items
//! they should retrieve. Relevance is known by construction: an item is
//! grade 2 for its primary topic and grade 1 for its secondary topic.

use crate::corpus::{ItemRecord, ReviewDoc};
use crate::encoder::{words, EncoderConfig};
use crate::eval::Qrels;
use crate::hashing::{derive_seed, derive_seed_str, sha256_hex};
use crate::pipeline::{PathsConfig, PipelineConfig};
use crate::qgen::{stub_generate, SynonymTable, STOPWORDS};
use crate::retrieval::TestQuery;
use crate::training::TrainConfig;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CITIES: &[&str] = &["Pittsburgh", "Las Vegas", "Phoenix", "Toronto", "Charlotte"];
pub const CATEGORIES: &[&str] = &["Restaurants", "Nightlife", "Shopping", "Active Life"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub items_per_cell: usize,
    pub topics_per_category: usize,
    pub canonical_per_topic: usize,
    pub anchors_per_topic: usize,
    pub train_users: usize,
    /// Above-average reviews per training user about the user's own topic.
    pub on_topic_reviews: usize,
    /// Above-average reviews per training user about unrelated topics.
    pub off_topic_reviews: usize,
    /// One-star reviews per training user.
    pub low_reviews: usize,
    pub test_queries: usize,
    /// Held-out review sentences behind each test query.
    pub test_snippets: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            items_per_cell: 25,
            topics_per_category: 5,
            canonical_per_topic: 5,
            anchors_per_topic: 3,
            train_users: 60,
            on_topic_reviews: 8,
            off_topic_reviews: 4,
            low_reviews: 3,
            test_queries: 40,
            test_snippets: 10,
        }
    }
}

#[derive(Debug, Clone)]
struct Topic {
    category: usize,
    canonical: Vec<String>,
    anchors: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub items: Vec<ItemRecord>,
    pub reviews: Vec<ReviewDoc>,
    pub synonyms: BTreeMap<String, String>,
    pub test_queries: Vec<TestQuery>,
    pub qrels: Qrels,
    /// Primary and secondary topic index of every item, keyed by item id.
    pub item_topics: BTreeMap<String, (usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixturePaths {
    pub reviews: PathBuf,
    pub items: PathBuf,
    pub synonyms: PathBuf,
    pub test_queries: PathBuf,
    pub qrels: PathBuf,
}

impl FixturePaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            reviews: dir.join("reviews.jsonl"),
            items: dir.join("items.jsonl"),
            synonyms: dir.join("synonyms.json"),
            test_queries: dir.join("test_queries.jsonl"),
            qrels: dir.join("qrels.txt"),
        }
    }

    /// A pipeline configuration sized for the fixture: small encoder, every
    /// item kept by the eligibility rules and an unthrottled stub provider.
    pub fn pipeline_config(&self, workdir: &Path, seed: u64) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            paths: PathsConfig {
                reviews: self.reviews.clone(),
                items: self.items.clone(),
                workdir: workdir.to_path_buf(),
                test_queries: self.test_queries.clone(),
                qrels: self.qrels.clone(),
                synonyms: Some(self.synonyms.clone()),
            },
            seed,
            ..PipelineConfig::default()
        };
        cfg.eligibility.min_reviews_per_item = 1;
        cfg.provider.requests_per_minute = 1e9;
        cfg.provider.backoff_base_secs = 0.0;
        cfg.encoder = EncoderConfig {
            vocab_buckets: 16384,
            dim: 32,
            ..cfg.encoder
        };
        cfg.cross_head.hidden = 64;
        cfg.train_bi = TrainConfig {
            learning_rate: 0.05,
            batch_size: 16,
            epochs: 15,
            margin: 0.5,
            ..cfg.train_bi
        };
        cfg.train_cross = TrainConfig {
            learning_rate: 0.02,
            batch_size: 16,
            epochs: 10,
            n_negatives: 8,
            ..cfg.train_cross
        };
        cfg
    }
}

/// Produces unique pronounceable nonsense words.
struct WordForge {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl WordForge {
    const CONSONANTS: &'static [u8] = b"bdfgklmnprstvz";
    const VOWELS: &'static [u8] = b"aeiou";

    fn word(&mut self, syllables: usize, tail: bool) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(*Self::CONSONANTS.choose(&mut self.rng).unwrap() as char);
                w.push(*Self::VOWELS.choose(&mut self.rng).unwrap() as char);
            }
            if tail {
                w.push(*Self::CONSONANTS.choose(&mut self.rng).unwrap() as char);
            }
            if STOPWORDS.binary_search(&w.as_str()).is_err() && self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

const REVIEW_GLUE: &[&str] = &["the", "was", "and", "very", "with", "so", "too", "their"];

/// A review about `topic`: a long sentence that repeats three focus words
/// and a shorter one.
fn review_text(topic: &Topic, rng: &mut ChaCha8Rng) -> String {
    let vocab: Vec<&String> = topic.canonical.iter().chain(&topic.anchors).collect();
    let mut shuffled = vocab.clone();
    shuffled.shuffle(rng);
    let mut long: Vec<&str> = Vec::new();
    for w in &shuffled[..3] {
        long.push(w);
        long.push(w);
    }
    for w in &shuffled[3..6.min(shuffled.len())] {
        long.push(w);
    }
    for _ in 0..5 {
        long.push(REVIEW_GLUE.choose(rng).unwrap());
    }
    long.shuffle(rng);
    let short: Vec<&str> = vec![
        REVIEW_GLUE.choose(rng).unwrap(),
        vocab.choose(rng).unwrap(),
        REVIEW_GLUE.choose(rng).unwrap(),
    ];
    let mut s = long.join(" ");
    s.push_str(". ");
    s.push_str(&short.join(" "));
    s.push('.');
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => s,
    }
}

/// The longest sentence of a generated review, as prompt sampling would take it.
fn lead_sentence(text: &str) -> String {
    ReviewDoc::new("x", "x", 5, text).longest_sentence().to_string()
}

pub fn synth_fixture(seed: u64, cfg: &FixtureConfig) -> Fixture {
    let mut forge = WordForge {
        rng: ChaCha8Rng::seed_from_u64(derive_seed_str(seed, "fixture-words")),
        used: BTreeSet::new(),
    };
    let n_topics = CATEGORIES.len() * cfg.topics_per_category;
    let topics: Vec<Topic> = (0..n_topics)
        .map(|t| Topic {
            category: t / cfg.topics_per_category,
            canonical: (0..cfg.canonical_per_topic).map(|_| forge.word(3, false)).collect(),
            anchors: (0..cfg.anchors_per_topic).map(|_| forge.word(2, true)).collect(),
        })
        .collect();
    let mut synonyms = BTreeMap::new();
    for t in &topics {
        for c in &t.canonical {
            synonyms.insert(c.clone(), format!("{} {}", forge.word(2, true), forge.word(3, true)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(seed, "fixture-items"));
    let mut items = Vec::new();
    let mut item_topics = BTreeMap::new();
    // (city, category) -> item indices
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let tpc = cfg.topics_per_category;
    for (ci, city) in CITIES.iter().enumerate() {
        for (gi, cat) in CATEGORIES.iter().enumerate() {
            for j in 0..cfg.items_per_cell {
                let p = j % tpc;
                let s = (p + 1 + (j / tpc) % (tpc - 1)) % tpc;
                let (pt, st) = (gi * tpc + p, gi * tpc + s);
                let mut desc: Vec<&str> = topics[pt].canonical.choose_multiple(&mut rng, 4).map(String::as_str).collect();
                desc.extend(topics[st].canonical.choose_multiple(&mut rng, 2).map(String::as_str));
                desc.shuffle(&mut rng);
                let idx = items.len();
                let item_id = format!("poi-{}", &sha256_hex(format!("{seed}/{idx}").as_bytes())[..12]);
                let cap = |w: String| w[..1].to_uppercase() + &w[1..];
                let name = format!("{} {}", cap(forge.word(2, true)), cap(forge.word(2, false)));
                items.push(ItemRecord {
                    item_id: item_id.clone(),
                    name,
                    city: city.to_string(),
                    categories: [cat.to_string()].into_iter().collect(),
                    snippet: Some(desc.join(" ")),
                });
                item_topics.insert(item_id, (pt, st));
                cells.entry((ci, gi)).or_default().push(idx);
            }
        }
    }
    let by_topic: Vec<Vec<usize>> = (0..n_topics)
        .map(|t| (0..items.len()).filter(|&i| item_topics[&items[i].item_id].0 == t).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(seed, "fixture-reviews"));
    let mut reviews = Vec::new();
    for u in 0..cfg.train_users {
        let user = format!("user{u:03}");
        let t = u % n_topics;
        let mut seen = BTreeSet::new();
        let mut pick_item = |topic: usize, rng: &mut ChaCha8Rng| loop {
            let i = *by_topic[topic].choose(rng).unwrap();
            if seen.insert(i) {
                return i;
            }
        };
        let mut plan: Vec<(usize, u8)> = Vec::new();
        for _ in 0..cfg.on_topic_reviews {
            plan.push((t, 5));
        }
        for _ in 0..cfg.off_topic_reviews {
            plan.push(((t + rng.random_range(1..n_topics)) % n_topics, 5));
        }
        for _ in 0..cfg.low_reviews {
            plan.push(((t + rng.random_range(1..n_topics)) % n_topics, 1));
        }
        plan.shuffle(&mut rng);
        for (topic, stars) in plan {
            let i = pick_item(topic, &mut rng);
            let text = review_text(&topics[topic], &mut rng);
            reviews.push(ReviewDoc::new(&user, &items[i].item_id, stars, &text));
        }
    }

    let table = SynonymTable::new(synonyms.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(seed, "fixture-tests"));
    let mut test_queries = Vec::new();
    let mut qrels = Qrels::default();
    for q in 0..cfg.test_queries {
        let t = (q * 7 + 3) % n_topics;
        let gi = topics[t].category;
        let ci = rng.random_range(0..CITIES.len());
        let mut snippets: Vec<String> = (0..cfg.test_snippets)
            .map(|k| {
                let topic = if k % 5 == 4 {
                    (t + rng.random_range(1..n_topics)) % n_topics
                } else {
                    t
                };
                lead_sentence(&review_text(&topics[topic], &mut rng))
            })
            .collect();
        snippets.shuffle(&mut rng);
        let query_id = format!("test{q:03}");
        let text = stub_generate(&snippets, &table, derive_seed(seed, &[0x7e57, q as u64]));
        for &i in &cells[&(ci, gi)] {
            let (p, s) = item_topics[&items[i].item_id];
            let grade = if p == t {
                2
            } else if s == t {
                1
            } else {
                0
            };
            qrels.insert(&query_id, &items[i].item_id, grade).expect("fresh judgment");
        }
        test_queries.push(TestQuery {
            query_id,
            text,
            city: CITIES[ci].to_string(),
            category: CATEGORIES[gi].to_string(),
        });
    }

    Fixture {
        items,
        reviews,
        synonyms,
        test_queries,
        qrels,
        item_topics,
    }
}

fn content_words(text: &str) -> BTreeSet<String> {
    words(text)
        .into_iter()
        .filter(|w| STOPWORDS.binary_search(&w.as_str()).is_err())
        .collect()
}

/// Share of a query's distinct content words that also occur in `docs`.
pub fn vocab_overlap(query: &str, docs: &[&str]) -> f64 {
    let q = content_words(query);
    if q.is_empty() {
        return 0.0;
    }
    let d: BTreeSet<String> = docs.iter().flat_map(|t| content_words(t)).collect();
    q.intersection(&d).count() as f64 / q.len() as f64
}

impl Fixture {
    /// Mean overlap between each test query and its relevant items' text.
    pub fn mean_test_overlap(&self) -> f64 {
        let texts: BTreeMap<&str, String> = self.items.iter().map(|i| (i.item_id.as_str(), i.text())).collect();
        let vals: Vec<f64> = self
            .test_queries
            .iter()
            .map(|q| {
                let rel: Vec<&str> = self.qrels.judgments[&q.query_id]
                    .iter()
                    .filter(|(_, &g)| g >= 1)
                    .map(|(id, _)| texts[id.as_str()].as_str())
                    .collect();
                vocab_overlap(&q.text, &rel)
            })
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<FixturePaths> {
        std::fs::create_dir_all(dir)?;
        let paths = FixturePaths::in_dir(dir);
        let jsonl = |path: &Path, rows: Vec<serde_json::Value>| -> std::io::Result<()> {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            for r in rows {
                writeln!(f, "{r}")?;
            }
            f.flush()
        };
        jsonl(
            &paths.reviews,
            self.reviews
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "user_id": r.user_id,
                        "item_id": r.item_id,
                        "stars": r.stars,
                        "text": r.text,
                    })
                })
                .collect(),
        )?;
        jsonl(
            &paths.items,
            self.items.iter().map(|i| serde_json::to_value(i).expect("item")).collect(),
        )?;
        jsonl(
            &paths.test_queries,
            self.test_queries.iter().map(|q| serde_json::to_value(q).expect("query")).collect(),
        )?;
        std::fs::write(&paths.synonyms, serde_json::to_string_pretty(&self.synonyms).expect("map"))?;
        std::fs::write(&paths.qrels, self.qrels.to_trec())?;
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{select_eligible_users, EligibilityConfig};

    #[test]
    fn shape_and_determinism() {
        let cfg = FixtureConfig::default();
        let f = synth_fixture(3, &cfg);
        assert_eq!(f.items.len(), 500);
        assert_eq!(f.test_queries.len(), 40);
        assert_eq!(f.reviews.len(), 60 * 15);
        let ids: BTreeSet<&str> = f.items.iter().map(|i| i.item_id.as_str()).collect();
        assert_eq!(ids.len(), 500);
        let g = synth_fixture(3, &cfg);
        assert_eq!(f.items, g.items);
        assert_eq!(f.reviews, g.reviews);
        assert_eq!(f.test_queries, g.test_queries);
        assert_ne!(synth_fixture(4, &cfg).items, f.items);
    }

    #[test]
    fn every_training_user_is_eligible() {
        let f = synth_fixture(1, &FixtureConfig::default());
        let elig = EligibilityConfig {
            min_reviews_per_item: 1,
            ..EligibilityConfig::default()
        };
        let users = select_eligible_users(&f.reviews, &elig).unwrap();
        assert_eq!(users.len(), 60);
        assert!(users.iter().all(|u| u.docs.len() == 12));
    }

    #[test]
    fn qrels_follow_topics() {
        let f = synth_fixture(2, &FixtureConfig::default());
        for q in &f.test_queries {
            let j = &f.qrels.judgments[&q.query_id];
            assert_eq!(j.len(), 25);
            assert_eq!(j.values().filter(|&&g| g == 2).count(), 5);
            assert!(j.values().any(|&g| g == 1));
        }
    }

    #[test]
    fn queries_barely_overlap_relevant_items() {
        let f = synth_fixture(5, &FixtureConfig::default());
        assert!(f.mean_test_overlap() < 0.10);
        assert!(f.test_queries.iter().all(|q| {
            let n = q.text.split_whitespace().count();
            (60..=200).contains(&n)
        }));
    }

    #[test]
    fn overlap_measure() {
        assert_eq!(vocab_overlap("the kabero and dumesi", &["kabero tolavi"]), 0.5);
        assert_eq!(vocab_overlap("", &["x"]), 0.0);
    }

    #[test]
    fn files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let f = synth_fixture(1, &FixtureConfig::default());
        let p = f.write(dir.path()).unwrap();
        assert_eq!(crate::corpus::load_reviews(&p.reviews).unwrap().len(), f.reviews.len());
        assert_eq!(crate::corpus::load_items(&p.items).unwrap().len(), 500);
        assert_eq!(Qrels::read_file(&p.qrels).unwrap(), f.qrels);
        assert_eq!(crate::retrieval::read_test_queries(&p.test_queries).unwrap(), f.test_queries);
        assert_eq!(SynonymTable::from_json_file(&p.synonyms).unwrap().len(), 100);
    }
}
