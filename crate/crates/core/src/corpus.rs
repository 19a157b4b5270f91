//! Review-corpus ingestion, user eligibility and prompt-snippet sampling.
//!
//! Reviews and items arrive as line-delimited JSON. Eligibility keeps users who
//! mostly describe what they like: items with too few reviews are dropped
//! first, then users with too few remaining reviews, then users whose average
//! rating or above-average review count falls outside the configured bounds.
//! The 45,193-user figure for the full Yelp corpus under the default
//! thresholds is the scale this was designed for; nothing here depends on it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid eligibility config: {0}")]
    InvalidConfig(String),
    #[error("user {user_id} has {available} docs, cannot sample {requested}")]
    NotEnoughDocs {
        user_id: String,
        available: usize,
        requested: usize,
    },
}

/// A single review: the text of one user-item interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewDoc {
    pub user_id: String,
    pub item_id: String,
    pub stars: u8,
    pub text: String,
    /// Byte ranges `[start, end)` of the sentences in `text`.
    pub sentence_spans: Vec<(usize, usize)>,
}

impl ReviewDoc {
    pub fn new(user_id: &str, item_id: &str, stars: u8, text: &str) -> Self {
        Self {
            user_id: user_id.to_string(),
            item_id: item_id.to_string(),
            stars,
            text: text.to_string(),
            sentence_spans: segment_sentences(text),
        }
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.sentence_spans.iter().map(|&(s, e)| &self.text[s..e])
    }

    /// The longest sentence by byte length; the earliest wins ties.
    pub fn longest_sentence(&self) -> &str {
        let mut best: Option<&str> = None;
        for s in self.sentences() {
            if best.is_none_or(|b| s.len() > b.len()) {
                best = Some(s);
            }
        }
        best.unwrap_or_else(|| self.text.trim())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

/// Reviews in file order plus the lines that could not be used.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReviewSet {
    pub reviews: Vec<ReviewDoc>,
    pub skipped: Vec<SkippedLine>,
}

impl ReviewSet {
    pub fn len(&self) -> usize {
        self.reviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub city: String,
    #[serde(default)]
    pub categories: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet: Option<String>,
}

impl ItemRecord {
    /// Text the encoders see for this item: name followed by the snippet.
    pub fn text(&self) -> String {
        match &self.snippet {
            Some(s) if !s.is_empty() => format!("{} {}", self.name, s),
            _ => self.name.clone(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ItemCatalog {
    items: Vec<ItemRecord>,
    index: HashMap<String, usize>,
    pub duplicates: usize,
    pub skipped: Vec<SkippedLine>,
}

impl ItemCatalog {
    pub fn from_items(items: impl IntoIterator<Item = ItemRecord>) -> Self {
        let mut cat = ItemCatalog::default();
        for it in items {
            cat.insert(it);
        }
        cat
    }

    /// Inserts `item`; a repeated `item_id` replaces the earlier record.
    pub fn insert(&mut self, item: ItemRecord) {
        match self.index.get(&item.item_id) {
            Some(&i) => {
                log::warn!("duplicate item_id {}; keeping the later record", item.item_id);
                self.duplicates += 1;
                self.items[i] = item;
            }
            None => {
                self.index.insert(item.item_id.clone(), self.items.len());
                self.items.push(item);
            }
        }
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemRecord> {
        self.index.get(item_id).map(|&i| &self.items[i])
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Splits `text` into sentence byte spans.
///
/// A sentence ends at `.`, `!` or `?` followed by whitespace or end of text.
/// Fragments with fewer than 3 non-whitespace characters are merged into the
/// preceding span (or the following one when they come first).
pub fn segment_sentences(text: &str) -> Vec<(usize, usize)> {
    let mut raw = Vec::new();
    let mut start: Option<usize> = None;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if start.is_none() && !c.is_whitespace() {
            start = Some(i);
        }
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = chars.peek().is_none_or(|&(_, n)| n.is_whitespace());
            if at_boundary {
                if let Some(s) = start.take() {
                    raw.push((s, i + c.len_utf8()));
                }
            }
        }
    }
    if let Some(s) = start {
        let end = s + text[s..].trim_end().len();
        raw.push((s, end));
    }

    let non_space = |(s, e): (usize, usize)| text[s..e].chars().filter(|c| !c.is_whitespace()).count();
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(raw.len());
    let mut carry: Option<usize> = None;
    for span in raw {
        let span = match carry.take() {
            Some(s) => (s, span.1),
            None => span,
        };
        if non_space(span) >= 3 {
            spans.push(span);
        } else if let Some(prev) = spans.last_mut() {
            prev.1 = span.1;
        } else {
            carry = Some(span.0);
        }
    }
    if let Some(s) = carry {
        spans.push((s, s + text[s..].trim_end().len()));
    }
    spans
}

#[derive(Deserialize)]
struct RawReview {
    user_id: Option<String>,
    item_id: Option<String>,
    stars: Option<f64>,
    text: Option<String>,
}

fn open_lines(path: &Path) -> Result<std::io::Lines<std::io::BufReader<std::fs::File>>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(std::io::BufReader::new(file).lines())
}

fn parse_review(line: &str) -> Result<ReviewDoc, String> {
    let raw: RawReview = serde_json::from_str(line).map_err(|e| format!("malformed JSON: {e}"))?;
    let user_id = raw.user_id.ok_or("missing user_id")?;
    let item_id = raw.item_id.ok_or("missing item_id")?;
    let stars = raw.stars.ok_or("missing stars")?;
    let text = raw.text.ok_or("missing text")?;
    if stars.fract() != 0.0 || !(1.0..=5.0).contains(&stars) {
        return Err(format!("stars {stars} outside [1, 5]"));
    }
    if text.trim().is_empty() {
        return Err("empty text".into());
    }
    Ok(ReviewDoc::new(&user_id, &item_id, stars as u8, &text))
}

/// Streams a `reviews.jsonl` file. Bad lines are recorded in `skipped`.
pub fn load_reviews(path: &Path) -> Result<ReviewSet, CorpusError> {
    let mut set = ReviewSet::default();
    for (i, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_review(&line) {
            Ok(doc) => set.reviews.push(doc),
            Err(reason) => set.skipped.push(SkippedLine { line: i + 1, reason }),
        }
    }
    if !set.skipped.is_empty() {
        log::warn!("{}: skipped {} review lines", path.display(), set.skipped.len());
    }
    Ok(set)
}

/// Streams an `items.jsonl` file. Lines without an `item_id` are skipped.
pub fn load_items(path: &Path) -> Result<ItemCatalog, CorpusError> {
    let mut catalog = ItemCatalog::default();
    for (i, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ItemRecord>(&line) {
            Ok(item) if !item.item_id.is_empty() => catalog.insert(item),
            Ok(_) => catalog.skipped.push(SkippedLine {
                line: i + 1,
                reason: "empty item_id".into(),
            }),
            Err(e) => catalog.skipped.push(SkippedLine {
                line: i + 1,
                reason: e.to_string(),
            }),
        }
    }
    Ok(catalog)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EligibilityConfig {
    pub min_reviews_per_user: usize,
    pub min_reviews_per_item: usize,
    pub min_avg_stars: f64,
    /// Inclusive `[lo, hi]` bound on the number of above-average reviews.
    pub above_avg_count_range: (usize, usize),
}

impl Default for EligibilityConfig {
    fn default() -> Self {
        Self {
            min_reviews_per_user: 10,
            min_reviews_per_item: 10,
            min_avg_stars: 3.0,
            above_avg_count_range: (10, 30),
        }
    }
}

impl EligibilityConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let (lo, hi) = self.above_avg_count_range;
        if lo > hi {
            return Err(CorpusError::InvalidConfig(format!("range [{lo}, {hi}] has lo > hi")));
        }
        if !self.min_avg_stars.is_finite() {
            return Err(CorpusError::InvalidConfig("min_avg_stars not finite".into()));
        }
        Ok(())
    }
}

/// A user together with the reviews that condition query generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserInteractionSet {
    pub user_id: String,
    /// Above-average reviews only, ordered by `(item_id, input order)`.
    pub docs: Vec<ReviewDoc>,
    /// Mean rating over all of the user's reviews, before any filtering.
    pub avg_stars: f64,
}

/// Applies the eligibility rules; output is sorted by `user_id`.
pub fn select_eligible_users(
    reviews: &[ReviewDoc],
    cfg: &EligibilityConfig,
) -> Result<Vec<UserInteractionSet>, CorpusError> {
    cfg.validate()?;
    let mut item_counts: HashMap<&str, usize> = HashMap::new();
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in reviews.iter().enumerate() {
        *item_counts.entry(&r.item_id).or_default() += 1;
        by_user.entry(&r.user_id).or_default().push(i);
    }

    let (lo, hi) = cfg.above_avg_count_range;
    let mut out = Vec::new();
    for (user, idxs) in by_user {
        let avg = idxs.iter().map(|&i| f64::from(reviews[i].stars)).sum::<f64>() / idxs.len() as f64;
        let remaining: Vec<usize> = idxs
            .into_iter()
            .filter(|&i| item_counts[reviews[i].item_id.as_str()] >= cfg.min_reviews_per_item)
            .collect();
        if remaining.len() < cfg.min_reviews_per_user || avg <= cfg.min_avg_stars {
            continue;
        }
        let mut above: Vec<usize> = remaining
            .into_iter()
            .filter(|&i| f64::from(reviews[i].stars) > avg)
            .collect();
        if above.len() < lo || above.len() > hi {
            continue;
        }
        above.sort_by(|&a, &b| reviews[a].item_id.cmp(&reviews[b].item_id).then(a.cmp(&b)));
        out.push(UserInteractionSet {
            user_id: user.to_string(),
            docs: above.into_iter().map(|i| reviews[i].clone()).collect(),
            avg_stars: avg,
        });
    }
    Ok(out)
}

/// One sentence drawn from one of a user's documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocSnippet {
    pub item_id: String,
    /// Position of the source document in `UserInteractionSet::docs`.
    pub doc_index: usize,
    pub sentence: String,
}

/// Samples `n` distinct docs uniformly without replacement and takes the
/// longest sentence of each. Output follows document order.
pub fn sample_prompt_docs(
    user: &UserInteractionSet,
    n: usize,
    seed: u64,
) -> Result<Vec<DocSnippet>, CorpusError> {
    if n > user.docs.len() {
        return Err(CorpusError::NotEnoughDocs {
            user_id: user.user_id.clone(),
            available: user.docs.len(),
            requested: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, user.docs.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|i| {
            let doc = &user.docs[i];
            DocSnippet {
                item_id: doc.item_id.clone(),
                doc_index: i,
                sentence: doc.longest_sentence().to_string(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn two_sentences() {
        let spans = segment_sentences("Great tacos. Slow service.");
        assert_eq!(spans, vec![(0, 12), (13, 26)]);
    }

    #[test]
    fn short_fragments_merge_backwards() {
        let t = "Loved the salsa bar. K. Would return!";
        let spans = segment_sentences(t);
        assert_eq!(spans.len(), 2);
        assert_eq!(&t[spans[0].0..spans[0].1], "Loved the salsa bar. K.");
        let t = "A. The rest of it was fine.";
        let spans = segment_sentences(t);
        assert_eq!(spans, vec![(0, t.len())]);
    }

    #[test]
    fn unterminated_tail_and_inner_dots() {
        let t = "Version 2.5 is out!! Try it  ";
        let spans = segment_sentences(t);
        assert_eq!(spans.len(), 2);
        assert_eq!(&t[spans[0].0..spans[0].1], "Version 2.5 is out!!");
        assert_eq!(&t[spans[1].0..spans[1].1], "Try it");
    }

    #[test]
    fn load_three_valid() {
        let f = write_tmp(&[
            r#"{"user_id":"u1","item_id":"i1","stars":5,"text":"Great tacos. Slow service."}"#,
            r#"{"user_id":"u1","item_id":"i2","stars":4,"text":"Nice.","extra":1}"#,
            r#"{"user_id":"u2","item_id":"i1","stars":1.0,"text":"Bad."}"#,
        ]);
        let set = load_reviews(f.path()).unwrap();
        assert_eq!(set.len(), 3);
        assert!(set.skipped.is_empty());
        assert_eq!(set.reviews[0].sentence_spans.len(), 2);
    }

    #[test]
    fn load_skips_missing_text_and_bad_stars() {
        let f = write_tmp(&[
            r#"{"user_id":"u1","item_id":"i1","stars":5,"text":"ok then"}"#,
            r#"{"user_id":"u1","item_id":"i2","stars":4}"#,
            r#"{"user_id":"u1","item_id":"i2","stars":6,"text":"too many"}"#,
            r#"not json"#,
        ]);
        let set = load_reviews(f.path()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.skipped.len(), 3);
        assert_eq!(set.skipped[0].line, 2);
        assert!(set.skipped[0].reason.contains("text"));
    }

    #[test]
    fn missing_file_is_fatal() {
        assert!(matches!(
            load_reviews(Path::new("/nonexistent/reviews.jsonl")),
            Err(CorpusError::Io { .. })
        ));
    }

    #[test]
    fn items_dedup_and_empty_categories() {
        let f = write_tmp(&[
            r#"{"item_id":"a","name":"A","city":"Pittsburgh","categories":["Restaurants"]}"#,
            r#"{"item_id":"b","name":"B","city":"Boston","categories":[]}"#,
        ]);
        let cat = load_items(f.path()).unwrap();
        assert_eq!(cat.len(), 2);
        assert!(cat.get("b").unwrap().categories.is_empty());

        let f = write_tmp(&[
            r#"{"item_id":"a","name":"first","city":"X","categories":[]}"#,
            r#"{"item_id":"a","name":"second","city":"X","categories":[]}"#,
            r#"{"name":"no id"}"#,
        ]);
        let cat = load_items(f.path()).unwrap();
        assert_eq!(cat.len(), 1);
        assert_eq!(cat.duplicates, 1);
        assert_eq!(cat.get("a").unwrap().name, "second");
        assert_eq!(cat.skipped.len(), 1);
    }

    fn rev(user: &str, item: &str, stars: u8) -> ReviewDoc {
        ReviewDoc::new(user, item, stars, &format!("{user} on {item}. Stars {stars}."))
    }

    #[test]
    fn constant_ratings_have_no_above_average() {
        let reviews: Vec<_> = (0..12).map(|i| rev("u", &format!("i{i}"), 5)).collect();
        let cfg = EligibilityConfig {
            min_reviews_per_item: 1,
            ..Default::default()
        };
        assert!(select_eligible_users(&reviews, &cfg).unwrap().is_empty());
    }

    #[test]
    fn empty_input_empty_output() {
        assert!(select_eligible_users(&[], &EligibilityConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn invalid_range_rejected() {
        let cfg = EligibilityConfig {
            above_avg_count_range: (5, 2),
            ..Default::default()
        };
        assert!(select_eligible_users(&[], &cfg).is_err());
    }

    /// Six users built so that exactly two satisfy every rule under
    /// (min_user=4, min_item=2, min_avg=3.0, above in [2, 3]).
    fn six_user_fixture() -> Vec<ReviewDoc> {
        let mut r = Vec::new();
        // Popular items p0..p9 each get a filler review so every review below lands
        // on an item with >= 2 reviews, except the "rare" items.
        for i in 0..10 {
            r.push(rev("zz_filler", &format!("p{i}"), 3));
        }
        // u1: 5,5,3,3 -> avg 4.0 > 3; above (5,5) = 2 in [2,3]. ELIGIBLE
        for (i, s) in [5, 5, 3, 3].iter().enumerate() {
            r.push(rev("u1", &format!("p{i}"), *s));
        }
        // u2: 5,5,5,2,2 -> avg 3.8; above 3 in range. ELIGIBLE
        for (i, s) in [5, 5, 5, 2, 2].iter().enumerate() {
            r.push(rev("u2", &format!("p{i}"), *s));
        }
        // u3: 3 reviews only -> too few.
        for (i, s) in [5, 4, 1].iter().enumerate() {
            r.push(rev("u3", &format!("p{i}"), *s));
        }
        // u4: avg (4+2+3+3)/4 = 3.0, not > 3.
        for (i, s) in [4, 2, 3, 3].iter().enumerate() {
            r.push(rev("u4", &format!("p{i}"), *s));
        }
        // u5: 5,5,5,5,1 -> avg 4.2, above 4 > hi=3.
        for (i, s) in [5, 5, 5, 5, 1].iter().enumerate() {
            r.push(rev("u5", &format!("p{i}"), *s));
        }
        // u6: 4 reviews but two are on rare items -> 2 remain < 4.
        r.push(rev("u6", "rare1", 5));
        r.push(rev("u6", "rare2", 5));
        r.push(rev("u6", "p1", 4));
        r.push(rev("u6", "p2", 2));
        r
    }

    fn fixture_cfg() -> EligibilityConfig {
        EligibilityConfig {
            min_reviews_per_user: 4,
            min_reviews_per_item: 2,
            min_avg_stars: 3.0,
            above_avg_count_range: (2, 3),
        }
    }

    #[test]
    fn planted_eligible_users_survive() {
        let users = select_eligible_users(&six_user_fixture(), &fixture_cfg()).unwrap();
        let ids: Vec<_> = users.iter().map(|u| u.user_id.as_str()).collect();
        assert_eq!(ids, ["u1", "u2"]);
        assert_eq!(users[0].docs.len(), 2);
        assert_eq!(users[1].docs.len(), 3);
        assert!((users[0].avg_stars - 4.0).abs() < 1e-9);
        assert!((users[1].avg_stars - 3.8).abs() < 1e-9);
        for u in &users {
            assert!(u.docs.iter().all(|d| d.user_id == u.user_id));
            assert!(u.docs.iter().all(|d| f64::from(d.stars) > u.avg_stars));
            assert!(u.docs.windows(2).all(|w| w[0].item_id <= w[1].item_id));
        }
    }

    #[test]
    fn avg_uses_full_prefilter_set() {
        // Rare item review (stars 1) is dropped by the item filter but still counts
        // toward the average: (1 + 5*4 + 3*4) / 9 = 33/9.
        let mut r = Vec::new();
        for i in 0..8 {
            r.push(rev("other", &format!("p{i}"), 3));
        }
        r.push(rev("u", "rare", 1));
        for i in 0..4 {
            r.push(rev("u", &format!("p{i}"), 5));
            r.push(rev("u", &format!("p{}", i + 4), 3));
        }
        let cfg = EligibilityConfig {
            min_reviews_per_user: 8,
            min_reviews_per_item: 2,
            min_avg_stars: 3.0,
            above_avg_count_range: (1, 10),
        };
        let users = select_eligible_users(&r, &cfg).unwrap();
        let u = users.iter().find(|u| u.user_id == "u").unwrap();
        assert!((u.avg_stars - 33.0 / 9.0).abs() < 1e-9);
        assert_eq!(u.docs.len(), 4);
    }

    fn user_with(n: usize) -> UserInteractionSet {
        UserInteractionSet {
            user_id: "u".into(),
            docs: (0..n)
                .map(|i| {
                    ReviewDoc::new(
                        "u",
                        &format!("i{i:02}"),
                        5,
                        &format!("Short one. This is the longer sentence number {i}."),
                    )
                })
                .collect(),
            avg_stars: 4.0,
        }
    }

    #[test]
    fn sampling_all_docs_covers_each_once() {
        let u = user_with(7);
        let s = sample_prompt_docs(&u, 7, 3).unwrap();
        let idx: Vec<_> = s.iter().map(|d| d.doc_index).collect();
        assert_eq!(idx, (0..7).collect::<Vec<_>>());
        assert!(s[0].sentence.starts_with("This is the longer"));
    }

    #[test]
    fn sampling_is_deterministic_and_checks_size() {
        let u = user_with(20);
        assert_eq!(sample_prompt_docs(&u, 10, 5).unwrap(), sample_prompt_docs(&u, 10, 5).unwrap());
        let err = sample_prompt_docs(&u, 21, 5).unwrap_err();
        assert!(err.to_string().contains("u") && err.to_string().contains("21"));
    }

    #[test]
    fn sampling_seed_sensitivity() {
        let u = user_with(20);
        let base = sample_prompt_docs(&u, 10, 0).unwrap();
        let differs = (1..=10).any(|s| sample_prompt_docs(&u, 10, s).unwrap() != base);
        assert!(differs);
    }

    #[test]
    fn longest_sentence_tie_takes_first() {
        let a = "x".repeat(39) + ".";
        let b = "y".repeat(39) + ".";
        let d = ReviewDoc::new("u", "i", 5, &format!("{a} {b}"));
        assert_eq!(d.longest_sentence(), a);
    }

    fn arb_reviews() -> impl Strategy<Value = Vec<ReviewDoc>> {
        prop::collection::vec((0..6usize, 0..8usize, 1..=5u8), 0..120).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(k, (u, i, s))| {
                    ReviewDoc::new(&format!("u{u}"), &format!("i{i}-{k}"), s, "Some review text.")
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn eligibility_monotone_in_min_user(reviews in arb_reviews(), a in 0..10usize, extra in 0..5usize) {
            let mut cfg = EligibilityConfig {
                min_reviews_per_user: a,
                min_reviews_per_item: 0,
                min_avg_stars: 2.0,
                above_avg_count_range: (1, 20),
            };
            let loose: BTreeSet<_> = select_eligible_users(&reviews, &cfg).unwrap()
                .into_iter().map(|u| u.user_id).collect();
            cfg.min_reviews_per_user = a + extra;
            let tight: BTreeSet<_> = select_eligible_users(&reviews, &cfg).unwrap()
                .into_iter().map(|u| u.user_id).collect();
            prop_assert!(tight.is_subset(&loose));
        }

        #[test]
        fn eligibility_invariant_under_permutation(reviews in arb_reviews(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let cfg = EligibilityConfig {
                min_reviews_per_user: 2,
                min_reviews_per_item: 0,
                min_avg_stars: 2.0,
                above_avg_count_range: (1, 30),
            };
            let mut shuffled = reviews.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                select_eligible_users(&reviews, &cfg).unwrap(),
                select_eligible_users(&shuffled, &cfg).unwrap()
            );
        }

        #[test]
        fn spans_sorted_disjoint_in_bounds(text in "[a-zA-Z .!?]{0,80}") {
            let spans = segment_sentences(&text);
            let mut prev_end = 0;
            for &(s, e) in &spans {
                prop_assert!(s >= prev_end && s < e && e <= text.len());
                prev_end = e;
            }
        }
    }
}
