//! Offline stand-in for a text-generation model.
//!
//! The stub extracts salient content terms from the prompt snippets, rewrites
//! them through a synonym table and templates them into first-person request
//! sentences. Output is a pure function of its inputs.

use super::provider::{Completion, CompletionRequest, Provider, ProviderError};
use super::template::{one_line, GroundedTemplate, PromptTemplate};
use super::QgenError;
use crate::encoder::words;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

pub const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "all", "also", "am", "an", "and", "any", "are", "as",
    "at", "be", "because", "been", "before", "being", "below", "between", "both", "but", "by",
    "can", "could", "did", "do", "does", "doing", "down", "during", "each", "even", "ever", "every",
    "few", "for", "from", "further", "get", "got", "had", "has", "have", "having", "he", "her",
    "here", "hers", "him", "his", "how", "i", "if", "in", "into", "is", "it", "its", "just", "like",
    "me", "more", "most", "much", "my", "no", "nor", "not", "now", "of", "off", "on", "once",
    "one", "only", "or", "other", "our", "ours", "out", "over", "own", "really", "same", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them", "then",
    "there", "these", "they", "this", "those", "through", "to", "too", "under", "until", "up",
    "us", "very", "was", "we", "were", "what", "when", "where", "which", "while", "who", "whom",
    "why", "will", "with", "would", "you", "your", "yours",
];

fn is_stopword(w: &str) -> bool {
    STOPWORDS.binary_search(&w).is_ok()
}

/// Term-to-phrase rewrite table. Unmapped terms pass through unchanged.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymTable {
    map: BTreeMap<String, String>,
}

impl SynonymTable {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        let map = map
            .into_iter()
            .map(|(k, v)| (k.to_lowercase(), one_line(&v)))
            .collect();
        Self { map }
    }

    /// Loads a JSON object of `"term": "replacement phrase"` pairs.
    pub fn from_json_file(path: &Path) -> Result<Self, QgenError> {
        let err = |reason: String| QgenError::SynonymTable {
            path: path.display().to_string(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        let map: BTreeMap<String, String> =
            serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        Ok(Self::new(map))
    }

    pub fn get(&self, term: &str) -> Option<&str> {
        self.map.get(term).map(String::as_str)
    }

    pub fn map_term<'a>(&'a self, term: &'a str) -> &'a str {
        self.get(term).unwrap_or(term)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubConfig {
    /// Salient terms taken from each snippet.
    pub top_k: usize,
    pub min_terms: usize,
    pub max_terms: usize,
    /// Leading fraction of the snippets that is read.
    pub snippet_fraction: f64,
    /// Probability of replacing a term's mapping with a random table phrase.
    pub noise: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            min_terms: 8,
            max_terms: 24,
            snippet_fraction: 1.0,
            noise: 0.0,
        }
    }
}

impl StubConfig {
    /// Degraded settings emulating a weaker generator.
    pub fn weak() -> Self {
        Self {
            top_k: 1,
            min_terms: 4,
            max_terms: 12,
            snippet_fraction: 0.5,
            noise: 0.35,
        }
    }
}

/// Top-`k` content terms of one snippet, ordered by count, then length, then
/// lexicographically.
pub fn extract_salient_terms(snippet: &str, k: usize) -> Vec<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for w in words(snippet) {
        if w.len() < 3 || is_stopword(&w) || w.chars().all(|c| c.is_ascii_digit()) {
            continue;
        }
        *counts.entry(w).or_default() += 1;
    }
    let mut terms: Vec<(String, usize)> = counts.into_iter().collect();
    terms.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(b.0.len().cmp(&a.0.len()))
            .then(a.0.cmp(&b.0))
    });
    terms.into_iter().take(k).map(|(t, _)| t).collect()
}

/// Multiset of extracted terms over all snippets, ordered by count descending
/// then term. Independent of snippet order.
pub fn pooled_terms(snippets: &[String], k: usize) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in snippets {
        for t in extract_salient_terms(s, k) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut out: Vec<(String, usize)> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// Recurring terms first; then per-snippet terms round-robin until `min_terms`.
fn select_terms(snippets: &[String], cfg: &StubConfig) -> Vec<String> {
    let mut selected: Vec<String> = pooled_terms(snippets, cfg.top_k)
        .into_iter()
        .filter(|(_, c)| *c >= 2)
        .map(|(t, _)| t)
        .collect();
    if selected.len() < cfg.min_terms {
        let mut lists: Vec<Vec<String>> = snippets
            .iter()
            .map(|s| extract_salient_terms(s, cfg.top_k))
            .collect();
        lists.sort();
        'fill: for depth in 0..cfg.top_k {
            for l in &lists {
                if let Some(t) = l.get(depth) {
                    if !selected.contains(t) {
                        selected.push(t.clone());
                        if selected.len() >= cfg.min_terms {
                            break 'fill;
                        }
                    }
                }
            }
        }
    }
    selected.truncate(cfg.max_terms);
    selected
}

const OPENERS: &[&str] = &[
    "I am searching for somewhere to spend an afternoon.",
    "I need a suggestion for an outing soon.",
    "Can anyone point me toward a good spot?",
    "I am planning a free day and want ideas.",
];
const PAIR_SENTENCES: &[&str] = &[
    "I adore {a} and {b}.",
    "Somewhere with {a} would be perfect, and {b} is a bonus.",
    "I have always enjoyed {a} as well as {b}.",
    "Ideally the spot offers {a} or {b}.",
    "Give me {a} alongside {b} and I am happy.",
];
const SINGLE_SENTENCES: &[&str] = &["I also care about {a}.", "Bonus points for {a}."];
const CONTEXT_SENTENCES: &[&str] = &[
    "We will be visiting for a few days.",
    "I usually go with a couple of friends.",
    "A relaxed atmosphere matters to me.",
    "I do not mind traveling a bit for the right spot.",
    "Weekends work best for us.",
    "Budget is flexible if the experience is memorable.",
    "My partner tends to agree with my picks.",
    "Last time we visited we missed out on some gems.",
];
const CLOSERS: &[&str] = &[
    "Any suggestions would be appreciated.",
    "What would you suggest?",
    "Thanks in advance for any ideas.",
];

fn pick<'a>(rng: &mut ChaCha8Rng, options: &'a [&'a str]) -> &'a str {
    options[rng.random_range(0..options.len())]
}

fn word_count(sentences: &[String]) -> usize {
    sentences.iter().map(|s| s.split_whitespace().count()).sum()
}

fn compose(phrases: &[String], rng: &mut ChaCha8Rng) -> String {
    let opener = pick(rng, OPENERS).to_string();
    let mut topic: Vec<String> = phrases
        .chunks(2)
        .map(|c| match c {
            [a, b] => pick(rng, PAIR_SENTENCES).replace("{a}", a).replace("{b}", b),
            [a] => pick(rng, SINGLE_SENTENCES).replace("{a}", a),
            _ => unreachable!(),
        })
        .collect();
    let closer = pick(rng, CLOSERS).to_string();
    let mut context: Vec<&str> = CONTEXT_SENTENCES.to_vec();
    context.shuffle(rng);
    let mut ctx_used: Vec<String> = Vec::new();
    let total = |t: &[String], c: &[String]| 2 + word_count(t) + word_count(c) + 8;
    while total(&topic, &ctx_used) < 60 && ctx_used.len() < context.len() {
        ctx_used.push(context[ctx_used.len()].to_string());
    }
    while total(&topic, &ctx_used) > 200 && topic.len() > 1 {
        topic.pop();
    }
    let mut all = vec![opener];
    all.extend(topic);
    all.extend(ctx_used);
    all.push(closer);
    let text = all.join(" ");
    // Pad further in the degenerate case of very short topic material.
    let mut padded = text;
    let mut i = 0;
    while padded.split_whitespace().count() < 60 {
        padded.push(' ');
        padded.push_str(CONTEXT_SENTENCES[i % CONTEXT_SENTENCES.len()]);
        i += 1;
    }
    padded
}

fn generate_with(snippets: &[String], table: &SynonymTable, cfg: &StubConfig, seed: u64) -> String {
    let n_read = ((snippets.len() as f64 * cfg.snippet_fraction).ceil() as usize).clamp(1, snippets.len().max(1));
    let read = &snippets[..n_read.min(snippets.len())];
    let terms = select_terms(read, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phrases_all: Vec<&str> = table.iter().map(|(_, v)| v).collect();
    let mut seen = BTreeSet::new();
    let mut phrases = Vec::new();
    for t in &terms {
        let mapped = if cfg.noise > 0.0 && !phrases_all.is_empty() && rng.random::<f64>() < cfg.noise {
            phrases_all[rng.random_range(0..phrases_all.len())]
        } else {
            table.map_term(t)
        };
        if seen.insert(mapped.to_string()) {
            phrases.push(mapped.to_string());
        }
    }
    compose(&phrases, &mut rng)
}

/// Default-strength stub generation over `snippets`; 60 to 200 words.
pub fn stub_generate(snippets: &[String], table: &SynonymTable, seed: u64) -> String {
    generate_with(snippets, table, &StubConfig::default(), seed)
}

/// Deterministic [`Provider`] answering both narrative and grounded prompts.
#[derive(Debug, Clone)]
pub struct StubProvider {
    table: std::sync::Arc<SynonymTable>,
    cfg: StubConfig,
    item_prefix: String,
    query_prefix: String,
    request_prefix: String,
    list_prefix: String,
}

impl StubProvider {
    pub fn new(table: SynonymTable) -> Self {
        let t = PromptTemplate::default();
        let g = GroundedTemplate::default();
        Self {
            table: std::sync::Arc::new(table),
            cfg: StubConfig::default(),
            item_prefix: t.item_prefix,
            query_prefix: t.query_prefix,
            request_prefix: g.request_prefix,
            list_prefix: g.list_prefix,
        }
    }

    pub fn weak(table: SynonymTable) -> Self {
        Self::new(table).with_config(StubConfig::weak())
    }

    pub fn with_config(mut self, cfg: StubConfig) -> Self {
        self.cfg = cfg;
        self
    }

    /// Adopts the line prefixes of non-default templates.
    pub fn with_templates(mut self, t: &PromptTemplate, g: &GroundedTemplate) -> Self {
        self.item_prefix = t.item_prefix.clone();
        self.query_prefix = t.query_prefix.clone();
        self.request_prefix = g.request_prefix.clone();
        self.list_prefix = g.list_prefix.clone();
        self
    }

    pub fn table(&self) -> &SynonymTable {
        &self.table
    }

    pub fn generate(&self, snippets: &[String], seed: u64) -> String {
        generate_with(snippets, &self.table, &self.cfg, seed)
    }

    /// `n` pseudo-item names built from the table terms whose phrases occur
    /// in the query, followed by the query's own unmapped content terms.
    pub fn grounded_items(&self, query: &str, n: usize) -> Vec<String> {
        let qwords: BTreeSet<String> = words(query).into_iter().collect();
        let mut terms: Vec<String> = Vec::new();
        let mut covered: BTreeSet<String> = BTreeSet::new();
        for (term, phrase) in self.table.iter() {
            let pw = words(phrase);
            if !pw.is_empty() && pw.iter().all(|w| qwords.contains(w)) {
                terms.push(term.to_string());
                covered.extend(pw);
            }
        }
        for t in extract_salient_terms(query, 64) {
            if !covered.contains(&t) && !terms.contains(&t) {
                terms.push(t);
            }
        }
        (0..n)
            .map(|i| {
                if terms.is_empty() {
                    format!("Popular local spot {}", i + 1)
                } else {
                    let a = &terms[i % terms.len()];
                    let b = &terms[(i + 1) % terms.len()];
                    if a == b {
                        format!("{a} place")
                    } else {
                        format!("{a} {b} place")
                    }
                }
            })
            .collect()
    }

    fn answer(&self, prompt: &str) -> Result<String, ProviderError> {
        let last = prompt.lines().last().unwrap_or("").trim();
        if last == self.query_prefix {
            let block = prompt.rsplit("\n\n").next().unwrap_or("");
            let snippets: Vec<String> = block
                .lines()
                .filter_map(|l| l.strip_prefix(self.item_prefix.as_str()))
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if snippets.is_empty() {
                return Err(ProviderError::Permanent("prompt has no target items".into()));
            }
            Ok(self.generate(&snippets, super::prompt_hash(prompt)))
        } else if last == self.list_prefix {
            let lines: Vec<&str> = prompt.lines().collect();
            let request = lines
                .len()
                .checked_sub(2)
                .and_then(|i| lines[i].trim().strip_prefix(self.request_prefix.as_str()))
                .ok_or_else(|| ProviderError::Permanent("grounded prompt has no request".into()))?;
            Ok(self
                .grounded_items(request, 10)
                .iter()
                .enumerate()
                .map(|(i, s)| format!("{}. {}", i + 1, s))
                .collect::<Vec<_>>()
                .join("\n"))
        } else {
            Err(ProviderError::Permanent("unrecognized prompt format".into()))
        }
    }
}

impl Provider for StubProvider {
    fn id(&self) -> String {
        if self.cfg == StubConfig::default() {
            "stub".into()
        } else {
            "stub-weak".into()
        }
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError> {
        let text = self.answer(&request.prompt)?;
        Ok(Completion {
            prompt_tokens: request.prompt.split_whitespace().count() as u64,
            completion_tokens: text.split_whitespace().count() as u64,
            text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(pairs: &[(&str, &str)]) -> SynonymTable {
        SynonymTable::new(pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect())
    }

    #[test]
    fn stopwords_sorted_for_binary_search() {
        let mut s = STOPWORDS.to_vec();
        s.sort_unstable();
        assert_eq!(s, STOPWORDS);
    }

    #[test]
    fn synonym_replaces_term() {
        let t = table(&[("tacos", "Mexican street food")]);
        let snippets = vec![
            "The tacos here were the best tacos in town.".to_string(),
            "Fresh tacos with salsa.".to_string(),
        ];
        let out = stub_generate(&snippets, &t, 1);
        assert!(out.contains("Mexican street food"), "{out}");
        assert!(!out.to_lowercase().contains("tacos"), "{out}");
    }

    #[test]
    fn deterministic_for_same_inputs() {
        let t = SynonymTable::default();
        let s = vec!["quiet garden cafe with pastries".to_string()];
        assert_eq!(stub_generate(&s, &t, 9), stub_generate(&s, &t, 9));
    }

    #[test]
    fn length_within_bounds() {
        let t = SynonymTable::default();
        for n in [1usize, 5, 30] {
            let s: Vec<String> = (0..n)
                .map(|i| format!("alpha{i} beta{i} gamma{i} delta{i} shared shared"))
                .collect();
            let words = stub_generate(&s, &t, n as u64).split_whitespace().count();
            assert!((60..=200).contains(&words), "{n}: {words}");
        }
    }

    #[test]
    fn ten_topics_mention_six_mapped_terms() {
        let topics = [
            "tacos", "ramen", "hiking", "museum", "bakery", "karaoke", "vineyard", "bowling",
            "aquarium", "brewery",
        ];
        let pairs: Vec<(String, String)> = topics
            .iter()
            .map(|t| (t.to_string(), format!("mapped{t}")))
            .collect();
        let t = SynonymTable::new(pairs.iter().cloned().collect());
        let snippets: Vec<String> = topics
            .iter()
            .map(|t| format!("We loved the {t}, the {t} was great."))
            .collect();
        // Oracle: extraction standalone, then count mapped table terms.
        let extracted: BTreeSet<String> = snippets
            .iter()
            .flat_map(|s| extract_salient_terms(s, 3))
            .filter(|w| t.get(w).is_some())
            .collect();
        assert_eq!(extracted.len(), 10);
        let out = stub_generate(&snippets, &t, 3);
        let mentioned = pairs.iter().filter(|(_, m)| out.contains(m.as_str())).count();
        assert!(mentioned >= 6, "{mentioned}: {out}");
    }

    #[test]
    fn salient_term_order() {
        assert_eq!(
            extract_salient_terms("the noodles and the broth, noodles with spicy chili in 1999", 3),
            vec!["noodles", "broth", "chili"]
        );
    }

    #[test]
    fn grounded_mode_lists_ten_items() {
        let p = StubProvider::new(table(&[("tacos", "Mexican street food")]));
        let prompt = GroundedTemplate::default().render("I crave Mexican street food downtown.");
        let req = CompletionRequest {
            model: "m".into(),
            prompt,
            temperature: 0.0,
            max_tokens: 10,
        };
        let c = p.complete(&req).unwrap();
        let lines: Vec<&str> = c.text.lines().collect();
        assert_eq!(lines.len(), 10);
        assert!(lines[0].starts_with("1. tacos"));
        assert_eq!(p.complete(&req).unwrap(), c);
    }

    #[test]
    fn narrative_prompt_roundtrip() {
        let p = StubProvider::new(table(&[("trail", "scenic outdoor walk")]));
        let prompt = PromptTemplate::default()
            .render(&["The trail was muddy but the trail views were great.".into()])
            .unwrap();
        let c = p
            .complete(&CompletionRequest {
                model: "m".into(),
                prompt: prompt.clone(),
                temperature: 0.7,
                max_tokens: 300,
            })
            .unwrap();
        assert!(c.text.contains("scenic outdoor walk"));
        assert_eq!(c.prompt_tokens, prompt.split_whitespace().count() as u64);
    }

    #[test]
    fn weak_stub_reads_fewer_terms() {
        let t = SynonymTable::default();
        let s: Vec<String> = (0..10).map(|i| format!("termx{i} termy{i} termz{i}")).collect();
        let strong = stub_generate(&s, &t, 1);
        let weak = StubProvider::weak(t.clone()).generate(&s, 1);
        let count = |text: &str| {
            (0..10)
                .filter(|i| ["termx", "termy", "termz"].iter().any(|p| text.contains(&format!("{p}{i}"))))
                .count()
        };
        assert!(count(&weak) <= 5);
        assert!(count(&strong) >= count(&weak));
    }

    proptest! {
        #[test]
        fn term_multiset_invariant_under_permutation(
            snippets in proptest::collection::vec("[a-e]{3,6}( [a-e]{3,6}){0,6}", 1..8),
            seed in any::<u64>(),
        ) {
            let mut shuffled = snippets.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(pooled_terms(&snippets, 3), pooled_terms(&shuffled, 3));
        }
    }
}
