//! Bounded-concurrency, rate-limited provider calls with retries.

use super::provider::{Completion, Provider, ProviderConfig, ProviderError};
use super::template::{build_prompt, one_line, parse_list_line, GroundedTemplate, PromptTemplate};
use super::{prompt_hash, QgenError, SyntheticQuery};
use crate::corpus::{sample_prompt_docs, DocSnippet, ReviewDoc, UserInteractionSet};
use crate::hashing::{derive_seed, derive_seed_str};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationFailure {
    /// User id (or per-item query id) the request was made for.
    pub key: String,
    pub cause: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub provider_id: String,
    pub requested: usize,
    pub succeeded: usize,
    pub failures: Vec<GenerationFailure>,
    /// Retries spent per key, for keys that needed any.
    pub retries: BTreeMap<String, u32>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub queries: Vec<SyntheticQuery>,
    /// Prompt snippets behind each query, parallel to `queries`.
    pub prompt_docs: Vec<Vec<DocSnippet>>,
    pub report: GenerationReport,
}

struct Job {
    key: String,
    prompt: String,
}

struct JobOk {
    completion: Completion,
    retries: u32,
}

struct JobErr {
    cause: String,
    attempts: u32,
}

/// Enforces a minimum spacing of `60 / rpm` seconds between request starts.
struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn new(rpm: f64) -> Self {
        Self {
            interval: Duration::from_secs_f64(60.0 / rpm),
            next: Mutex::new(None),
        }
    }

    fn acquire(&self) {
        let slot = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let slot = match *next {
                Some(n) if n > now => n,
                _ => now,
            };
            *next = Some(slot + self.interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

fn backoff(cfg: &ProviderConfig, seed: u64, job: usize, attempt: u32) -> Duration {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[job as u64, u64::from(attempt)]));
    let jitter: f64 = rng.random_range(0.8..=1.2);
    let secs = cfg.backoff_base_secs * 2f64.powi(attempt as i32 - 1) * jitter;
    Duration::from_secs_f64(secs.min(600.0))
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    provider: &dyn Provider,
    cfg: &ProviderConfig,
    limiter: &RateLimiter,
    job: &Job,
    index: usize,
    seed: u64,
    single_paragraph: bool,
) -> Result<JobOk, JobErr> {
    let request = cfg.request(job.prompt.clone());
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        limiter.acquire();
        let result = provider.complete(&request).and_then(|c| {
            let text = if single_paragraph {
                one_line(&c.text)
            } else {
                c.text.trim().to_string()
            };
            if text.is_empty() {
                Err(ProviderError::Transient("empty completion".into()))
            } else {
                Ok(Completion { text, ..c })
            }
        });
        match result {
            Ok(completion) => {
                return Ok(JobOk {
                    completion,
                    retries: attempt - 1,
                })
            }
            Err(ProviderError::Permanent(cause)) => return Err(JobErr { cause, attempts: attempt }),
            Err(ProviderError::Transient(cause)) => {
                if attempt > cfg.max_retries {
                    return Err(JobErr { cause, attempts: attempt });
                }
                log::warn!("{}: attempt {attempt} failed ({cause}); retrying", job.key);
                std::thread::sleep(backoff(cfg, seed, index, attempt));
            }
        }
    }
}

fn run_jobs(
    jobs: &[Job],
    provider: &dyn Provider,
    cfg: &ProviderConfig,
    seed: u64,
    single_paragraph: bool,
) -> Vec<Result<JobOk, JobErr>> {
    let limiter = RateLimiter::new(cfg.requests_per_minute);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<JobOk, JobErr>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let workers = cfg.max_in_flight.min(jobs.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = run_one(provider, cfg, &limiter, &jobs[i], i, seed, single_paragraph);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every job ran"))
        .collect()
}

fn collect(
    jobs: Vec<Job>,
    ids: Vec<(String, String)>,
    docs: Vec<Vec<DocSnippet>>,
    provider: &dyn Provider,
    cfg: &ProviderConfig,
    seed: u64,
) -> Result<GenerationOutput, QgenError> {
    cfg.validate()?;
    let results = run_jobs(&jobs, provider, cfg, seed, true);
    let provider_id = provider.id();
    let mut report = GenerationReport {
        provider_id: provider_id.clone(),
        requested: jobs.len(),
        ..Default::default()
    };
    let mut queries = Vec::new();
    let mut prompt_docs = Vec::new();
    for (((job, (query_id, user_id)), snippets), result) in jobs.into_iter().zip(ids).zip(docs).zip(results) {
        match result {
            Ok(ok) => {
                if ok.retries > 0 {
                    report.retries.insert(job.key.clone(), ok.retries);
                }
                report.prompt_tokens += ok.completion.prompt_tokens;
                report.completion_tokens += ok.completion.completion_tokens;
                queries.push(SyntheticQuery {
                    query_id,
                    user_id,
                    text: ok.completion.text,
                    provider_id: provider_id.clone(),
                    prompt_hash: prompt_hash(&job.prompt),
                    prompt_tokens: ok.completion.prompt_tokens,
                    completion_tokens: ok.completion.completion_tokens,
                });
                prompt_docs.push(snippets);
            }
            Err(e) => {
                log::warn!("generation failed for {} after {} attempts: {}", job.key, e.attempts, e.cause);
                if e.attempts > 1 {
                    report.retries.insert(job.key.clone(), e.attempts - 1);
                }
                report.failures.push(GenerationFailure {
                    key: job.key,
                    cause: e.cause,
                    attempts: e.attempts,
                });
            }
        }
    }
    report.succeeded = queries.len();
    if report.requested > 0 && queries.is_empty() {
        return Err(QgenError::ProviderExhausted {
            attempted: report.requested,
        });
    }
    log::info!(
        "generated {}/{} queries; tokens prompt={} completion={}",
        report.succeeded,
        report.requested,
        report.prompt_tokens,
        report.completion_tokens
    );
    Ok(GenerationOutput {
        queries,
        prompt_docs,
        report,
    })
}

/// One narrative query per user from `n_snippets` sampled review sentences.
/// Users the provider fails on are reported and omitted.
pub fn generate_queries(
    users: &[UserInteractionSet],
    template: &PromptTemplate,
    provider: &dyn Provider,
    cfg: &ProviderConfig,
    n_snippets: usize,
    seed: u64,
) -> Result<GenerationOutput, QgenError> {
    let mut jobs = Vec::with_capacity(users.len());
    let mut ids = Vec::with_capacity(users.len());
    let mut docs = Vec::with_capacity(users.len());
    for user in users {
        let snippets = sample_prompt_docs(user, n_snippets, derive_seed_str(seed, &user.user_id))
            .map_err(|_| QgenError::NotEnoughDocs {
                user_id: user.user_id.clone(),
                available: user.docs.len(),
                requested: n_snippets,
            })?;
        let texts: Vec<String> = snippets.iter().map(|s| s.sentence.clone()).collect();
        jobs.push(Job {
            key: user.user_id.clone(),
            prompt: build_prompt(template, &texts)?,
        });
        ids.push((format!("q-{}", user.user_id), user.user_id.clone()));
        docs.push(snippets);
    }
    collect(jobs, ids, docs, provider, cfg, seed)
}

/// One query per document, conditioned on that document's full text alone.
pub fn generate_item_queries(
    docs: &[ReviewDoc],
    template: &PromptTemplate,
    provider: &dyn Provider,
    cfg: &ProviderConfig,
    seed: u64,
) -> Result<GenerationOutput, QgenError> {
    if docs.is_empty() {
        return Err(QgenError::EmptySnippet("no documents given".into()));
    }
    let mut jobs = Vec::with_capacity(docs.len());
    let mut ids = Vec::with_capacity(docs.len());
    let mut snippets = Vec::with_capacity(docs.len());
    for (i, doc) in docs.iter().enumerate() {
        let text = one_line(&doc.text);
        let query_id = format!("qi-{i:06}-{}", doc.user_id);
        jobs.push(Job {
            key: query_id.clone(),
            prompt: build_prompt(template, std::slice::from_ref(&text))?,
        });
        ids.push((query_id, doc.user_id.clone()));
        snippets.push(vec![DocSnippet {
            item_id: doc.item_id.clone(),
            doc_index: i,
            sentence: text,
        }]);
    }
    collect(jobs, ids, snippets, provider, cfg, seed)
}

/// Asks the provider for a numbered list of up to `n_items` place names.
pub fn grounded_llm_generate(
    query: &str,
    template: &GroundedTemplate,
    provider: &dyn Provider,
    cfg: &ProviderConfig,
    n_items: usize,
) -> Result<Vec<String>, QgenError> {
    if query.trim().is_empty() {
        return Err(QgenError::EmptyQuery);
    }
    cfg.validate()?;
    let job = Job {
        key: "grounded".into(),
        prompt: template.render(query),
    };
    let seed = prompt_hash(&job.prompt);
    let result = run_jobs(std::slice::from_ref(&job), provider, cfg, seed, false)
        .pop()
        .expect("one job");
    let completion = match result {
        Ok(ok) => ok.completion,
        Err(e) => {
            log::warn!("grounded generation failed: {}", e.cause);
            return Err(QgenError::ProviderExhausted { attempted: 1 });
        }
    };
    let items: Vec<String> = completion
        .text
        .lines()
        .filter_map(parse_list_line)
        .take(n_items)
        .collect();
    if items.is_empty() {
        log::warn!("grounded completion had no parseable list lines");
    }
    Ok(items)
}
