use super::manifest::{file_sha256, Manifest};
use super::{io_err, PipelineConfig, PipelineError, QgenMode, StubStrength};
use crate::corpus::{load_items, load_reviews, select_eligible_users, ItemCatalog, ItemRecord, ReviewDoc, UserInteractionSet};
use crate::encoder::{read_cross_checkpoint, read_encoder_checkpoint, write_cross_checkpoint, write_encoder_checkpoint};
use crate::eval::{compute_metrics, significance_report, MetricReport, Qrels};
use crate::hashing::{derive_seed, derive_seed_str, sha256_hex};
use crate::qgen::{
    generate_item_queries, generate_queries, GenerationOutput, GroundedTemplate, HttpProvider, PromptTemplate,
    Provider, StubProvider, SynonymTable, SyntheticQuery,
};
use crate::qlfilter::{filter_pairs, CandidateDoc, LmStats, ScoredPair};
use crate::retrieval::{
    build_index, grounded_llm_rank, prefilter_candidates, ql_rerank, read_index, read_run_file, read_test_queries,
    rerank_cross, write_index, write_run, Bm25Index, DenseRetriever, GroundedRanker, RankedList,
};
use crate::training::{
    train_biencoder_resampled, train_crossencoder, NegativeMiner, PoolDoc, TrainConfig, TrainPair, TrainingExample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

/// Ranking systems in report order.
pub const SYSTEMS: &[&str] = &["bm25", "ql", "grounded", "bienc", "cross"];
const BASELINES: &[&str] = &["bm25", "ql", "grounded"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    SelectUsers,
    GenQueries,
    FilterPairs,
    TrainBi,
    MineNegatives,
    TrainCross,
    Index,
    Retrieve,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Ingest,
        Stage::SelectUsers,
        Stage::GenQueries,
        Stage::FilterPairs,
        Stage::TrainBi,
        Stage::MineNegatives,
        Stage::TrainCross,
        Stage::Index,
        Stage::Retrieve,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::SelectUsers => "select-users",
            Stage::GenQueries => "gen-queries",
            Stage::FilterPairs => "filter-pairs",
            Stage::TrainBi => "train-bi",
            Stage::MineNegatives => "mine-negatives",
            Stage::TrainCross => "train-cross",
            Stage::Index => "index",
            Stage::Retrieve => "retrieve",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Usage(format!("unknown stage {s:?}")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ablation {
    /// Keep every generated pair.
    NoFilter,
    /// One query per single review instead of per user.
    PerItemQgen,
    /// A degraded offline generator in place of the configured one.
    WeakQgen,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::NoFilter, Ablation::PerItemQgen, Ablation::WeakQgen];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoFilter => "no-filter",
            Ablation::PerItemQgen => "per-item-qgen",
            Ablation::WeakQgen => "weak-qgen",
        }
    }

    fn first_owned_stage(self) -> Stage {
        match self {
            Ablation::NoFilter => Stage::FilterPairs,
            Ablation::PerItemQgen | Ablation::WeakQgen => Stage::GenQueries,
        }
    }

    fn description(self) -> &'static str {
        match self {
            Ablation::NoFilter => "all generated pairs kept (retain_fraction = 1)",
            Ablation::PerItemQgen => "one query per sampled review instead of per user",
            Ablation::WeakQgen => "degraded offline stub generator standing in for a weaker model",
        }
    }
}

impl FromStr for Ablation {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| PipelineError::Usage(format!("unknown ablation {s:?}")))
    }
}

fn doc_id(user: &str, k: usize) -> String {
    format!("{user}#{k:03}")
}

fn to_jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("row serializes");
        out.push(b'\n');
    }
    out
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| PipelineError::Parse {
                path: path.display().to_string(),
                reason: e.to_string(),
            })
        })
        .collect()
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("value serializes");
    s.push(b'\n');
    s
}

/// Collects a stage's outputs and the hashes of what it read.
struct StageWriter<'a> {
    pipeline: &'a Pipeline,
    stage: Stage,
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> StageWriter<'a> {
    fn new(pipeline: &'a Pipeline, stage: Stage) -> Result<Self, PipelineError> {
        let dir = pipeline.dir(stage).to_path_buf();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let m = dir.join(super::manifest::MANIFEST_FILE);
        if m.exists() {
            std::fs::remove_file(&m).map_err(io_err(&m))?;
        }
        Ok(Self {
            pipeline,
            stage,
            dir,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    /// Records an input file and returns its path.
    fn input(&mut self, path: &Path) -> Result<PathBuf, PipelineError> {
        let key = self.pipeline.input_key(path);
        self.inputs.insert(key, file_sha256(path)?);
        Ok(path.to_path_buf())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(io_err(&p))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Writes a file that is not part of the reproducible output set.
    fn write_unhashed(&self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(io_err(&p))
    }

    /// Records a file some other writer produced in this stage's directory.
    fn record(&mut self, name: &str) -> Result<(), PipelineError> {
        let sha = file_sha256(&self.path(name))?;
        self.outputs.insert(name.to_string(), sha);
        Ok(())
    }

    fn finish(self) -> Result<(), PipelineError> {
        Manifest {
            stage: self.stage.name().to_string(),
            config_sha256: self.pipeline.config_hash(),
            inputs: self.inputs,
            outputs: self.outputs,
        }
        .write(&self.dir)
    }
}

#[derive(Serialize, Deserialize)]
struct QueryCandidates {
    query_id: String,
    user_id: String,
    doc_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct MinedRecord {
    query_id: String,
    positive_doc_id: String,
    window: (usize, usize),
    negatives: Vec<(String, usize)>,
}

/// A configured pipeline bound to a working directory.
pub struct Pipeline {
    cfg: PipelineConfig,
    root: PathBuf,
    dirs: BTreeMap<Stage, PathBuf>,
    /// Bi-encoder used for hard-negative mining and the cross-encoder's first stage.
    miner_bi: PathBuf,
    /// Index used for the cross-encoder's first stage.
    first_index: PathBuf,
    base_evaluate: Option<PathBuf>,
    ablation: Option<Ablation>,
    provider: Option<Arc<dyn Provider>>,
    force: bool,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let root = cfg.paths.workdir.clone();
        let dirs: BTreeMap<Stage, PathBuf> = Stage::ALL.iter().map(|&s| (s, root.join(s.name()))).collect();
        Ok(Self {
            miner_bi: dirs[&Stage::TrainBi].clone(),
            first_index: dirs[&Stage::Index].clone(),
            cfg,
            root,
            dirs,
            base_evaluate: None,
            ablation: None,
            provider: None,
            force: false,
        })
    }

    /// Uses `provider` for query generation and the generative baseline.
    pub fn with_provider(mut self, provider: Arc<dyn Provider>) -> Self {
        self.provider = Some(provider);
        self
    }

    /// Proceeds past stale upstream artifacts with a warning.
    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn dir(&self, stage: Stage) -> &Path {
        &self.dirs[&stage]
    }

    /// Directory holding the artifacts of `which`.
    pub fn ablation_dir(&self, which: Ablation) -> PathBuf {
        self.root.join("ablations").join(which.name())
    }

    fn for_ablation(&self, which: Ablation) -> Pipeline {
        let mut cfg = self.cfg.clone();
        match which {
            Ablation::NoFilter => cfg.retain_fraction = 1.0,
            Ablation::PerItemQgen => cfg.qgen.mode = QgenMode::PerItem,
            Ablation::WeakQgen => cfg.qgen.stub = StubStrength::Weak,
        }
        let base = self.ablation_dir(which);
        let dirs = Stage::ALL
            .iter()
            .map(|&s| {
                let d = if s >= which.first_owned_stage() {
                    base.join(s.name())
                } else {
                    self.dirs[&s].clone()
                };
                (s, d)
            })
            .collect();
        Pipeline {
            cfg,
            root: self.root.clone(),
            dirs,
            miner_bi: self.miner_bi.clone(),
            first_index: self.first_index.clone(),
            base_evaluate: Some(self.dirs[&Stage::Evaluate].clone()),
            ablation: Some(which),
            provider: self.provider.clone(),
            force: self.force,
        }
    }

    fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(&self.cfg).expect("config serializes");
        v.as_object_mut().expect("object").remove("paths");
        sha256_hex(v.to_string().as_bytes())
    }

    fn externals(&self) -> Vec<(&'static str, &Path)> {
        let p = &self.cfg.paths;
        let mut v = vec![
            ("reviews", p.reviews.as_path()),
            ("items", p.items.as_path()),
            ("test_queries", p.test_queries.as_path()),
            ("qrels", p.qrels.as_path()),
        ];
        if let Some(s) = &p.synonyms {
            v.push(("synonyms", s.as_path()));
        }
        v
    }

    fn input_key(&self, path: &Path) -> String {
        if let Some((name, _)) = self.externals().into_iter().find(|(_, p)| *p == path) {
            return format!("external:{name}");
        }
        match path.strip_prefix(&self.root) {
            Ok(rel) => rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
            Err(_) => path.display().to_string(),
        }
    }

    fn resolve_key(&self, key: &str) -> PathBuf {
        if let Some(name) = key.strip_prefix("external:") {
            if let Some((_, p)) = self.externals().into_iter().find(|(n, _)| *n == name) {
                return p.to_path_buf();
            }
        }
        let p = Path::new(key);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn deps(&self, stage: Stage) -> Vec<(Stage, PathBuf)> {
        let d = |s: Stage| (s, self.dirs[&s].clone());
        let mut v = match stage {
            Stage::Ingest => vec![],
            Stage::SelectUsers => vec![d(Stage::Ingest)],
            Stage::GenQueries => vec![d(Stage::SelectUsers)],
            Stage::FilterPairs => vec![d(Stage::SelectUsers), d(Stage::GenQueries)],
            Stage::TrainBi => vec![d(Stage::SelectUsers), d(Stage::FilterPairs)],
            Stage::MineNegatives => vec![
                d(Stage::SelectUsers),
                d(Stage::FilterPairs),
                (Stage::TrainBi, self.miner_bi.clone()),
            ],
            Stage::TrainCross => vec![d(Stage::MineNegatives)],
            Stage::Index => vec![d(Stage::Ingest), d(Stage::TrainBi)],
            Stage::Retrieve => vec![
                d(Stage::Ingest),
                d(Stage::TrainBi),
                d(Stage::Index),
                (Stage::TrainBi, self.miner_bi.clone()),
                (Stage::Index, self.first_index.clone()),
                d(Stage::TrainCross),
            ],
            Stage::Evaluate => vec![d(Stage::Retrieve)],
            Stage::Report => {
                let mut v = vec![d(Stage::Evaluate)];
                if let Some(b) = &self.base_evaluate {
                    v.push((Stage::Evaluate, b.clone()));
                }
                v
            }
        };
        let mut seen = HashSet::new();
        v.retain(|(_, p)| seen.insert(p.clone()));
        v
    }

    fn stale(&self, stage: Stage, reason: String) -> Result<(), PipelineError> {
        if self.force {
            log::warn!("{stage}: {reason}; continuing because of --force");
            Ok(())
        } else {
            Err(PipelineError::Stale {
                stage: stage.name().to_string(),
                reason,
            })
        }
    }

    /// Fails with the earliest missing upstream stage, or when an upstream
    /// artifact no longer matches the manifest that produced it.
    fn check_deps(&self, stage: Stage) -> Result<(), PipelineError> {
        for (dep, dir) in self.deps(stage) {
            let manifest = Manifest::read(&dir)?.ok_or_else(|| PipelineError::MissingArtifact {
                stage: dep.name().to_string(),
                path: dir.join(super::manifest::MANIFEST_FILE).display().to_string(),
            })?;
            for (name, sha) in &manifest.outputs {
                let p = dir.join(name);
                if !p.exists() {
                    return Err(PipelineError::MissingArtifact {
                        stage: dep.name().to_string(),
                        path: p.display().to_string(),
                    });
                }
                if &file_sha256(&p)? != sha {
                    self.stale(dep, format!("{} was modified after it was written", p.display()))?;
                }
            }
            for (key, sha) in &manifest.inputs {
                let p = self.resolve_key(key);
                let current = if p.exists() { Some(file_sha256(&p)?) } else { None };
                if current.as_ref() != Some(sha) {
                    self.stale(dep, format!("input {key} changed since {dep} ran"))?;
                }
            }
        }
        Ok(())
    }

    fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed_str(self.cfg.seed, stage.name())
    }

    fn train_config(&self, stage: Stage, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.stage_seed(stage), &[base.seed]),
            ..base.clone()
        }
    }

    fn provider(&self) -> Result<Arc<dyn Provider>, PipelineError> {
        if let Some(p) = &self.provider {
            return Ok(p.clone());
        }
        if self.cfg.provider.model_name == "stub" {
            let table = match &self.cfg.paths.synonyms {
                Some(p) => SynonymTable::from_json_file(p)?,
                None => SynonymTable::default(),
            };
            return Ok(match self.cfg.qgen.stub {
                StubStrength::Normal => Arc::new(StubProvider::new(table)),
                StubStrength::Weak => Arc::new(StubProvider::weak(table)),
            });
        }
        Ok(Arc::new(HttpProvider::from_env(&self.cfg.provider)))
    }

    /// Runs one stage after checking its upstream artifacts.
    pub fn run(&self, stage: Stage) -> Result<(), PipelineError> {
        self.check_deps(stage)?;
        let start = std::time::Instant::now();
        let mut w = StageWriter::new(self, stage)?;
        match stage {
            Stage::Ingest => self.ingest(&mut w)?,
            Stage::SelectUsers => self.select_users(&mut w)?,
            Stage::GenQueries => self.gen_queries(&mut w)?,
            Stage::FilterPairs => self.filter(&mut w)?,
            Stage::TrainBi => self.train_bi(&mut w)?,
            Stage::MineNegatives => self.mine(&mut w)?,
            Stage::TrainCross => self.train_cross(&mut w)?,
            Stage::Index => self.index(&mut w)?,
            Stage::Retrieve => self.retrieve(&mut w)?,
            Stage::Evaluate => self.evaluate(&mut w)?,
            Stage::Report => self.report(&mut w)?,
        }
        w.finish()?;
        log::info!("{stage} finished in {:.1}s", start.elapsed().as_secs_f64());
        Ok(())
    }

    fn users(&self, w: &mut StageWriter) -> Result<Vec<UserInteractionSet>, PipelineError> {
        read_jsonl(&w.input(&self.dir(Stage::SelectUsers).join("users.jsonl"))?)
    }

    fn pool(users: &[UserInteractionSet]) -> Vec<PoolDoc> {
        users
            .iter()
            .flat_map(|u| {
                u.docs.iter().enumerate().map(|(k, d)| PoolDoc {
                    doc_id: doc_id(&u.user_id, k),
                    user_id: u.user_id.clone(),
                    text: d.text.clone(),
                })
            })
            .collect()
    }

    fn ingest(&self, w: &mut StageWriter) -> Result<(), PipelineError> {
        let reviews = load_reviews(&w.input(&self.cfg.paths.reviews)?)?;
        let items = load_items(&w.input(&self.cfg.paths.items)?)?;
        if reviews.is_empty() {
            return Err(PipelineError::Config(format!("{} holds no usable reviews", self.cfg.paths.reviews.display())));
        }
        w.write("reviews.jsonl", &to_jsonl(&reviews.reviews))?;
        w.write("items.jsonl", &to_jsonl(items.items()))?;
        let summary = serde_json::json!({
            "reviews": reviews.len(),
            "skipped_reviews": reviews.skipped.len(),
            "items": items.len(),
            "skipped_items": items.skipped.len(),
            "duplicate_items": items.duplicates,
        });
        w.write("summary.json", &pretty(&summary))
    }

    fn select_users(&self, w: &mut StageWriter) -> Result<(), PipelineError> {
        let reviews: Vec<ReviewDoc> = read_jsonl(&w.input(&self.dir(Stage::Ingest).join("reviews.jsonl"))?)?;
        let users = select_eligible_users(&reviews, &self.cfg.eligibility)?;
        if users.is_empty() {
            return Err(PipelineError::Config("no user passes the eligibility rules".into()));
        }
        log::info!("{} eligible users", users.len());
        w.write("users.jsonl", &to_jsonl(&users))?;
        let summary = serde_json::json!({
            "users": users.len(),
            "docs": users.iter().map(|u| u.docs.len()).sum::<usize>(),
        });
        w.write("summary.json", &pretty(&summary))
    }

    fn gen_queries(&self, w: &mut StageWriter) -> Result<(), PipelineError> {
        let users = self.users(w)?;
        if let Some(p) = &self.cfg.paths.synonyms {
            if self.provider.is_none() && self.cfg.provider.model_name == "stub" {
                w.input(p)?;
            }
        }
        let provider = self.provider()?;
        let template = PromptTemplate::default();
        let seed = self.stage_seed(Stage::GenQueries);
        let (out, candidates): (GenerationOutput, HashMap<String, Vec<String>>) = match self.cfg.qgen.mode {
            QgenMode::Narrative => {
                let out = generate_queries(&users, &template, provider.as_ref(), &self.cfg.provider, self.cfg.qgen.n_snippets, seed)?;
                let cands = users
                    .iter()
                    .map(|u| (format!("q-{}", u.user_id), (0..u.docs.len()).map(|k| doc_id(&u.user_id, k)).collect()))
                    .collect();
                (out, cands)
            }
            QgenMode::PerItem => {
                let mut docs = Vec::new();
                let mut cands = HashMap::new();
                for (i, u) in users.iter().enumerate() {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(seed, &u.user_id));
                    let k = rng.random_range(0..u.docs.len());
                    docs.push(u.docs[k].clone());
                    cands.insert(format!("qi-{i:06}-{}", u.user_id), vec![doc_id(&u.user_id, k)]);
                }
                (generate_item_queries(&docs, &template, provider.as_ref(), &self.cfg.provider, seed)?, cands)
            }
        };
        for f in &out.report.failures {
            log::warn!("query generation failed for {}: {} ({} attempts)", f.key, f.cause, f.attempts);
        }
        let rows: Vec<QueryCandidates> = out
            .queries
            .iter()
            .map(|q| QueryCandidates {
                query_id: q.query_id.clone(),
                user_id: q.user_id.clone(),
                doc_ids: candidates[&q.query_id].clone(),
            })
            .collect();
        let prompt_docs: Vec<serde_json::Value> = out
            .queries
            .iter()
            .zip(&out.prompt_docs)
            .map(|(q, d)| serde_json::json!({"query_id": q.query_id, "snippets": d}))
            .collect();
        w.write("queries.jsonl", &to_jsonl(&out.queries))?;
        w.write("candidates.jsonl", &to_jsonl(&rows))?;
        w.write("prompt_docs.jsonl", &to_jsonl(&prompt_docs))?;
        w.write("report.json", &pretty(&out.report))
    }

    fn filter(&self, w: &mut StageWriter) -> Result<(), PipelineError> {
        let users = self.users(w)?;
        let gq = self.dir(Stage::GenQueries);
        let queries: Vec<SyntheticQuery> = read_jsonl(&w.input(&gq.join("queries.jsonl"))?)?;
        let cands: Vec<QueryCandidates> = read_jsonl(&w.input(&gq.join("candidates.jsonl"))?)?;
        let pool = Self::pool(&users);
        let items: HashMap<String, &str> = users
            .iter()
            .flat_map(|u| u.docs.iter().enumerate().map(move |(k, d)| (doc_id(&u.user_id, k), d.item_id.as_str())))
            .collect();
        let stats = LmStats::build(pool.iter().map(|d| (d.doc_id.as_str(), d.text.as_str())), self.cfg.filter_mu)?;
        let by_query: HashMap<&str, &QueryCandidates> = cands.iter().map(|c| (c.query_id.as_str(), c)).collect();
        let scored: Vec<Vec<ScoredPair>> = queries
            .par_iter()
            .map(|q| {
                let c = by_query.get(q.query_id.as_str()).ok_or_else(|| PipelineError::Parse {
                    path: "candidates.jsonl".into(),
                    reason: format!("no candidates for {}", q.query_id),
                })?;
                let docs: Vec<CandidateDoc> = c
                    .doc_ids
                    .iter()
                    .map(|d| CandidateDoc {
                        doc_id: d,
                        item_id: items.get(d).copied().unwrap_or(""),
                    })
                    .collect();
                Ok(filter_pairs(q, &docs, &stats, self.cfg.retain_fraction)?)
            })
            .collect::<Result<_, PipelineError>>()?;
        let pairs: Vec<ScoredPair> = scored.into_iter().flatten().collect();
        let retained = pairs.iter().filter(|p| p.retained).count();
        log::info!("retained {retained} of {} pairs", pairs.len());
        w.write("pairs.jsonl", &to_jsonl(&pairs))?;
        let summary = serde_json::json!({
            "queries": queries.len(),
            "pairs": pairs.len(),
            "retained": retained,
            "retain_fraction": self.cfg.retain_fraction,
            "unseen_query_terms": stats.unseen_term_count(),
        });
        w.write("summary.json", &pretty(&summary))
    }

    /// Retained pairs with query and document text attached.
    fn train_pairs(&self, w: &mut StageWriter, pool: &[PoolDoc]) -> Result<Vec<TrainPair>, PipelineError> {
        let queries: Vec<SyntheticQuery> = read_jsonl(&w.input(&self.dir(Stage::GenQueries).join("queries.jsonl"))?)?;
        let pairs: Vec<ScoredPair> = read_jsonl(&w.input(&self.dir(Stage::FilterPairs).join("pairs.jsonl"))?)?;
        let text: HashMap<&str, &str> = queries.iter().map(|q| (q.query_id.as_str(), q.text.as_str())).collect();
        let docs: HashMap<&str, &str> = pool.iter().map(|d| (d.doc_id.as_str(), d.text.as_str())).collect();
        pairs
            .iter()
            .filter(|p| p.retained)
            .map(|p| {
                let missing = |what: &str| PipelineError::Parse {
                    path: "pairs.jsonl".into(),
                    reason: format!("{what} for pair ({}, {}) not found", p.query_id, p.doc_id),
                };
                Ok(TrainPair {
                    query_id: p.query_id.clone(),
                    user_id: p.user_id.clone(),
                    query_text: text.get(p.query_id.as_str()).ok_or_else(|| missing("query"))?.to_string(),
                    positive_doc_id: p.doc_id.clone(),
                    positive_text: docs.get(p.doc_id.as_str()).ok_or_else(|| missing("document"))?.to_string(),
                })
            })
            .collect()
    }

    fn train_bi(&self, w: &mut StageWriter) -> Result<(), PipelineError> {
        let users = self.users(w)?;
        let pool = Self::pool(&users);
        let pairs = self.train_pairs(w, &pool)?;
        let tc = self.train_config(Stage::TrainBi, &self.cfg.train_bi);
        let outcome = train_biencoder_resampled(&pairs, &pool, self.cfg.encoder, &tc)?;
        let sidecar = serde_json::json!({
            "kind": "bi-encoder",
            "train": tc,
            "encoder": self.cfg.encoder,
            "pairs": pairs.len(),
            "epoch_losses": outcome.epoch_losses,
            "degenerate_examples": outcome.degenerate_examples,
        });
        write_encoder_checkpoint(&w.path("model.ckpt"), &outcome.model, &sidecar)?;
        w.record("model.ckpt")?;
        w.record("model.ckpt.json")?;
        w.write_unhashed("metrics.jsonl", &to_jsonl(&outcome.metrics))
    }

    fn mine(&self, w: &mut StageWriter) -> Result<(), PipelineError> {
        let users = self.users(w)?;
        let pool = Self::pool(&users);
        let pairs = self.train_pairs(w, &pool)?;
        let bi = read_encoder_checkpoint(&w.input(&self.miner_bi.join("model.ckpt"))?)?;
        let miner = NegativeMiner::new(&bi, &pool);
        let owned: HashMap<&str, BTreeSet<&str>> = users
            .iter()
            .map(|u| {
                let ids = pool
                    .iter()
                    .filter(|d| d.user_id == u.user_id)
                    .map(|d| d.doc_id.as_str())
                    .collect();
                (u.user_id.as_str(), ids)
            })
            .collect();
        let tc = &self.cfg.train_cross;
        let seed = self.stage_seed(Stage::MineNegatives);
        let empty = BTreeSet::new();
        let mined: Vec<(TrainingExample, MinedRecord)> = pairs
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let exclude = owned.get(p.user_id.as_str()).unwrap_or(&empty);
                let m = miner.mine(&p.query_text, exclude, tc.hard_negative_rank_range, tc.n_negatives, derive_seed(seed, &[i as u64]));
                let ex = TrainingExample {
                    query_id: p.query_id.clone(),
                    query_text: p.query_text.clone(),
                    positive_text: p.positive_text.clone(),
                    negative_texts: m.picks.iter().map(|&(idx, _)| pool[idx].text.clone()).collect(),
                };
                let rec = MinedRecord {
                    query_id: p.query_id.clone(),
                    positive_doc_id: p.positive_doc_id.clone(),
                    window: m.window,
                    negatives: m.picks.iter().map(|&(idx, r)| (pool[idx].doc_id.clone(), r)).collect(),
                };
                (ex, rec)
            })
            .collect();
        let (examples, records): (Vec<_>, Vec<_>) = mined.into_iter().unzip();
        w.write("examples.jsonl", &to_jsonl(&examples))?;
        w.write("mined.jsonl", &to_jsonl(&records))
    }

    fn train_cross(&self, w: &mut StageWriter) -> Result<(), PipelineError> {
        let examples: Vec<TrainingExample> =
            read_jsonl(&w.input(&self.dir(Stage::MineNegatives).join("examples.jsonl"))?)?;
        let tc = self.train_config(Stage::TrainCross, &self.cfg.train_cross);
        let head = &self.cfg.cross_head;
        let outcome = train_crossencoder(&examples, self.cfg.encoder, head.hidden, head.dropout_rate, &tc)?;
        let sidecar = serde_json::json!({
            "kind": "cross-encoder",
            "train": tc,
            "encoder": self.cfg.encoder,
            "head": head,
            "examples": examples.len(),
            "epoch_losses": outcome.epoch_losses,
        });
        write_cross_checkpoint(&w.path("model.ckpt"), &outcome.model, &sidecar)?;
        w.record("model.ckpt")?;
        w.record("model.ckpt.json")?;
        w.write_unhashed("metrics.jsonl", &to_jsonl(&outcome.metrics))
    }

    fn items(&self, w: &mut StageWriter) -> Result<Vec<ItemRecord>, PipelineError> {
        read_jsonl(&w.input(&self.dir(Stage::Ingest).join("items.jsonl"))?)
    }

    fn index(&self, w: &mut StageWriter) -> Result<(), PipelineError> {
        let items = self.items(w)?;
        let bi = read_encoder_checkpoint(&w.input(&self.dir(Stage::TrainBi).join("model.ckpt"))?)?;
        let index = build_index(&bi, &items)?;
        write_index(&w.path("items.idx"), &index)?;
        w.record("items.idx")
    }

    fn retrieve(&self, w: &mut StageWriter) -> Result<(), PipelineError> {
        let items = self.items(w)?;
        let catalog = ItemCatalog::from_items(items.clone());
        let queries = read_test_queries(&w.input(&self.cfg.paths.test_queries)?)?;
        let bi = read_encoder_checkpoint(&w.input(&self.dir(Stage::TrainBi).join("model.ckpt"))?)?;
        let index = read_index(&w.input(&self.dir(Stage::Index).join("items.idx"))?)?;
        let own = DenseRetriever::new(&index, &bi)?;
        let shared_first = self.miner_bi == self.dir(Stage::TrainBi) && self.first_index == self.dir(Stage::Index);
        let (first_bi, first_index) = if shared_first {
            (None, None)
        } else {
            (
                Some(read_encoder_checkpoint(&w.input(&self.miner_bi.join("model.ckpt"))?)?),
                Some(read_index(&w.input(&self.first_index.join("items.idx"))?)?),
            )
        };
        let first = match (&first_index, &first_bi) {
            (Some(i), Some(b)) => DenseRetriever::new(i, b)?,
            _ => DenseRetriever::new(&index, &bi)?,
        };
        let cross = read_cross_checkpoint(&w.input(&self.dir(Stage::TrainCross).join("model.ckpt"))?)?;
        let rs = &self.cfg.retrieval;
        let k = rs.first_stage_k;
        let baselines = self.ablation.is_none();
        let bm25 = Bm25Index::build(&items, rs.bm25_k1, rs.bm25_b);
        let texts: Vec<(String, String)> = items.iter().map(|i| (i.item_id.clone(), i.text())).collect();
        let ql_stats = LmStats::build(texts.iter().map(|(a, b)| (a.as_str(), b.as_str())), rs.ql_mu)?;
        let allowed_ids: Vec<Option<HashSet<&str>>> = queries
            .iter()
            .map(|q| {
                (rs.prefilter && !(q.city.is_empty() && q.category.is_empty())).then(|| {
                    prefilter_candidates(&catalog, &q.city, &q.category)
                        .into_iter()
                        .map(|i| i.item_id.as_str())
                        .collect()
                })
            })
            .collect();
        type Row = (RankedList, RankedList, Option<(RankedList, RankedList)>);
        let rows: Vec<Row> = queries
            .par_iter()
            .zip(&allowed_ids)
            .map(|(q, allowed)| {
                let allowed = allowed.as_ref();
                let bienc = own.topk(&q.query_id, &q.text, k, allowed);
                let first_stage = if shared_first {
                    bienc.clone()
                } else {
                    first.topk(&q.query_id, &q.text, k, allowed)
                };
                let cross = rerank_cross(&cross, &catalog, &q.text, &first_stage)?;
                let lexical = if baselines {
                    let b = bm25.rank(&q.query_id, &q.text, k, allowed);
                    let ql = ql_rerank(&ql_stats, &q.text, &b, k)?;
                    Some((b, ql))
                } else {
                    None
                };
                Ok((bienc, cross, lexical))
            })
            .collect::<Result<_, PipelineError>>()?;
        let mut runs: BTreeMap<&str, Vec<RankedList>> = BTreeMap::new();
        for (bienc, cross, lexical) in rows {
            runs.entry("bienc").or_default().push(bienc);
            runs.entry("cross").or_default().push(cross);
            if let Some((b, ql)) = lexical {
                runs.entry("bm25").or_default().push(b);
                runs.entry("ql").or_default().push(ql);
            }
        }
        if baselines {
            let provider = self.provider()?;
            let template = GroundedTemplate::default();
            let ranker = GroundedRanker {
                template: &template,
                provider: provider.as_ref(),
                cfg: &self.cfg.provider,
                n_items: rs.grounded_items,
                neighbors_per_item: rs.grounded_neighbors,
            };
            let grounded = runs.entry("grounded").or_default();
            for (q, allowed) in queries.iter().zip(&allowed_ids) {
                grounded.push(grounded_llm_rank(&ranker, &own, &q.query_id, &q.text, allowed.as_ref())?.truncated(k));
            }
        }
        for (sys, lists) in &runs {
            let tagged: Vec<RankedList> = lists
                .iter()
                .map(|l| RankedList {
                    stage_tag: sys.to_string(),
                    ..l.clone()
                })
                .collect();
            let mut buf = Vec::new();
            write_run(&mut buf, &tagged).map_err(io_err(&w.path(sys)))?;
            w.write(&format!("{sys}.run"), &buf)?;
        }
        Ok(())
    }

    fn evaluate(&self, w: &mut StageWriter) -> Result<(), PipelineError> {
        let qrels = Qrels::read_file(&w.input(&self.cfg.paths.qrels)?)?;
        let dir = self.dir(Stage::Retrieve).to_path_buf();
        let mut summary = BTreeMap::new();
        for sys in SYSTEMS {
            let p = dir.join(format!("{sys}.run"));
            if !p.exists() {
                continue;
            }
            let run = read_run_file(&w.input(&p)?)?;
            let report = compute_metrics(&run, &qrels, &self.cfg.eval)?;
            summary.insert(sys.to_string(), report.means.clone());
            w.write(&format!("{sys}.json"), &pretty(&report))?;
        }
        w.write("summary.json", &pretty(&summary))
    }

    fn report(&self, w: &mut StageWriter) -> Result<(), PipelineError> {
        let mut rows: Vec<(String, MetricReport)> = Vec::new();
        let mut baselines: Vec<String> = Vec::new();
        let load = |w: &mut StageWriter, dir: &Path, sys: &str| -> Result<Option<MetricReport>, PipelineError> {
            let p = dir.join(format!("{sys}.json"));
            if !p.exists() {
                return Ok(None);
            }
            Ok(Some(read_json(&w.input(&p)?)?))
        };
        let own = self.dir(Stage::Evaluate).to_path_buf();
        match (&self.ablation, &self.base_evaluate) {
            (Some(which), Some(base)) => {
                for sys in ["bienc", "cross"] {
                    if let Some(r) = load(w, base, sys)? {
                        rows.push((format!("base-{sys}"), r));
                        baselines.push(format!("base-{sys}"));
                    }
                }
                for sys in ["bienc", "cross"] {
                    if let Some(r) = load(w, &own, sys)? {
                        rows.push((format!("{}-{sys}", which.name()), r));
                    }
                }
            }
            _ => {
                for sys in SYSTEMS {
                    if let Some(r) = load(w, &own, sys)? {
                        if BASELINES.contains(sys) {
                            baselines.push(sys.to_string());
                        }
                        rows.push((sys.to_string(), r));
                    }
                }
            }
        }
        let table = significance_report(&rows, &baselines)?;
        let mut text = String::new();
        if let Some(which) = self.ablation {
            text.push_str(&format!("# ablation {}: {}\n", which.name(), which.description()));
        }
        text.push_str(&table.to_text());
        let (n, excluded) = rows
            .first()
            .map(|(_, r)| (r.n_queries, r.excluded_no_relevant.len()))
            .unwrap_or((0, 0));
        text.push_str(&format!("\nqueries evaluated: {n} (excluded without relevant items: {excluded})\n"));
        for (name, r) in &rows {
            text.push_str(&format!("unjudged@10 {name}: {:.4}\n", r.unjudged_at_10));
        }
        let json = serde_json::json!({
            "ablation": self.ablation.map(Ablation::name),
            "table": table,
            "n_queries": n,
            "excluded_no_relevant": excluded,
            "unjudged_at_10": rows.iter().map(|(k, r)| (k.clone(), r.unjudged_at_10)).collect::<BTreeMap<_, _>>(),
        });
        w.write("report.txt", text.as_bytes())?;
        w.write("report.json", &pretty(&json))
    }
}

pub fn run_stage(pipeline: &Pipeline, stage: Stage) -> Result<(), PipelineError> {
    pipeline.run(stage)
}

/// Runs every stage in order.
pub fn run_all(pipeline: &Pipeline) -> Result<(), PipelineError> {
    for stage in Stage::ALL {
        pipeline.run(stage)?;
    }
    Ok(())
}

/// Re-runs the stages affected by `which` in a separate directory, reusing
/// the base bi-encoder for mining and the cross-encoder's first stage.
/// Returns the directory of the ablation report.
pub fn run_ablation(base: &Pipeline, which: Ablation) -> Result<PathBuf, PipelineError> {
    for stage in [Stage::TrainBi, Stage::Index, Stage::Evaluate] {
        if Manifest::read(base.dir(stage))?.is_none() {
            return Err(PipelineError::MissingArtifact {
                stage: stage.name().to_string(),
                path: base.dir(stage).display().to_string(),
            });
        }
    }
    let p = base.for_ablation(which);
    for stage in Stage::ALL.into_iter().filter(|&s| s >= which.first_owned_stage()) {
        p.run(stage)?;
    }
    Ok(p.dir(Stage::Report).to_path_buf())
}
