use super::{io_err, PipelineError};
use crate::corpus::EligibilityConfig;
use crate::encoder::EncoderConfig;
use crate::eval::EvalCutoffs;
use crate::qgen::ProviderConfig;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub reviews: PathBuf,
    pub items: PathBuf,
    pub workdir: PathBuf,
    /// Line-delimited JSON evaluation requests.
    pub test_queries: PathBuf,
    /// TREC qrels for `test_queries`.
    pub qrels: PathBuf,
    /// Synonym table for the offline stub provider.
    pub synonyms: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            reviews: "reviews.jsonl".into(),
            items: "items.jsonl".into(),
            workdir: "work".into(),
            test_queries: "test_queries.jsonl".into(),
            qrels: "qrels.txt".into(),
            synonyms: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QgenMode {
    /// One query per user from sampled review sentences.
    Narrative,
    /// One query per single sampled review of each user.
    PerItem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StubStrength {
    Normal,
    /// Fewer terms, fewer snippets and noisy synonym mapping.
    Weak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QgenConfig {
    pub mode: QgenMode,
    pub n_snippets: usize,
    pub stub: StubStrength,
}

impl Default for QgenConfig {
    fn default() -> Self {
        Self {
            mode: QgenMode::Narrative,
            n_snippets: 10,
            stub: StubStrength::Normal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossHeadConfig {
    pub hidden: usize,
    pub dropout_rate: f64,
}

impl Default for CrossHeadConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            dropout_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    pub first_stage_k: usize,
    pub prefilter: bool,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    /// Dirichlet prior for the query-likelihood baseline over item text.
    pub ql_mu: f64,
    pub grounded_items: usize,
    pub grounded_neighbors: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self {
            first_stage_k: 200,
            prefilter: true,
            bm25_k1: crate::retrieval::DEFAULT_K1,
            bm25_b: crate::retrieval::DEFAULT_B,
            ql_mu: crate::qlfilter::DEFAULT_MU,
            grounded_items: 10,
            grounded_neighbors: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub eligibility: EligibilityConfig,
    pub provider: ProviderConfig,
    pub qgen: QgenConfig,
    /// Dirichlet prior for query-likelihood pair filtering.
    pub filter_mu: f64,
    pub retain_fraction: f64,
    pub encoder: EncoderConfig,
    pub cross_head: CrossHeadConfig,
    pub train_bi: TrainConfig,
    pub train_cross: TrainConfig,
    pub retrieval: RetrievalSettings,
    pub eval: EvalCutoffs,
    /// Every stochastic choice in every stage derives from this seed.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            eligibility: EligibilityConfig::default(),
            provider: ProviderConfig::default(),
            qgen: QgenConfig::default(),
            filter_mu: crate::qlfilter::DEFAULT_MU,
            retain_fraction: 0.6,
            encoder: EncoderConfig::default(),
            cross_head: CrossHeadConfig::default(),
            train_bi: TrainConfig::default(),
            train_cross: TrainConfig::default(),
            retrieval: RetrievalSettings::default(),
            eval: EvalCutoffs::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.retain_fraction > 0.0 && self.retain_fraction <= 1.0) {
            return bad(format!("retain_fraction {} outside (0, 1]", self.retain_fraction));
        }
        if self.qgen.n_snippets == 0 {
            return bad("qgen.n_snippets must be at least 1".into());
        }
        if self.retrieval.first_stage_k == 0 {
            return bad("retrieval.first_stage_k must be at least 1".into());
        }
        if self.cross_head.hidden == 0 {
            return bad("cross_head.hidden must be at least 1".into());
        }
        self.eligibility.validate()?;
        self.provider.validate()?;
        self.encoder.validate()?;
        self.train_bi.validate()?;
        self.train_cross.validate()?;
        if self.retrieval.first_stage_k < self.eval.max_cutoff() {
            log::warn!(
                "first_stage_k {} is below the largest evaluation cutoff {}",
                self.retrieval.first_stage_k,
                self.eval.max_cutoff()
            );
        }
        Ok(())
    }
}

/// Merges `patch` into `base`, rejecting keys that `base` does not have.
fn merge(base: &mut Value, patch: Value, at: &str) -> Result<(), PipelineError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(PipelineError::Config(format!("unknown key {here}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Applies one `dotted.path=value` override. The value is read as JSON when
/// it parses, otherwise as a string.
pub fn apply_override(cfg: &PipelineConfig, assignment: &str) -> Result<PipelineConfig, PipelineError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Usage(format!("override {assignment:?} is not key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut patch = value;
    for key in path.trim().rsplit('.') {
        if key.is_empty() {
            return Err(PipelineError::Usage(format!("override {assignment:?} has an empty key")));
        }
        let mut m = serde_json::Map::new();
        m.insert(key.to_string(), patch);
        patch = Value::Object(m);
    }
    let mut base = serde_json::to_value(cfg).expect("config serializes");
    merge(&mut base, patch, "")?;
    serde_json::from_value(base).map_err(|e| PipelineError::Config(format!("override {assignment:?}: {e}")))
}

/// Defaults, then the JSON file at `path` if given, then each override.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(io_err(p))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| PipelineError::Parse {
            path: p.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut base = serde_json::to_value(&cfg).expect("config serializes");
        merge(&mut base, patch, "")?;
        cfg = serde_json::from_value(base).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
    }
    for o in overrides {
        cfg = apply_override(&cfg, o)?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let cfg = PipelineConfig::default();
        let v = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&v).unwrap(), cfg);
        cfg.validate().unwrap();
        assert_eq!(cfg.retrieval.first_stage_k, 200);
    }

    #[test]
    fn dotted_overrides() {
        let cfg = PipelineConfig::default();
        let c = apply_override(&cfg, "train_bi.learning_rate=0.5").unwrap();
        assert_eq!(c.train_bi.learning_rate, 0.5);
        let c = apply_override(&c, "paths.workdir=/tmp/x").unwrap();
        assert_eq!(c.paths.workdir, PathBuf::from("/tmp/x"));
        let c = apply_override(&c, "qgen.mode=per-item").unwrap();
        assert_eq!(c.qgen.mode, QgenMode::PerItem);
        let c = apply_override(&c, "train_cross.hard_negative_rank_range=[50,150]").unwrap();
        assert_eq!(c.train_cross.hard_negative_rank_range, (50, 150));
        assert!(apply_override(&c, "train_bi.nope=1").is_err());
        assert!(apply_override(&c, "seed").is_err());
        assert!(apply_override(&c, "seed=abc").is_err());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"seed": 7, "retrieval": {"first_stage_k": 50}}"#).unwrap();
        let c = load_config(Some(&p), &["seed=9".into()]).unwrap();
        assert_eq!((c.seed, c.retrieval.first_stage_k), (9, 50));
        std::fs::write(&p, r#"{"sead": 7}"#).unwrap();
        assert!(load_config(Some(&p), &[]).is_err());
    }

    #[test]
    fn retain_fraction_bounds() {
        for bad in [0.0, 1.5, f64::NAN] {
            let c = PipelineConfig {
                retain_fraction: bad,
                ..PipelineConfig::default()
            };
            assert!(c.validate().is_err());
        }
    }
}
