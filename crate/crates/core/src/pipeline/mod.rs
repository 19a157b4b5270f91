//! Stage-by-stage experiment driver over a working directory.
//!
//! Each stage writes its artifacts to `workdir/<stage>/` together with a
//! `manifest.json` recording content hashes of what it read and wrote. A
//! stage refuses to start when an upstream artifact is missing, and (unless
//! forced) when an upstream artifact no longer matches its manifest.

mod config;
mod manifest;
mod stages;

pub use config::{
    apply_override, load_config, CrossHeadConfig, PathsConfig, PipelineConfig, QgenConfig, QgenMode,
    RetrievalSettings, StubStrength,
};
pub use manifest::{file_sha256, Manifest};
pub use stages::{run_ablation, run_all, run_stage, Ablation, Pipeline, Stage, SYSTEMS};

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing {path}; run {stage} first")]
    MissingArtifact { stage: String, path: String },
    #[error("artifacts of {stage} are stale ({reason}); rerun {stage} or pass --force")]
    Stale { stage: String, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Qgen(#[from] crate::qgen::QgenError),
    #[error(transparent)]
    Ql(#[from] crate::qlfilter::QlError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

impl PipelineError {
    /// Process exit status: 1 usage or generic failure, 2 missing or stale
    /// upstream artifact, 3 provider exhaustion, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use crate::qgen::QgenError;
        use crate::retrieval::RetrievalError;
        use crate::training::TrainError;
        match self {
            Self::MissingArtifact { .. } | Self::Stale { .. } => 2,
            Self::Qgen(QgenError::ProviderExhausted { .. })
            | Self::Retrieval(RetrievalError::Qgen(QgenError::ProviderExhausted { .. })) => 3,
            Self::Train(TrainError::NonFinite { .. }) => 4,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}
