//! Narrative-driven recommendation from synthetic queries.
//!
//! Review corpora are turned into narrative-query training data with a
//! few-shot prompted text generator, filtered with a query-likelihood model,
//! and used to train a bi-encoder (first stage) and a cross-encoder
//! (re-ranker). The `eval` module scores the resulting rankings against
//! graded judgments and the `pipeline` module wires the stages together.

pub mod corpus;
pub mod encoder;
pub mod fixture;
pub mod eval;
pub mod hashing;
pub mod pipeline;
pub mod qgen;
pub mod qlfilter;
pub mod retrieval;
pub mod training;

pub use corpus::{ItemCatalog, ItemRecord, ReviewDoc, UserInteractionSet};
pub use encoder::{CrossEncoderModel, EncoderConfig, EncoderModel};
pub use eval::{EvalCutoffs, MetricReport, Qrels};
pub use pipeline::{PipelineConfig, PipelineError};
pub use qgen::{ProviderConfig, SyntheticQuery};
pub use retrieval::{RankedEntry, RankedList, TestQuery};
pub use training::{TrainConfig, TrainingExample};
