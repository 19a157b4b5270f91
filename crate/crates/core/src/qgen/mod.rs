//! Few-shot prompt construction and synthetic narrative-query generation.

mod http;
mod orchestrate;
mod provider;
mod stub;
pub mod template;

pub use http::{HttpProvider, API_KEY_ENV};
pub use orchestrate::{
    generate_item_queries, generate_queries, grounded_llm_generate, GenerationFailure,
    GenerationOutput, GenerationReport,
};
pub use provider::{Completion, CompletionRequest, Provider, ProviderConfig, ProviderError};
pub use stub::{
    extract_salient_terms, pooled_terms, stub_generate, StubConfig, StubProvider, SynonymTable,
    STOPWORDS,
};
pub use template::{build_prompt, parse_list_line, FewShotExample, GroundedTemplate, PromptTemplate};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum QgenError {
    #[error("template error: {0}")]
    Template(String),
    #[error("empty snippet: {0}")]
    EmptySnippet(String),
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("user {user_id} has {available} docs, {requested} requested")]
    NotEnoughDocs {
        user_id: String,
        available: usize,
        requested: usize,
    },
    #[error("provider failed for all {attempted} requests")]
    ProviderExhausted { attempted: usize },
    #[error("query is empty")]
    EmptyQuery,
    #[error("synonym table {path}: {reason}")]
    SynonymTable { path: String, reason: String },
}

/// A generated narrative query and its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub query_id: String,
    pub user_id: String,
    pub text: String,
    pub provider_id: String,
    pub prompt_hash: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// 64-bit content hash of a rendered prompt.
pub fn prompt_hash(prompt: &str) -> u64 {
    crate::hashing::fnv1a64(prompt.as_bytes(), 0)
}
