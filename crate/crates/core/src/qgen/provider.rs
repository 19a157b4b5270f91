use super::QgenError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    /// Worth retrying (rate limit, server error, timeout, empty output).
    #[error("transient provider error: {0}")]
    Transient(String),
    #[error("permanent provider error: {0}")]
    Permanent(String),
}

/// A text-completion backend. Implementations must tolerate concurrent calls.
pub trait Provider: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model_name: String,
    pub max_in_flight: usize,
    pub requests_per_minute: f64,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub temperature: f64,
    pub max_completion_tokens: u32,
    /// First retry delay; doubles per attempt with ±20% jitter.
    pub backoff_base_secs: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/completions".into(),
            model_name: "stub".into(),
            max_in_flight: 4,
            requests_per_minute: 60.0,
            max_retries: 3,
            timeout_secs: 60.0,
            temperature: 0.7,
            max_completion_tokens: 300,
            backoff_base_secs: 1.0,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), QgenError> {
        if self.max_in_flight < 1 {
            return Err(QgenError::InvalidConfig("max_in_flight must be >= 1".into()));
        }
        if self.requests_per_minute.is_nan() || self.requests_per_minute <= 0.0 {
            return Err(QgenError::InvalidConfig("requests_per_minute must be > 0".into()));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(QgenError::InvalidConfig("timeout_secs must be > 0".into()));
        }
        if self.backoff_base_secs.is_nan() || self.backoff_base_secs < 0.0 {
            return Err(QgenError::InvalidConfig("backoff_base_secs must be >= 0".into()));
        }
        Ok(())
    }

    pub(crate) fn request(&self, prompt: String) -> CompletionRequest {
        CompletionRequest {
            model: self.model_name.clone(),
            prompt,
            temperature: self.temperature,
            max_tokens: self.max_completion_tokens,
        }
    }
}
