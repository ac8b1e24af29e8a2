//! Generation backends. Every role call goes through [`Generator`]; the remote
//! implementation speaks the chat-completions wire protocol.

mod remote;

use serde::{Deserialize, Serialize};

use crate::promptio::Role;

pub use remote::RemoteBackend;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub role: Role,
    pub prompt: String,
    pub n: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Correlation id echoed back in the result.
    pub tag: String,
}

impl GenRequest {
    pub fn check(&self) -> Result<(), BackendError> {
        if self.n < 1 {
            return Err(BackendError::InvalidRequest("n must be ≥ 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest("temperature must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResult {
    pub tag: String,
    pub completions: Vec<String>,
    /// Summed token log-probability per completion, when the provider reports it.
    pub logprobs: Option<Vec<f64>>,
    /// Retried attempts across all calls that produced this result.
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempts: {}", log.join("; "))]
    Exhausted { attempts: u32, log: Vec<String> },
    #[error("provider rejected request (HTTP {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("short completion set: wanted {wanted}, got {got}")]
    ShortCompletionSet { wanted: u32, got: u32 },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

/// Per-role generation length limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxTokens {
    pub constructor: u32,
    pub solver: u32,
    pub reviewer: u32,
}

impl Default for MaxTokens {
    fn default() -> Self {
        Self { constructor: 1024, solver: 2048, reviewer: 1024 }
    }
}

impl MaxTokens {
    pub fn for_role(&self, role: Role) -> u32 {
        match role {
            Role::Constructor => self.constructor,
            Role::Solver => self.solver,
            Role::Reviewer => self.reviewer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_in_flight: u32,
    pub timeout_seconds: f64,
    pub retry_max: u32,
    pub retry_backoff_base_seconds: f64,
    /// Use the provider's `n` parameter; otherwise issue n single-sample calls.
    pub native_n: bool,
    pub request_logprobs: bool,
    pub max_tokens: MaxTokens,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            model_name: "policy".into(),
            api_key_env: "ALIVE_API_KEY".into(),
            max_in_flight: 8,
            timeout_seconds: 120.0,
            retry_max: 3,
            retry_backoff_base_seconds: 0.5,
            native_n: true,
            request_logprobs: false,
            max_tokens: MaxTokens::default(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Vec<crate::datamodel::Violation> {
        use crate::datamodel::Violation;
        let mut out = Vec::new();
        if self.max_in_flight < 1 {
            out.push(Violation::new("max_in_flight", "max_in_flight must be ≥ 1"));
        }
        if !(self.timeout_seconds > 0.0) {
            out.push(Violation::new("timeout_seconds", "timeout_seconds must be > 0"));
        }
        if !(self.retry_backoff_base_seconds >= 0.0) {
            out.push(Violation::new("retry_backoff_base_seconds", "must be ≥ 0"));
        }
        if self.base_url.is_empty() {
            out.push(Violation::new("base_url", "base_url must be set"));
        }
        out
    }
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenRequest) -> Result<GenResult, BackendError>;

    /// Results come back in request order; each entry fails independently.
    fn generate_group(&self, reqs: &[GenRequest]) -> Vec<Result<GenResult, BackendError>> {
        reqs.iter().map(|r| self.generate(r)).collect()
    }

    fn health(&self) -> Result<(), BackendError>;
}
