use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{BackendConfig, BackendError, GenRequest, GenResult, Generator};
use crate::promptio::Role;

/// Counting semaphore bounding simultaneous HTTP calls across all callers.
struct Permits {
    free: Mutex<u32>,
    cv: Condvar,
}

impl Permits {
    fn new(n: u32) -> Self {
        Self { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    cfg: BackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    permits: Permits,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    n: u32,
    max_tokens: u32,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    logprobs: bool,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    index: Option<u32>,
    message: ChoiceMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    logprob: f64,
}

enum AttemptError {
    Retryable(String),
    Terminal(BackendError),
}

struct Completions {
    texts: Vec<String>,
    logprobs: Option<Vec<f64>>,
    retries: u32,
}

impl RemoteBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        let violations = cfg.validate();
        if let Some(v) = violations.first() {
            return Err(BackendError::Config(v.to_string()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_seconds))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        let permits = Permits::new(cfg.max_in_flight);
        Ok(Self { cfg, client, api_key, permits })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn post_once(&self, body: &ChatRequest<'_>) -> Result<ChatResponse, AttemptError> {
        let _permit = self.permits.acquire();
        let mut http = self.client.post(self.endpoint()).json(body);
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let resp = http.send().map_err(|e| {
            let kind = if e.is_timeout() { "timeout" } else { "transport" };
            AttemptError::Retryable(format!("{kind}: {e}"))
        })?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| AttemptError::Retryable(format!("reading body: {e}")))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Retryable(format!("HTTP {}: {}", status.as_u16(), provider_message(&text))));
        }
        if !status.is_success() {
            return Err(AttemptError::Terminal(BackendError::Rejected {
                status: status.as_u16(),
                message: provider_message(&text),
            }));
        }
        serde_json::from_str(&text)
            .map_err(|e| AttemptError::Terminal(BackendError::Malformed(e.to_string())))
    }

    /// One chat call for `n` samples, retried on 429/5xx/transport errors.
    fn call(&self, req: &GenRequest, n: u32) -> Result<Completions, BackendError> {
        let body = ChatRequest {
            model: &self.cfg.model_name,
            messages: [ChatMessage { role: "user", content: &req.prompt }],
            temperature: req.temperature,
            n,
            max_tokens: req.max_tokens,
            logprobs: self.cfg.request_logprobs,
        };
        let mut log = Vec::new();
        for attempt in 0..=self.cfg.retry_max {
            match self.post_once(&body) {
                Ok(resp) => {
                    let (texts, logprobs) = collect_choices(resp, n)?;
                    return Ok(Completions { texts, logprobs, retries: attempt });
                }
                Err(AttemptError::Terminal(e)) => return Err(e),
                Err(AttemptError::Retryable(msg)) => {
                    debug!(tag = %req.tag, attempt, %msg, "retryable generation failure");
                    log.push(format!("attempt {}: {msg}", attempt + 1));
                    if attempt < self.cfg.retry_max {
                        std::thread::sleep(self.backoff(attempt));
                    }
                }
            }
        }
        warn!(tag = %req.tag, "generation failed after retries");
        Err(BackendError::Exhausted { attempts: self.cfg.retry_max + 1, log })
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.cfg.retry_backoff_base_seconds * 2f64.powi(attempt as i32);
        let jitter = rand::thread_rng().gen_range(0.5..1.0);
        Duration::from_secs_f64(base * jitter)
    }
}

fn collect_choices(resp: ChatResponse, n: u32) -> Result<(Vec<String>, Option<Vec<f64>>), BackendError> {
    let mut choices = resp.choices;
    if (choices.len() as u32) < n {
        return Err(BackendError::ShortCompletionSet { wanted: n, got: choices.len() as u32 });
    }
    // stable sort keeps arrival order for providers that omit `index`
    choices.sort_by_key(|c| c.index.unwrap_or(u32::MAX));
    choices.truncate(n as usize);
    let logprobs: Option<Vec<f64>> = choices
        .iter()
        .map(|c| {
            c.logprobs
                .as_ref()
                .and_then(|l| l.content.as_ref())
                .map(|toks| toks.iter().map(|t| t.logprob).sum())
        })
        .collect();
    let texts = choices
        .into_iter()
        .map(|c| c.message.content.unwrap_or_default())
        .collect();
    Ok((texts, logprobs))
}

fn provider_message(body: &str) -> String {
    serde_json::from_str::<serde_json::Value>(body)
        .ok()
        .and_then(|v| {
            v.pointer("/error/message")
                .or_else(|| v.get("message"))
                .and_then(|m| m.as_str())
                .map(str::to_string)
        })
        .unwrap_or_else(|| body.trim().to_string())
}

impl Generator for RemoteBackend {
    fn generate(&self, req: &GenRequest) -> Result<GenResult, BackendError> {
        req.check()?;
        if self.cfg.native_n || req.n == 1 {
            let c = self.call(req, req.n)?;
            return Ok(GenResult { tag: req.tag.clone(), completions: c.texts, logprobs: c.logprobs, retries: c.retries });
        }
        let mut completions = Vec::with_capacity(req.n as usize);
        let mut logprobs = Some(Vec::with_capacity(req.n as usize));
        let mut retries = 0;
        for _ in 0..req.n {
            let c = self.call(req, 1)?;
            retries += c.retries;
            completions.extend(c.texts);
            logprobs = match (logprobs, c.logprobs) {
                (Some(mut acc), Some(lp)) => {
                    acc.extend(lp);
                    Some(acc)
                }
                _ => None,
            };
        }
        Ok(GenResult { tag: req.tag.clone(), completions, logprobs, retries })
    }

    fn generate_group(&self, reqs: &[GenRequest]) -> Vec<Result<GenResult, BackendError>> {
        if reqs.is_empty() {
            return Vec::new();
        }
        let slots: Vec<Mutex<Option<Result<GenResult, BackendError>>>> =
            reqs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = (self.cfg.max_in_flight as usize).min(reqs.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= reqs.len() {
                        break;
                    }
                    let r = self.generate(&reqs[i]);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every slot is filled"))
            .collect()
    }

    fn health(&self) -> Result<(), BackendError> {
        let req = GenRequest {
            role: Role::Solver,
            prompt: "ping".into(),
            n: 1,
            temperature: 0.0,
            max_tokens: 1,
            tag: "health".into(),
        };
        self.generate(&req).map(|_| ())
    }
}
