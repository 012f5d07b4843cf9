//! Model gateway.
//!
//! Every completion and embedding request in the crate goes through a
//! [`Gateway`]. The gateway renders templates, delegates to a [`Backend`]
//! (remote OpenAI-compatible or scripted mock), retries transient failures,
//! performs the one-shot structured repair retry, and records every call in
//! a [`CallLog`] for token accounting.

pub mod embed;
pub mod mock;
pub mod openai;
pub mod parse;
pub mod templates;

use std::fmt;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{Tokenizer, WordPieceTokenizer};

pub use parse::ParseError;
pub use templates::{placeholders, render, Placeholders, RenderError, TemplateId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f32,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

/// Violation note appended to a re-prompt after an unparseable output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repair {
    pub violation: String,
    pub previous: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub template: TemplateId,
    pub placeholders: Placeholders,
    pub params: GenerationParams,
    pub repair: Option<Repair>,
}

impl CompletionRequest {
    pub fn new(template: TemplateId, placeholders: Placeholders) -> Self {
        Self {
            template,
            placeholders,
            params: GenerationParams::default(),
            repair: None,
        }
    }

    pub fn with_params(mut self, params: GenerationParams) -> Self {
        self.params = params;
        self
    }

    pub fn get(&self, key: &str) -> &str {
        self.placeholders.get(key).map(String::as_str).unwrap_or("")
    }

    /// Rendered prompt text, including the repair note when present.
    pub fn prompt(&self) -> Result<String, RenderError> {
        let mut out = render(self.template, &self.placeholders)?;
        if let Some(r) = &self.repair {
            out.push_str("\n\nYour previous output could not be used: ");
            out.push_str(&r.violation);
            out.push_str("\nPrevious output:\n");
            out.push_str(&r.previous);
            out.push_str("\nPlease answer again, following the required output format exactly.");
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub raw_text: String,
    pub usage: Usage,
    pub backend_id: String,
}

/// What a backend hands back; usage is optional and filled in by the
/// gateway's tokenizer when absent.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCompletion {
    pub text: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawEmbeddings {
    pub vectors: Vec<Vec<f32>>,
    pub prompt_tokens: Option<u64>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited { retry_after_ms: Option<u64> },
    #[error("no scripted response for {template} (fingerprint `{fingerprint}`)")]
    ScriptMiss { template: String, fingerprint: String },
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
}

impl BackendError {
    fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::RateLimited { .. })
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest, prompt: &str) -> Result<RawCompletion, BackendError>;

    fn embed(&self, texts: &[String]) -> Result<RawEmbeddings, BackendError>;
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("{error} (after {attempts} attempt(s))")]
    Backend { error: BackendError, attempts: u32 },
    #[error("embedding dimension mismatch at position {position}: expected {expected}, got {got}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        position: usize,
    },
    #[error("embedding request with no texts")]
    EmptyInput,
    #[error("backend returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("zero-norm embedding at position {0}")]
    DegenerateVector(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff: Duration::from_millis(250),
            max_backoff: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn no_backoff(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_backoff: Duration::ZERO,
            max_backoff: Duration::ZERO,
        }
    }

    fn delay(&self, attempt: u32, err: &BackendError) -> Duration {
        if let BackendError::RateLimited {
            retry_after_ms: Some(ms),
        } = err
        {
            return Duration::from_millis(*ms).min(self.max_backoff);
        }
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CallKind {
    Completion { template: TemplateId, repair: bool },
    Embedding { texts: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: CallKind,
    pub attempts: u32,
    pub ok: bool,
    pub usage: Usage,
}

/// Append-only, shareable record of gateway calls.
#[derive(Clone, Default)]
pub struct CallLog {
    inner: Arc<Mutex<Vec<CallRecord>>>,
}

impl fmt::Debug for CallLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CallLog").field("calls", &self.len()).finish()
    }
}

impl CallLog {
    fn push(&self, mut rec: CallRecord) {
        let mut g = self.inner.lock().expect("call log poisoned");
        rec.seq = g.len() as u64;
        g.push(rec);
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.inner.lock().expect("call log poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("call log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn usage(&self) -> Usage {
        let mut u = Usage::default();
        for r in self.inner.lock().expect("call log poisoned").iter() {
            u += r.usage;
        }
        u
    }

    pub fn count_template(&self, template: TemplateId) -> usize {
        self.inner
            .lock()
            .expect("call log poisoned")
            .iter()
            .filter(|r| matches!(r.kind, CallKind::Completion { template: t, .. } if t == template))
            .count()
    }
}

/// Outcome of a structured call: the parsed value or the final parse error
/// after the repair retry, plus the usage of every attempt.
#[derive(Debug, Clone)]
pub struct Structured<T> {
    pub value: Result<T, ParseError>,
    pub repaired: bool,
    pub calls: u32,
    pub usage: Usage,
    pub raw: String,
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    tokenizer: Arc<dyn Tokenizer>,
    retry: RetryPolicy,
    log: CallLog,
    ancestors: Vec<CallLog>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("tokenizer", &self.tokenizer.name())
            .field("retry", &self.retry)
            .field("log", &self.log)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            tokenizer: Arc::new(WordPieceTokenizer),
            retry: RetryPolicy::default(),
            log: CallLog::default(),
            ancestors: Vec::new(),
        }
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// A gateway sharing this one's backend whose calls are logged both in
    /// a fresh log and in every ancestor log.
    pub fn child(&self) -> Gateway {
        let mut ancestors = vec![self.log.clone()];
        ancestors.extend(self.ancestors.iter().cloned());
        Gateway {
            backend: Arc::clone(&self.backend),
            tokenizer: Arc::clone(&self.tokenizer),
            retry: self.retry,
            log: CallLog::default(),
            ancestors,
        }
    }

    pub fn log(&self) -> &CallLog {
        &self.log
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    fn record(&self, kind: CallKind, attempts: u32, ok: bool, usage: Usage) {
        let rec = CallRecord {
            seq: 0,
            kind,
            attempts,
            ok,
            usage,
        };
        self.log.push(rec.clone());
        for a in &self.ancestors {
            a.push(rec.clone());
        }
    }

    fn with_retries<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> (Result<T, BackendError>, u32) {
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return (Ok(v), attempt),
                Err(e) if e.is_transient() && attempt < max => {
                    let d = self.retry.delay(attempt, &e);
                    tracing::debug!(attempt, error = %e, "transient backend failure, retrying");
                    if !d.is_zero() {
                        thread::sleep(d);
                    }
                }
                Err(e) => return (Err(e), attempt),
            }
        }
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let prompt = request.prompt()?;
        let kind = CallKind::Completion {
            template: request.template,
            repair: request.repair.is_some(),
        };
        let (res, attempts) = self.with_retries(|| self.backend.complete(request, &prompt));
        match res {
            Ok(raw) => {
                let usage = raw.usage.unwrap_or_else(|| Usage {
                    prompt_tokens: self.tokenizer.count(&prompt) as u64,
                    completion_tokens: self.tokenizer.count(&raw.text) as u64,
                });
                self.record(kind, attempts, true, usage);
                Ok(CompletionResponse {
                    raw_text: raw.text,
                    usage,
                    backend_id: self.backend.id().to_string(),
                })
            }
            Err(error) => {
                self.record(kind, attempts, false, Usage::default());
                Err(LlmError::Backend { error, attempts })
            }
        }
    }

    /// Complete and parse; on a parse failure re-prompt once with the
    /// violation appended.
    pub fn complete_structured<T>(
        &self,
        request: &CompletionRequest,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<Structured<T>, LlmError> {
        let first = self.complete(request)?;
        let mut usage = first.usage;
        match parse(&first.raw_text) {
            Ok(v) => Ok(Structured {
                value: Ok(v),
                repaired: false,
                calls: 1,
                usage,
                raw: first.raw_text,
            }),
            Err(err) => {
                tracing::debug!(template = %request.template, error = %err, "structured output rejected, repairing");
                let mut retry = request.clone();
                retry.repair = Some(Repair {
                    violation: err.to_string(),
                    previous: first.raw_text,
                });
                let second = self.complete(&retry)?;
                usage += second.usage;
                Ok(Structured {
                    value: parse(&second.raw_text),
                    repaired: true,
                    calls: 2,
                    usage,
                    raw: second.raw_text,
                })
            }
        }
    }

    /// Embed texts into unit-norm vectors of one shared dimension.
    pub fn embed(&self, texts: &[String]) -> Result<(Vec<Vec<f32>>, Usage), LlmError> {
        if texts.is_empty() {
            return Err(LlmError::EmptyInput);
        }
        let kind = CallKind::Embedding { texts: texts.len() };
        let (res, attempts) = self.with_retries(|| self.backend.embed(texts));
        let raw = match res {
            Ok(r) => r,
            Err(error) => {
                self.record(kind, attempts, false, Usage::default());
                return Err(LlmError::Backend { error, attempts });
            }
        };
        let usage = Usage {
            prompt_tokens: raw
                .prompt_tokens
                .unwrap_or_else(|| texts.iter().map(|t| self.tokenizer.count(t) as u64).sum()),
            completion_tokens: 0,
        };
        self.record(kind, attempts, true, usage);
        if raw.vectors.len() != texts.len() {
            return Err(LlmError::CountMismatch {
                expected: texts.len(),
                got: raw.vectors.len(),
            });
        }
        let dim = raw.vectors[0].len();
        let mut out = Vec::with_capacity(raw.vectors.len());
        for (position, mut v) in raw.vectors.into_iter().enumerate() {
            if v.len() != dim {
                return Err(LlmError::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                    position,
                });
            }
            if !embed::normalize(&mut v) {
                return Err(LlmError::DegenerateVector(position));
            }
            out.push(v);
        }
        Ok((out, usage))
    }

    pub fn embed_one(&self, text: &str) -> Result<(Vec<f32>, Usage), LlmError> {
        let (mut v, u) = self.embed(&[text.to_string()])?;
        Ok((v.remove(0), u))
    }
}
