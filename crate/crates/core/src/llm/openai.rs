//! OpenAI-compatible remote backend (`/chat/completions`, `/embeddings`).

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, CompletionRequest, RawCompletion, RawEmbeddings, Usage};

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenAiConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub chat_model: String,
    pub embedding_model: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for OpenAiConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.to_string(),
            api_key: None,
            chat_model: "gpt-4o-mini".to_string(),
            embedding_model: "text-embedding-3-small".to_string(),
            timeout_ms: 120_000,
            max_in_flight: 8,
        }
    }
}

impl OpenAiConfig {
    /// Read `OPENAI_BASE_URL`, `OPENAI_API_KEY`, `TREENAV_CHAT_MODEL` and
    /// `TREENAV_EMBED_MODEL`, falling back to defaults.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Ok(v) = std::env::var("OPENAI_BASE_URL") {
            cfg.base_url = v;
        }
        cfg.api_key = std::env::var("OPENAI_API_KEY").ok().filter(|k| !k.is_empty());
        if let Ok(v) = std::env::var("TREENAV_CHAT_MODEL") {
            cfg.chat_model = v;
        }
        if let Ok(v) = std::env::var("TREENAV_EMBED_MODEL") {
            cfg.embedding_model = v;
        }
        cfg
    }
}

/// Counting semaphore capping concurrent requests.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("in-flight lock poisoned");
        while *used >= self.limit {
            used = self.freed.wait(used).expect("in-flight lock poisoned");
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().expect("in-flight lock poisoned");
        *used -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug)]
pub struct OpenAiBackend {
    config: OpenAiConfig,
    client: Client,
    in_flight: InFlight,
    id: String,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f32,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    usage: Option<ApiUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ApiUsage {
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
    usage: Option<ApiUsage>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let id = format!("openai:{}", config.chat_model);
        Ok(Self {
            in_flight: InFlight {
                limit: config.max_in_flight.max(1),
                used: Mutex::new(0),
                freed: Condvar::new(),
            },
            config,
            client,
            id,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn post<B: Serialize>(&self, path: &str, body: &B) -> Result<Response, BackendError> {
        let _permit = self.in_flight.acquire();
        let mut req = self.client.post(self.url(path)).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        if status == StatusCode::TOO_MANY_REQUESTS {
            let retry_after_ms = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(|s| (s * 1000.0) as u64);
            return Err(BackendError::RateLimited { retry_after_ms });
        }
        let body = resp.text().unwrap_or_default();
        if status.is_server_error() {
            return Err(BackendError::Transport(format!("server error {status}: {body}")));
        }
        Err(BackendError::Http {
            status: status.as_u16(),
            body,
        })
    }
}

impl Backend for OpenAiBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest, prompt: &str) -> Result<RawCompletion, BackendError> {
        let body = ChatRequest {
            model: &self.config.chat_model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: request.params.temperature,
            max_tokens: request.params.max_tokens,
        };
        let resp: ChatResponse = self
            .post("chat/completions", &body)?
            .json()
            .map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::InvalidResponse("no choices in response".into()))?;
        Ok(RawCompletion {
            text,
            usage: resp.usage.map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
        })
    }

    fn embed(&self, texts: &[String]) -> Result<RawEmbeddings, BackendError> {
        let body = EmbeddingRequest {
            model: &self.config.embedding_model,
            input: texts,
        };
        let mut resp: EmbeddingResponse = self
            .post("embeddings", &body)?
            .json()
            .map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        resp.data.sort_by_key(|d| d.index);
        Ok(RawEmbeddings {
            vectors: resp.data.into_iter().map(|d| d.embedding).collect(),
            prompt_tokens: resp.usage.map(|u| u.prompt_tokens),
        })
    }
}
