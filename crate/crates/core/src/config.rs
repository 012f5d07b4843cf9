//! Pipeline configuration loaded from a TOML file.
//!
//! ```toml
//! chunk_token_size = 512
//! overlap_rate = 0.2
//! num_select_titles = 2
//! max_content_length = 1536
//! max_titles_num = 12
//! topk = 5
//! max_context_tokens = 8192
//! batch_size = 250
//!
//! [backend]
//! kind = "openai"
//! chat_model = "gpt-4o-mini"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ChunkConfig, DEFAULT_CHUNK_TOKEN_SIZE, DEFAULT_OVERLAP_RATE};
use crate::index::DEFAULT_TOP_K;
use crate::llm::openai::OpenAiConfig;
use crate::nav::{NavConfig, DEFAULT_MAX_CONTEXT_TOKENS, DEFAULT_MEMORY_MAX_TOKENS};
use crate::tree::BuildConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Openai,
    /// Keyword responder over a generated corpus (see `world`).
    Synthetic,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Falls back to `OPENAI_BASE_URL`, then the public endpoint.
    pub base_url: Option<String>,
    pub chat_model: Option<String>,
    pub embedding_model: Option<String>,
    pub timeout_ms: Option<u64>,
    pub max_in_flight: Option<usize>,
    /// Mock script (JSON lines) answering prompts for the mock backend.
    pub script: Option<String>,
    /// Generated corpus the synthetic backend knows: `planted` or `three-topic`.
    pub world: Option<String>,
}

impl BackendConfig {
    /// Remote settings: file values over environment over defaults. The
    /// API key only ever comes from the environment.
    pub fn openai(&self) -> OpenAiConfig {
        let mut c = OpenAiConfig::from_env();
        if let Some(v) = &self.base_url {
            c.base_url = v.clone();
        }
        if let Some(v) = &self.chat_model {
            c.chat_model = v.clone();
        }
        if let Some(v) = &self.embedding_model {
            c.embedding_model = v.clone();
        }
        if let Some(v) = self.timeout_ms {
            c.timeout_ms = v;
        }
        if let Some(v) = self.max_in_flight {
            c.max_in_flight = v;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub chunk_token_size: usize,
    pub overlap_rate: f64,
    pub num_select_titles: usize,
    pub max_content_length: usize,
    pub max_titles_num: usize,
    pub topk: usize,
    pub max_context_tokens: usize,
    pub batch_size: usize,
    pub memory_max_tokens: usize,
    pub max_depth: usize,
    pub workers: usize,
    pub backend: BackendConfig,
}

impl Default for Config {
    fn default() -> Self {
        let b = BuildConfig::default();
        Self {
            chunk_token_size: DEFAULT_CHUNK_TOKEN_SIZE,
            overlap_rate: DEFAULT_OVERLAP_RATE,
            num_select_titles: b.select_num,
            max_content_length: b.max_content_tokens,
            max_titles_num: b.max_children,
            topk: DEFAULT_TOP_K,
            max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS,
            batch_size: b.batch_size,
            memory_max_tokens: DEFAULT_MEMORY_MAX_TOKENS,
            max_depth: b.max_depth,
            workers: 4,
            backend: BackendConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Config = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.chunking().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.build().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.topk == 0 || self.max_context_tokens == 0 || self.memory_max_tokens == 0 {
            return Err(ConfigError::Invalid("topk, max_context_tokens and memory_max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn chunking(&self) -> ChunkConfig {
        ChunkConfig {
            chunk_token_size: self.chunk_token_size,
            overlap_rate: self.overlap_rate,
        }
    }

    pub fn build(&self) -> BuildConfig {
        BuildConfig {
            select_num: self.num_select_titles,
            max_content_tokens: self.max_content_length,
            max_children: self.max_titles_num,
            batch_size: self.batch_size,
            max_depth: self.max_depth,
            ..BuildConfig::default()
        }
    }

    pub fn nav(&self) -> NavConfig {
        NavConfig {
            top_k: self.topk,
            max_context_tokens: self.max_context_tokens,
            memory_max_tokens: self.memory_max_tokens,
        }
    }
}
