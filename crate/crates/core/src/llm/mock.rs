//! Scripted mock backend.
//!
//! Responses come from a [`MockScript`] (ordered rules, first match wins),
//! then from an optional responder closure. Anything left unmatched is a
//! [`BackendError::ScriptMiss`] in strict mode, or `None` otherwise.
//!
//! # Script format
//!
//! One JSON object per line; blank lines and lines starting with `#` are
//! ignored:
//!
//! ```text
//! {"template": "navigate", "match": "contains", "field": "question", "pattern": "Chile", "response": "0//Policies//EXPLORE"}
//! {"template": "leaf_select", "match": "any", "responses": ["0//", "None"]}
//! ```
//!
//! * `template` - a template id (`select_titles`, `navigate`, ...).
//! * `match` - `exact`, `prefix`, `contains` or `any` (default `any`).
//! * `field` - placeholder to match against. Without it the pattern is
//!   matched against the request fingerprint: `key=value` lines for every
//!   placeholder, sorted by key.
//! * `response` or `responses` - the canned text. A list is served in
//!   order, and its last entry repeats once the list is used up.
//! * `repair` - optional; `true` only matches repair re-prompts, `false`
//!   only first attempts.

use std::fmt;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::embed::{Embedder, HashEmbedder};
use super::{Backend, BackendError, CompletionRequest, RawCompletion, RawEmbeddings, TemplateId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Exact,
    Prefix,
    Contains,
    #[default]
    Any,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub template: TemplateId,
    #[serde(rename = "match", default)]
    pub mode: MatchMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default)]
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair: Option<bool>,
}

impl ScriptRule {
    pub fn new(template: TemplateId, mode: MatchMode, pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            template,
            mode,
            field: None,
            pattern: pattern.into(),
            response: Some(response.into()),
            responses: Vec::new(),
            repair: None,
        }
    }

    pub fn on_field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }

    fn matches(&self, req: &CompletionRequest) -> bool {
        if self.template != req.template {
            return false;
        }
        if let Some(want) = self.repair {
            if want != req.repair.is_some() {
                return false;
            }
        }
        let subject = match &self.field {
            Some(f) => req.get(f).to_string(),
            None => fingerprint(req),
        };
        match self.mode {
            MatchMode::Exact => subject == self.pattern,
            MatchMode::Prefix => subject.starts_with(&self.pattern),
            MatchMode::Contains => subject.contains(&self.pattern),
            MatchMode::Any => true,
        }
    }
}

/// Canonical `key=value` listing of a request's placeholders.
pub fn fingerprint(req: &CompletionRequest) -> String {
    req.placeholders
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("script line {line}: {source}")]
    Syntax {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("script line {line}: rule has neither `response` nor `responses`")]
    NoResponse { line: usize },
    #[error("reading script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockScript {
    pub rules: Vec<ScriptRule>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let l = line.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let rule: ScriptRule = serde_json::from_str(l).map_err(|source| ScriptError::Syntax { line: i + 1, source })?;
            if rule.response.is_none() && rule.responses.is_empty() {
                return Err(ScriptError::NoResponse { line: i + 1 });
            }
            rules.push(rule);
        }
        Ok(Self { rules })
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        self.rules
            .iter()
            .map(|r| serde_json::to_string(r).expect("rule serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub type Responder = dyn Fn(&CompletionRequest, &str) -> Option<String> + Send + Sync;

pub struct MockBackend {
    id: String,
    script: MockScript,
    cursors: Mutex<Vec<usize>>,
    responder: Option<Box<Responder>>,
    embedder: Box<dyn Embedder>,
    strict: bool,
}

impl fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockBackend")
            .field("id", &self.id)
            .field("rules", &self.script.rules.len())
            .field("responder", &self.responder.is_some())
            .field("strict", &self.strict)
            .finish()
    }
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let n = script.rules.len();
        Self {
            id: "mock".to_string(),
            script,
            cursors: Mutex::new(vec![0; n]),
            responder: None,
            embedder: Box::new(HashEmbedder::default()),
            strict: true,
        }
    }

    pub fn from_fn(f: impl Fn(&CompletionRequest, &str) -> Option<String> + Send + Sync + 'static) -> Self {
        Self::new(MockScript::default()).with_responder(f)
    }

    pub fn with_responder(mut self, f: impl Fn(&CompletionRequest, &str) -> Option<String> + Send + Sync + 'static) -> Self {
        self.responder = Some(Box::new(f));
        self
    }

    pub fn with_embedder(mut self, embedder: impl Embedder + 'static) -> Self {
        self.embedder = Box::new(embedder);
        self
    }

    /// Non-strict mode answers unmatched requests with `None`.
    pub fn lenient(mut self) -> Self {
        self.strict = false;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest, prompt: &str) -> Result<RawCompletion, BackendError> {
        for (i, rule) in self.script.rules.iter().enumerate() {
            if !rule.matches(request) {
                continue;
            }
            let text = if rule.responses.is_empty() {
                rule.response.clone().unwrap_or_default()
            } else {
                let mut cursors = self.cursors.lock().expect("mock cursor poisoned");
                let at = cursors[i].min(rule.responses.len() - 1);
                cursors[i] += 1;
                rule.responses[at].clone()
            };
            return Ok(RawCompletion { text, usage: None });
        }
        if let Some(f) = &self.responder {
            if let Some(text) = f(request, prompt) {
                return Ok(RawCompletion { text, usage: None });
            }
        }
        if self.strict {
            Err(BackendError::ScriptMiss {
                template: request.template.to_string(),
                fingerprint: fingerprint(request),
            })
        } else {
            Ok(RawCompletion {
                text: "None".to_string(),
                usage: None,
            })
        }
    }

    fn embed(&self, texts: &[String]) -> Result<RawEmbeddings, BackendError> {
        Ok(RawEmbeddings {
            vectors: texts.iter().map(|t| self.embedder.embed(t)).collect(),
            prompt_tokens: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{placeholders, Gateway, LlmError};
    use std::sync::Arc;

    fn nav_req(question: &str) -> CompletionRequest {
        CompletionRequest::new(
            TemplateId::Navigate,
            placeholders([("path", "Root"), ("entries", "0. A: a"), ("question", question)]),
        )
    }

    #[test]
    fn exact_prefix_and_contains_rules() {
        let script = MockScript::new()
            .rule(ScriptRule::new(TemplateId::Navigate, MatchMode::Exact, "How?", "0//A//INFO").on_field("question"))
            .rule(ScriptRule::new(TemplateId::Navigate, MatchMode::Prefix, "Why", "0//A//EXPLORE").on_field("question"))
            .rule(ScriptRule::new(TemplateId::Navigate, MatchMode::Contains, "question=Who", "None"));
        let gw = Gateway::new(Arc::new(MockBackend::new(script)));
        assert_eq!(gw.complete(&nav_req("How?")).unwrap().raw_text, "0//A//INFO");
        assert_eq!(gw.complete(&nav_req("Why not")).unwrap().raw_text, "0//A//EXPLORE");
        assert_eq!(gw.complete(&nav_req("Who is it")).unwrap().raw_text, "None");
        match gw.complete(&nav_req("When")) {
            Err(LlmError::Backend { error: BackendError::ScriptMiss { template, .. }, attempts }) => {
                assert_eq!(template, "navigate");
                assert_eq!(attempts, 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lenient_mode_answers_none() {
        let gw = Gateway::new(Arc::new(MockBackend::new(MockScript::new()).lenient()));
        assert_eq!(gw.complete(&nav_req("x")).unwrap().raw_text, "None");
    }

    #[test]
    fn response_sequences_repeat_last() {
        let text = r#"
# sequence
{"template": "navigate", "responses": ["a", "b"]}
"#;
        let script = MockScript::parse(text).unwrap();
        let gw = Gateway::new(Arc::new(MockBackend::new(script)));
        let got: Vec<_> = (0..4).map(|_| gw.complete(&nav_req("q")).unwrap().raw_text).collect();
        assert_eq!(got, ["a", "b", "b", "b"]);
    }

    #[test]
    fn script_round_trips_through_jsonl() {
        let script = MockScript::new()
            .rule(ScriptRule::new(TemplateId::LeafSelect, MatchMode::Any, "", "0//"))
            .rule(ScriptRule::new(TemplateId::Navigate, MatchMode::Prefix, "Wh", "None").on_field("question"));
        assert_eq!(MockScript::parse(&script.to_jsonl()).unwrap(), script);
    }

    #[test]
    fn script_errors_name_the_line() {
        assert!(matches!(MockScript::parse("\n{bad"), Err(ScriptError::Syntax { line: 2, .. })));
        assert!(matches!(
            MockScript::parse(r#"{"template": "navigate"}"#),
            Err(ScriptError::NoResponse { line: 1 })
        ));
        assert!(MockScript::parse(r#"{"template": "nope", "response": "x"}"#).is_err());
    }

    #[test]
    fn repair_filter() {
        let text = r#"{"template": "navigate", "repair": false, "response": "garbage"}
{"template": "navigate", "repair": true, "response": "0//A//INFO"}"#;
        let gw = Gateway::new(Arc::new(MockBackend::new(MockScript::parse(text).unwrap())));
        let out = gw
            .complete_structured(&nav_req("q"), crate::llm::parse::parse_navigation)
            .unwrap();
        assert!(out.repaired);
        assert_eq!(out.value.unwrap().len(), 1);
    }

    #[test]
    fn mock_embeddings_are_deterministic_and_unit() {
        let gw = Gateway::new(Arc::new(MockBackend::new(MockScript::new())));
        let (v, _) = gw.embed(&["a".into(), "a".into()]).unwrap();
        assert_eq!(v[0], v[1]);
        let c = crate::llm::embed::cosine(&v[0], &v[1]);
        assert!((c - 1.0).abs() < 1e-6);
    }
}
