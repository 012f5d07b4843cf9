//! Query-time retrieval: vector localization, top-down navigation over the
//! knowledge tree, leaf extraction, optional memory, context assembly and
//! answer generation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{chunk_document, Chunk, ChunkConfig, CorpusError, Document};
use crate::index::{ChunkIndex, IndexError, DEFAULT_TOP_K};
use crate::llm::embed::dot;
use crate::llm::parse::{self, Category, NavDecision};
use crate::llm::{placeholders, CompletionRequest, Gateway, LlmError, TemplateId, Usage};
use crate::tokenizer::{truncate_to, Tokenizer};
use crate::tree::{build_tree, build_tree_batched, BuildConfig, BuildOutput, KnowledgeTree, NodeId, TreeError};

pub const DEFAULT_MAX_CONTEXT_TOKENS: usize = 8192;
pub const DEFAULT_MEMORY_MAX_TOKENS: usize = 400;
const NONE_TEXT: &str = "(none)";

#[derive(Debug, Error)]
pub enum NavError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("no candidate subtrees to navigate")]
    NoCandidates,
    #[error("context budget must be positive")]
    ZeroBudget,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("index and tree disagree: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Full,
    #[serde(rename = "no-nav")]
    NoNavigation,
    NoTree,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::NoNavigation, Mode::NoTree];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoNavigation => "no-nav",
            Mode::NoTree => "no-tree",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "full" => Ok(Mode::Full),
            "no-nav" | "no-navigation" => Ok(Mode::NoNavigation),
            "no-tree" => Ok(Mode::NoTree),
            other => Err(format!("unknown mode `{other}` (expected full, no-nav or no-tree)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    #[serde(default)]
    pub memory: bool,
    #[serde(default)]
    pub mode: Mode,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            text: text.into(),
            memory: false,
            mode: Mode::Full,
        }
    }

    pub fn with_memory(mut self, on: bool) -> Self {
        self.memory = on;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavConfig {
    pub top_k: usize,
    pub max_context_tokens: usize,
    pub memory_max_tokens: usize,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS,
            memory_max_tokens: DEFAULT_MEMORY_MAX_TOKENS,
        }
    }
}

/// Everything built offline for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub document: Document,
    pub chunks: Vec<Chunk>,
    pub tree: KnowledgeTree,
    pub index: ChunkIndex,
}

impl KnowledgeBase {
    /// Chunk, embed and organize one document.
    pub fn build(
        gateway: &Gateway,
        document: Document,
        chunking: &ChunkConfig,
        build: &BuildConfig,
    ) -> Result<(Self, BuildOutput), NavError> {
        let chunks = chunk_document(&document, chunking, gateway.tokenizer())?;
        let index = ChunkIndex::build(&chunks, |texts| {
            gateway.embed(texts).map(|(v, _)| v).map_err(|e| e.to_string())
        })?;
        let out = if build.batch_size < chunks.len() {
            build_tree_batched(gateway, &document, &chunks, build)?
        } else {
            build_tree(gateway, &document, &chunks, build)?
        };
        let kb = Self {
            document,
            chunks,
            tree: out.tree.clone(),
            index,
        };
        kb.check()?;
        Ok((kb, out))
    }

    /// The index and the tree must describe the same chunk set.
    pub fn check(&self) -> Result<(), NavError> {
        if self.index.len() != self.chunks.len() || self.tree.chunk_count != self.chunks.len() {
            return Err(NavError::Mismatch(format!(
                "{} chunks, {} index entries, tree over {} chunks",
                self.chunks.len(),
                self.index.len(),
                self.tree.chunk_count
            )));
        }
        Ok(())
    }

    pub fn chunk(&self, id: usize) -> Option<&Chunk> {
        self.chunks.iter().find(|c| c.chunk_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecItem {
    pub chunk_id: usize,
    pub text: String,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SumItem {
    pub node_id: NodeId,
    pub path: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawItem {
    pub node_id: NodeId,
    pub path: String,
    pub text: String,
    pub cited_chunk_ids: BTreeSet<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Vec,
    Raw,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedItem {
    pub part: Part,
    /// Chunk id for `Vec`, node id for `Raw` and `Sum`.
    pub source: u64,
    pub tokens: usize,
}

/// Assembled context: retrieved chunks, absorbed summaries and extracted
/// passages, with the total token count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextSet {
    pub c_vec: Vec<VecItem>,
    pub c_sum: Vec<SumItem>,
    pub c_raw: Vec<RawItem>,
    pub token_total: usize,
    #[serde(default)]
    pub dropped: Vec<DroppedItem>,
}

impl ContextSet {
    /// All retained text, one item per line, for containment checks.
    pub fn text(&self) -> String {
        let mut parts: Vec<&str> = self.c_vec.iter().map(|v| v.text.as_str()).collect();
        parts.extend(self.c_raw.iter().map(|r| r.text.as_str()));
        parts.extend(self.c_sum.iter().map(|s| s.summary.as_str()));
        parts.join("\n")
    }

    pub fn is_empty(&self) -> bool {
        self.c_vec.is_empty() && self.c_sum.is_empty() && self.c_raw.is_empty()
    }
}

/// Keep the longest prefix of `c_vec ++ c_raw ++ c_sum` whose items fit
/// the budget whole. Items are counted by their text.
pub fn assemble_context(
    c_vec: Vec<VecItem>,
    c_sum: Vec<SumItem>,
    c_raw: Vec<RawItem>,
    budget: usize,
    tok: &dyn Tokenizer,
) -> ContextSet {
    let mut out = ContextSet::default();
    let mut full = false;
    let mut admit = |tokens: usize, out: &mut ContextSet| {
        if !full && out.token_total + tokens <= budget {
            out.token_total += tokens;
            true
        } else {
            full = true;
            false
        }
    };
    for v in c_vec {
        let t = tok.count(&v.text);
        if admit(t, &mut out) {
            out.c_vec.push(v);
        } else {
            out.dropped.push(DroppedItem { part: Part::Vec, source: v.chunk_id as u64, tokens: t });
        }
    }
    for r in c_raw {
        let t = tok.count(&r.text);
        if admit(t, &mut out) {
            out.c_raw.push(r);
        } else {
            out.dropped.push(DroppedItem { part: Part::Raw, source: u64::from(r.node_id.0), tokens: t });
        }
    }
    for s in c_sum {
        let t = tok.count(&s.summary);
        if admit(t, &mut out) {
            out.c_sum.push(s);
        } else {
            out.dropped.push(DroppedItem { part: Part::Sum, source: u64::from(s.node_id.0), tokens: t });
        }
    }
    for d in &out.dropped {
        tracing::debug!(part = ?d.part, source = d.source, tokens = d.tokens, "context item dropped");
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Memory {
    pub state_text: String,
    pub update_count: usize,
    pub source_log: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Absorbed,
    Queued,
    Extracted,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub step: usize,
    pub node_id: NodeId,
    pub title: String,
    pub category: Category,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Localized {
        hits: Vec<(usize, f32)>,
        candidates: Vec<NodeId>,
        orphan_hits: Vec<usize>,
    },
    Offered {
        step: usize,
        template: TemplateId,
        at: NodeId,
        entries: Vec<NodeId>,
    },
    ParseFailed {
        step: usize,
        error: String,
    },
    Decision {
        step: usize,
        node_id: NodeId,
        category: Category,
        depth: usize,
    },
    IgnoredDecision {
        step: usize,
        index: usize,
        reason: String,
    },
    Absorbed {
        node_id: NodeId,
        tokens: usize,
        budget_remaining: usize,
    },
    Extracted {
        node_id: NodeId,
        passages: Vec<usize>,
        tokens: usize,
        budget_remaining: usize,
    },
    BudgetExhausted {
        node_id: NodeId,
        needed: usize,
        budget_remaining: usize,
    },
    MemoryUpdated {
        update_count: usize,
        tokens: usize,
    },
    MemoryUpdateFailed {
        error: String,
    },
    NodesRetrieved {
        nodes: Vec<(NodeId, f32)>,
    },
    Filtered {
        kept: Vec<usize>,
    },
    Assembled {
        token_total: usize,
        dropped: usize,
    },
    Answered {
        tokens: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NavigationTrace {
    pub query_id: String,
    pub events: Vec<TraceEvent>,
}

impl NavigationTrace {
    pub fn to_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|e| {
                let mut v = serde_json::to_value(e).expect("trace events serialize");
                v["query_id"] = serde_json::Value::String(self.query_id.clone());
                serde_json::to_string(&v).expect("json value serializes")
            })
            .map(|l| l + "\n")
            .collect()
    }
}

/// Frontier, visited set, decision log and remaining budget of one query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NavigationState {
    pub frontier: VecDeque<(NodeId, usize)>,
    pub visited: BTreeSet<NodeId>,
    pub offered: BTreeSet<NodeId>,
    pub decisions: Vec<DecisionRecord>,
    pub budget_remaining: usize,
    pub exhausted: bool,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub c_vec: Vec<VecItem>,
    pub candidates: Vec<NodeId>,
    pub orphan_hits: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Navigation {
    pub c_sum: Vec<SumItem>,
    pub c_raw: Vec<RawItem>,
    pub state: NavigationState,
    pub memory: Option<Memory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub query: Query,
    pub answer: String,
    pub context: ContextSet,
    pub decisions: Vec<DecisionRecord>,
    pub visited: BTreeSet<NodeId>,
    pub memory: Option<Memory>,
    pub trace: NavigationTrace,
    pub usage: Usage,
    pub llm_calls: usize,
    pub navigate_calls: usize,
}

/// Runs queries against one knowledge base.
#[derive(Debug, Clone)]
pub struct Navigator<'a> {
    gateway: &'a Gateway,
    kb: &'a KnowledgeBase,
    cfg: NavConfig,
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn or_none(s: String) -> String {
    if s.trim().is_empty() {
        NONE_TEXT.to_string()
    } else {
        s
    }
}

impl<'a> Navigator<'a> {
    pub fn new(gateway: &'a Gateway, kb: &'a KnowledgeBase, cfg: NavConfig) -> Self {
        Self { gateway, kb, cfg }
    }

    fn tok(&self) -> &dyn Tokenizer {
        self.gateway.tokenizer()
    }

    fn tree(&self) -> &KnowledgeTree {
        &self.kb.tree
    }

    /// Top-k chunks and the top-level subtrees whose leaves cite them,
    /// ordered by best hit score.
    pub fn localize(&self, gw: &Gateway, query: &str, trace: &mut NavigationTrace) -> Result<Localization, NavError> {
        let (qv, _) = gw.embed_one(query)?;
        let hits = self.kb.index.top_k(&qv, self.cfg.top_k)?;
        let tree = self.tree();
        let citing = tree.chunk_leaves();
        let parents = tree.parent_map();
        let top_level = |mut n: NodeId| {
            while let Some(&p) = parents.get(&n) {
                if p == tree.root {
                    break;
                }
                n = p;
            }
            n
        };
        let mut candidates: Vec<NodeId> = Vec::new();
        let mut orphan_hits = Vec::new();
        let mut c_vec = Vec::new();
        for h in &hits {
            let chunk = self.kb.chunk(h.chunk_id).ok_or_else(|| NavError::Mismatch(format!("index names unknown chunk {}", h.chunk_id)))?;
            c_vec.push(VecItem {
                chunk_id: h.chunk_id,
                text: chunk.text.trim().to_string(),
                score: h.score,
            });
            match citing.get(&h.chunk_id) {
                Some(leaves) => {
                    for &l in leaves {
                        let t = top_level(l);
                        if !candidates.contains(&t) {
                            candidates.push(t);
                        }
                    }
                }
                None => {
                    tracing::info!(chunk_id = h.chunk_id, "retrieved chunk has no citing leaf, mapping to root");
                    orphan_hits.push(h.chunk_id);
                }
            }
        }
        if !orphan_hits.is_empty() {
            for &c in tree.children(tree.root) {
                if !candidates.contains(&c) {
                    candidates.push(c);
                }
            }
        }
        trace.events.push(TraceEvent::Localized {
            hits: hits.iter().map(|h| (h.chunk_id, h.score)).collect(),
            candidates: candidates.clone(),
            orphan_hits: orphan_hits.clone(),
        });
        Ok(Localization {
            c_vec,
            candidates,
            orphan_hits,
        })
    }

    fn render_entries(&self, ids: &[NodeId]) -> String {
        let tree = self.tree();
        let lines: Vec<String> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let n = &tree.nodes[id];
                format!("{i}. {}: {}", n.title, one_line(&n.summary))
            })
            .collect();
        format!("\n{}", lines.join("\n"))
    }

    #[allow(clippy::too_many_arguments)]
    fn ask_navigate(
        &self,
        gw: &Gateway,
        query: &str,
        at: NodeId,
        entries: &[NodeId],
        memory: Option<&Memory>,
        state: &mut NavigationState,
        trace: &mut NavigationTrace,
    ) -> Vec<NavDecision> {
        let step = state.steps;
        state.steps += 1;
        let path = self.tree().display_path(at);
        let (template, values) = match memory {
            Some(m) => (
                TemplateId::NavigateMemory,
                placeholders([
                    ("path", path),
                    ("entries", self.render_entries(entries)),
                    ("question", query.to_string()),
                    ("memory", or_none(m.state_text.clone())),
                ]),
            ),
            None => (
                TemplateId::Navigate,
                placeholders([
                    ("path", path),
                    ("entries", self.render_entries(entries)),
                    ("question", query.to_string()),
                ]),
            ),
        };
        trace.events.push(TraceEvent::Offered {
            step,
            template,
            at,
            entries: entries.to_vec(),
        });
        let req = CompletionRequest::new(template, values);
        match gw.complete_structured(&req, parse::parse_navigation) {
            Ok(s) => match s.value {
                Ok(d) => d,
                Err(e) => {
                    trace.events.push(TraceEvent::ParseFailed { step, error: e.to_string() });
                    Vec::new()
                }
            },
            Err(e) => {
                trace.events.push(TraceEvent::ParseFailed { step, error: e.to_string() });
                Vec::new()
            }
        }
    }

    fn update_memory(&self, gw: &Gateway, query: &str, memory: &mut Memory, node: NodeId, context: &str, trace: &mut NavigationTrace) {
        let values = placeholders([
            ("max_tokens", self.cfg.memory_max_tokens.to_string()),
            ("question", query.to_string()),
            ("memory", or_none(memory.state_text.clone())),
            ("context", context.to_string()),
        ]);
        match gw.complete(&CompletionRequest::new(TemplateId::MemoryUpdate, values)) {
            Ok(r) if !r.raw_text.trim().is_empty() => {
                memory.state_text = truncate_to(self.tok(), r.raw_text.trim(), self.cfg.memory_max_tokens).to_string();
                memory.update_count += 1;
                memory.source_log.push(node);
                trace.events.push(TraceEvent::MemoryUpdated {
                    update_count: memory.update_count,
                    tokens: self.tok().count(&memory.state_text),
                });
            }
            Ok(_) => trace.events.push(TraceEvent::MemoryUpdateFailed { error: "empty notes".into() }),
            Err(e) => trace.events.push(TraceEvent::MemoryUpdateFailed { error: e.to_string() }),
        }
    }

    /// Leaf paragraphs chosen by the leaf selection prompt.
    pub fn extract_leaf(&self, gw: &Gateway, query: &str, leaf: NodeId) -> Vec<RawItem> {
        let tree = self.tree();
        let Some(node) = tree.node(leaf) else { return Vec::new() };
        if node.content.is_empty() {
            return Vec::new();
        }
        let texts: Vec<String> = node
            .content
            .iter()
            .enumerate()
            .map(|(i, p)| format!("[{i}] {}", one_line(&p.text)))
            .collect();
        let req = CompletionRequest::new(
            TemplateId::LeafSelect,
            placeholders([("query", query.to_string()), ("texts", texts.join("\n"))]),
        );
        let picked = match gw.complete_structured(&req, parse::parse_leaf_indices) {
            Ok(s) => s.value.unwrap_or_default(),
            Err(e) => {
                tracing::warn!(node = %leaf, error = %e, "leaf selection failed");
                Vec::new()
            }
        };
        let picked: BTreeSet<usize> = picked.into_iter().filter(|&i| i < node.content.len()).collect();
        let path = tree.display_path(leaf);
        picked
            .into_iter()
            .map(|i| RawItem {
                node_id: leaf,
                path: path.clone(),
                text: node.content[i].text.clone(),
                cited_chunk_ids: node.content[i].cited_chunk_ids.clone(),
            })
            .collect()
    }

    /// Breadth-first navigation from the candidate subtrees. Every node is
    /// offered at most once; the first item that does not fit the remaining
    /// budget ends the walk.
    #[allow(clippy::too_many_arguments)]
    pub fn navigate(
        &self,
        gw: &Gateway,
        query: &str,
        candidates: &[NodeId],
        budget: usize,
        memory: Option<Memory>,
        trace: &mut NavigationTrace,
    ) -> Result<Navigation, NavError> {
        if candidates.is_empty() {
            return Err(NavError::NoCandidates);
        }
        let tree = self.tree();
        let mut memory = memory;
        let mut state = NavigationState {
            budget_remaining: budget,
            ..NavigationState::default()
        };
        let mut c_sum = Vec::new();
        let mut c_raw = Vec::new();
        let mut level: Option<(NodeId, Vec<NodeId>)> = Some((tree.root, candidates.to_vec()));
        loop {
            if let Some((at, offered)) = level.take() {
                let entries: Vec<NodeId> = offered.into_iter().filter(|e| state.offered.insert(*e)).collect();
                if !entries.is_empty() {
                    let decisions = self.ask_navigate(gw, query, at, &entries, memory.as_ref(), &mut state, trace);
                    let step = state.steps - 1;
                    let mut seen = BTreeSet::new();
                    for d in decisions {
                        let Some(&node_id) = entries.get(d.index) else {
                            trace.events.push(TraceEvent::IgnoredDecision {
                                step,
                                index: d.index,
                                reason: format!("index out of range ({} entries)", entries.len()),
                            });
                            continue;
                        };
                        if !seen.insert(node_id) {
                            trace.events.push(TraceEvent::IgnoredDecision {
                                step,
                                index: d.index,
                                reason: "duplicate decision".into(),
                            });
                            continue;
                        }
                        let n = &tree.nodes[&node_id];
                        let depth = n.path.len();
                        state.decisions.push(DecisionRecord {
                            step,
                            node_id,
                            title: n.title.clone(),
                            category: d.category,
                            depth,
                        });
                        trace.events.push(TraceEvent::Decision {
                            step,
                            node_id,
                            category: d.category,
                            depth,
                        });
                        match d.category {
                            Category::Explore => state.frontier.push_back((node_id, depth)),
                            Category::Info => {
                                let tokens = self.tok().count(&n.summary);
                                if tokens > state.budget_remaining {
                                    trace.events.push(TraceEvent::BudgetExhausted {
                                        node_id,
                                        needed: tokens,
                                        budget_remaining: state.budget_remaining,
                                    });
                                    state.exhausted = true;
                                    break;
                                }
                                state.budget_remaining -= tokens;
                                state.visited.insert(node_id);
                                c_sum.push(SumItem {
                                    node_id,
                                    path: tree.display_path(node_id),
                                    summary: n.summary.clone(),
                                });
                                trace.events.push(TraceEvent::Absorbed {
                                    node_id,
                                    tokens,
                                    budget_remaining: state.budget_remaining,
                                });
                                if let Some(m) = memory.as_mut() {
                                    self.update_memory(gw, query, m, node_id, &n.summary, trace);
                                }
                            }
                        }
                    }
                }
            }
            if state.exhausted {
                break;
            }
            let Some((node_id, _)) = state.frontier.pop_front() else { break };
            if !state.visited.insert(node_id) {
                continue;
            }
            let n = &tree.nodes[&node_id];
            if n.is_leaf() {
                let items = self.extract_leaf(gw, query, node_id);
                let mut kept = Vec::new();
                let mut tokens_used = 0;
                for (i, item) in items.into_iter().enumerate() {
                    let t = self.tok().count(&item.text);
                    if t > state.budget_remaining {
                        trace.events.push(TraceEvent::BudgetExhausted {
                            node_id,
                            needed: t,
                            budget_remaining: state.budget_remaining,
                        });
                        state.exhausted = true;
                        break;
                    }
                    state.budget_remaining -= t;
                    tokens_used += t;
                    kept.push(i);
                    c_raw.push(item);
                }
                trace.events.push(TraceEvent::Extracted {
                    node_id,
                    passages: kept.clone(),
                    tokens: tokens_used,
                    budget_remaining: state.budget_remaining,
                });
                if !kept.is_empty() {
                    if let Some(m) = memory.as_mut() {
                        let start = c_raw.len() - kept.len();
                        let ctx: Vec<&str> = c_raw[start..].iter().map(|r| r.text.as_str()).collect();
                        self.update_memory(gw, query, m, node_id, &ctx.join("\n"), trace);
                    }
                }
                if state.exhausted {
                    break;
                }
            } else {
                level = Some((node_id, n.children.clone()));
            }
        }
        Ok(Navigation {
            c_sum,
            c_raw,
            state,
            memory,
        })
    }

    /// Top-k non-root nodes by summary similarity, absorbed without stepping.
    fn retrieve_nodes(&self, gw: &Gateway, query: &str, trace: &mut NavigationTrace) -> Result<Vec<SumItem>, NavError> {
        let tree = self.tree();
        let ids: Vec<NodeId> = tree.preorder().into_iter().filter(|&id| id != tree.root).collect();
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let texts: Vec<String> = ids
            .iter()
            .map(|id| {
                let n = &tree.nodes[id];
                format!("{}: {}", n.title, n.summary)
            })
            .collect();
        let (vectors, _) = gw.embed(&texts)?;
        let (qv, _) = gw.embed_one(query)?;
        let mut scored: Vec<(NodeId, f32)> = ids.iter().copied().zip(vectors.iter().map(|v| dot(v, &qv))).collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        scored.truncate(self.cfg.top_k);
        trace.events.push(TraceEvent::NodesRetrieved { nodes: scored.clone() });
        Ok(scored
            .into_iter()
            .map(|(id, _)| SumItem {
                node_id: id,
                path: tree.display_path(id),
                summary: tree.nodes[&id].summary.clone(),
            })
            .collect())
    }

    /// Retrieved chunks kept by the leaf selection prompt.
    fn filter_chunks(&self, gw: &Gateway, query: &str, c_vec: Vec<VecItem>, trace: &mut NavigationTrace) -> Vec<VecItem> {
        if c_vec.is_empty() {
            return c_vec;
        }
        let texts: Vec<String> = c_vec.iter().enumerate().map(|(i, v)| format!("[{i}] {}", one_line(&v.text))).collect();
        let req = CompletionRequest::new(
            TemplateId::LeafSelect,
            placeholders([("query", query.to_string()), ("texts", texts.join("\n"))]),
        );
        let keep: BTreeSet<usize> = match gw.complete_structured(&req, parse::parse_leaf_indices) {
            Ok(s) => match s.value {
                Ok(v) => v.into_iter().filter(|&i| i < c_vec.len()).collect(),
                Err(_) => (0..c_vec.len()).collect(),
            },
            Err(e) => {
                tracing::warn!(error = %e, "chunk filter failed, keeping all retrieved chunks");
                (0..c_vec.len()).collect()
            }
        };
        trace.events.push(TraceEvent::Filtered {
            kept: keep.iter().copied().collect(),
        });
        c_vec.into_iter().enumerate().filter(|(i, _)| keep.contains(i)).map(|(_, v)| v).collect()
    }

    /// Answer from the three labeled context parts.
    pub fn generate_answer(&self, gw: &Gateway, query: &str, ctx: &ContextSet) -> Result<(String, Usage), NavError> {
        let req = CompletionRequest::new(TemplateId::Answer, answer_placeholders(query, ctx));
        let r = gw.complete(&req)?;
        Ok((r.raw_text.trim().to_string(), r.usage))
    }

    /// Retrieve context for `query` under its mode and answer it.
    pub fn run(&self, query: &Query) -> Result<QueryOutcome, NavError> {
        if query.text.trim().is_empty() {
            return Err(NavError::EmptyQuery);
        }
        let budget = self.cfg.max_context_tokens;
        if budget == 0 {
            return Err(NavError::ZeroBudget);
        }
        let gw = self.gateway.child();
        let mut trace = NavigationTrace {
            query_id: query.query_id.clone(),
            events: Vec::new(),
        };
        let loc = self.localize(&gw, &query.text, &mut trace)?;
        let vec_tokens: usize = loc.c_vec.iter().map(|v| self.tok().count(&v.text)).sum();
        let (c_vec, c_sum, c_raw, state, memory) = match query.mode {
            Mode::Full => {
                let memory = query.memory.then(Memory::default);
                let nav = if loc.candidates.is_empty() {
                    None
                } else {
                    Some(self.navigate(&gw, &query.text, &loc.candidates, budget.saturating_sub(vec_tokens), memory, &mut trace)?)
                };
                match nav {
                    Some(n) => (loc.c_vec, n.c_sum, n.c_raw, n.state, n.memory),
                    None => (loc.c_vec, Vec::new(), Vec::new(), NavigationState::default(), None),
                }
            }
            Mode::NoNavigation => {
                let c_sum = self.retrieve_nodes(&gw, &query.text, &mut trace)?;
                (loc.c_vec, c_sum, Vec::new(), NavigationState::default(), None)
            }
            Mode::NoTree => {
                let c_vec = self.filter_chunks(&gw, &query.text, loc.c_vec, &mut trace);
                (c_vec, Vec::new(), Vec::new(), NavigationState::default(), None)
            }
        };
        let context = assemble_context(c_vec, c_sum, c_raw, budget, self.tok());
        trace.events.push(TraceEvent::Assembled {
            token_total: context.token_total,
            dropped: context.dropped.len(),
        });
        let (answer, _) = self.generate_answer(&gw, &query.text, &context)?;
        trace.events.push(TraceEvent::Answered {
            tokens: self.tok().count(&answer),
        });
        let log = gw.log();
        Ok(QueryOutcome {
            query: query.clone(),
            answer,
            context,
            decisions: state.decisions,
            visited: state.visited,
            memory,
            trace,
            usage: log.usage(),
            llm_calls: log.len(),
            navigate_calls: log.count_template(TemplateId::Navigate) + log.count_template(TemplateId::NavigateMemory),
        })
    }
}

/// Placeholder values for the answer prompt. Each item carries its source.
pub fn answer_placeholders(query: &str, ctx: &ContextSet) -> crate::llm::Placeholders {
    let retrieved: Vec<String> = ctx.c_vec.iter().map(|v| format!("[chunk {}] {}", v.chunk_id, v.text)).collect();
    let summaries: Vec<String> = ctx
        .c_sum
        .iter()
        .map(|s| format!("[node {} | {}] {}", s.node_id, s.path, s.summary))
        .collect();
    let evidence: Vec<String> = ctx
        .c_raw
        .iter()
        .map(|r| {
            let cites: Vec<String> = r.cited_chunk_ids.iter().map(|c| c.to_string()).collect();
            format!("[node {} | {} | chunks {}] {}", r.node_id, r.path, cites.join(","), r.text)
        })
        .collect();
    placeholders([
        ("retrieved", or_none(retrieved.join("\n"))),
        ("summaries", or_none(summaries.join("\n"))),
        ("evidence", or_none(evidence.join("\n"))),
        ("question", query.to_string()),
    ])
}

/// Per-part token counts, for reporting.
pub fn part_tokens(ctx: &ContextSet, tok: &dyn Tokenizer) -> BTreeMap<&'static str, usize> {
    BTreeMap::from([
        ("c_vec", ctx.c_vec.iter().map(|v| tok.count(&v.text)).sum()),
        ("c_raw", ctx.c_raw.iter().map(|r| tok.count(&r.text)).sum()),
        ("c_sum", ctx.c_sum.iter().map(|s| tok.count(&s.summary)).sum()),
    ])
}
