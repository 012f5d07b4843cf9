//! Knowledge trees: per-document hierarchies of titled nodes whose leaves
//! hold cited paragraphs and whose every node carries a summary.

mod build;
mod config;
mod report;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::tokenizer::Tokenizer;

pub use build::{build_tree, build_tree_batched, BuildOutput, Organizer};
pub use config::BuildConfig;
pub use report::{BuildReport, BuildTiming};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Intermediate,
    Leaf,
}

/// One paragraph of leaf content with the chunks it was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub text: String,
    pub cited_chunk_ids: BTreeSet<usize>,
}

impl Passage {
    pub fn new(text: impl Into<String>, cited: impl IntoIterator<Item = usize>) -> Self {
        Self {
            text: text.into(),
            cited_chunk_ids: cited.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeNode {
    pub node_id: NodeId,
    pub title: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub content: Vec<Passage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NodeId>,
    pub summary: String,
    /// Titles from the first level below the root down to this node.
    pub path: Vec<String>,
}

impl KnowledgeNode {
    pub fn is_leaf(&self) -> bool {
        self.kind == NodeKind::Leaf
    }

    pub fn content_text(&self) -> String {
        self.content.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join("\n")
    }

    pub fn cited(&self) -> BTreeSet<usize> {
        self.content.iter().flat_map(|p| p.cited_chunk_ids.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeTree {
    pub tree_id: String,
    pub doc_id: String,
    pub root: NodeId,
    pub nodes: BTreeMap<NodeId, KnowledgeNode>,
    pub chunk_count: usize,
    /// Chunks no insertion path accepted. Kept so every chunk is accounted for.
    #[serde(default)]
    pub orphans: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    MissingRoot,
    MissingChild { parent: NodeId, child: NodeId },
    MultipleParents { node: NodeId },
    Unreachable { node: NodeId },
    IdMismatch { key: NodeId, node: NodeId },
    LeafWithChildren { node: NodeId },
    EmptyIntermediate { node: NodeId },
    IntermediateWithContent { node: NodeId },
    UncitedPassage { node: NodeId, passage: usize },
    CitationOutOfRange { node: NodeId, chunk_id: usize },
    UncoveredChunk { chunk_id: usize },
    ContentTooLong { node: NodeId, tokens: usize, limit: usize },
    TooManyChildren { node: NodeId, children: usize, limit: usize },
    EmptySummary { node: NodeId },
    PathMismatch { node: NodeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", serde_json::to_string(self).unwrap_or_else(|_| format!("{self:?}")))
    }
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid build config: {0}")]
    InvalidConfig(String),
    #[error("chunk {chunk_id} belongs to `{found}`, not `{expected}`")]
    ForeignChunk {
        chunk_id: usize,
        expected: String,
        found: String,
    },
    #[error("no chunks to organize")]
    NoChunks,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("tree invariants violated: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvariantViolation(Vec<Violation>),
}

/// Structural caps applied by [`KnowledgeTree::validate`].
#[derive(Debug, Clone, Copy)]
pub struct Caps<'a> {
    pub max_content_tokens: usize,
    pub max_children: usize,
    pub tokenizer: &'a dyn Tokenizer,
}

impl KnowledgeTree {
    /// A tree holding only a root.
    pub fn new(doc_id: impl Into<String>, root_title: impl Into<String>, chunk_count: usize) -> Self {
        let doc_id = doc_id.into();
        let root = NodeId(0);
        let mut nodes = BTreeMap::new();
        nodes.insert(
            root,
            KnowledgeNode {
                node_id: root,
                title: root_title.into(),
                kind: NodeKind::Intermediate,
                content: Vec::new(),
                children: Vec::new(),
                summary: String::new(),
                path: Vec::new(),
            },
        );
        Self {
            tree_id: format!("tree:{doc_id}"),
            doc_id,
            root,
            nodes,
            chunk_count,
            orphans: BTreeSet::new(),
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&KnowledgeNode> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut KnowledgeNode> {
        self.nodes.get_mut(&id)
    }

    pub fn root_node(&self) -> &KnowledgeNode {
        &self.nodes[&self.root]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.nodes.get(&id).map(|n| n.children.as_slice()).unwrap_or(&[])
    }

    fn next_id(&self) -> NodeId {
        NodeId(self.nodes.keys().next_back().map_or(0, |k| k.0 + 1))
    }

    fn add_node(&mut self, parent: NodeId, title: String, kind: NodeKind, content: Vec<Passage>) -> Result<NodeId, TreeError> {
        let id = self.next_id();
        let parent_node = self.nodes.get(&parent).ok_or(TreeError::UnknownNode(parent))?;
        let mut path = parent_node.path.clone();
        path.push(title.clone());
        self.nodes.insert(
            id,
            KnowledgeNode {
                node_id: id,
                title,
                kind,
                content,
                children: Vec::new(),
                summary: String::new(),
                path,
            },
        );
        let p = self.nodes.get_mut(&parent).expect("parent checked above");
        p.kind = NodeKind::Intermediate;
        p.children.push(id);
        Ok(id)
    }

    pub fn add_intermediate(&mut self, parent: NodeId, title: impl Into<String>) -> Result<NodeId, TreeError> {
        self.add_node(parent, title.into(), NodeKind::Intermediate, Vec::new())
    }

    pub fn add_leaf(&mut self, parent: NodeId, title: impl Into<String>, content: Vec<Passage>) -> Result<NodeId, TreeError> {
        self.add_node(parent, title.into(), NodeKind::Leaf, content)
    }

    pub fn set_summary(&mut self, id: NodeId, summary: impl Into<String>) -> Result<(), TreeError> {
        self.nodes.get_mut(&id).ok_or(TreeError::UnknownNode(id))?.summary = summary.into();
        Ok(())
    }

    /// Parent of every non-root node.
    pub fn parent_map(&self) -> BTreeMap<NodeId, NodeId> {
        let mut m = BTreeMap::new();
        for n in self.nodes.values() {
            for c in &n.children {
                m.insert(*c, n.node_id);
            }
        }
        m
    }

    /// Pre-order (document order) node ids starting at the root.
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut seen = BTreeSet::new();
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            let Some(n) = self.nodes.get(&id) else { continue };
            out.push(id);
            for c in n.children.iter().rev() {
                stack.push(*c);
            }
        }
        out
    }

    /// Post-order: children before parents.
    pub fn postorder(&self) -> Vec<NodeId> {
        let mut out = self.preorder();
        // Reverse pre-order visits parents after all of their descendants.
        out.reverse();
        out
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.preorder().into_iter().filter(|id| self.nodes[id].is_leaf()).collect()
    }

    pub fn depth(&self) -> usize {
        self.nodes.values().map(|n| n.path.len()).max().unwrap_or(0)
    }

    /// Every node in the subtree rooted at `id`, excluding `id` itself.
    pub fn descendants(&self, id: NodeId) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        let mut queue: VecDeque<NodeId> = self.children(id).iter().copied().collect();
        while let Some(n) = queue.pop_front() {
            if out.insert(n) {
                queue.extend(self.children(n).iter().copied());
            }
        }
        out
    }

    /// Union of cited chunk ids over the subtree rooted at `id`.
    pub fn cited_under(&self, id: NodeId) -> BTreeSet<usize> {
        let mut out = self.nodes.get(&id).map(|n| n.cited()).unwrap_or_default();
        for d in self.descendants(id) {
            out.extend(self.nodes[&d].cited());
        }
        out
    }

    pub fn all_cited(&self) -> BTreeSet<usize> {
        self.nodes.values().flat_map(|n| n.cited()).collect()
    }

    /// Leaves citing each chunk id.
    pub fn chunk_leaves(&self) -> BTreeMap<usize, Vec<NodeId>> {
        let mut m: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
        for id in self.leaves() {
            for c in self.nodes[&id].cited() {
                m.entry(c).or_default().push(id);
            }
        }
        m
    }

    /// Recompute `path` for every node below `from`.
    pub fn refresh_paths(&mut self, from: NodeId) {
        let base = self.nodes.get(&from).map(|n| n.path.clone()).unwrap_or_default();
        let mut queue: VecDeque<(NodeId, Vec<String>)> = VecDeque::new();
        for c in self.children(from).to_vec() {
            queue.push_back((c, base.clone()));
        }
        while let Some((id, mut prefix)) = queue.pop_front() {
            let Some(n) = self.nodes.get_mut(&id) else { continue };
            prefix.push(n.title.clone());
            n.path = prefix.clone();
            for c in n.children.clone() {
                queue.push_back((c, prefix.clone()));
            }
        }
    }

    /// Human-readable path for prompts: root title followed by the node path.
    pub fn display_path(&self, id: NodeId) -> String {
        let mut parts = vec![self.root_node().title.clone()];
        if let Some(n) = self.nodes.get(&id) {
            parts.extend(n.path.iter().cloned());
        }
        parts.join(" > ")
    }

    /// Structural checks that hold at every point of a build: ids, single
    /// parent, reachability, leaf/intermediate shape, citation ranges.
    pub fn validate_structure(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if !self.nodes.contains_key(&self.root) {
            v.push(Violation::MissingRoot);
            return v;
        }
        let mut parents: BTreeMap<NodeId, usize> = BTreeMap::new();
        for (key, n) in &self.nodes {
            if *key != n.node_id {
                v.push(Violation::IdMismatch { key: *key, node: n.node_id });
            }
            for c in &n.children {
                if !self.nodes.contains_key(c) {
                    v.push(Violation::MissingChild { parent: n.node_id, child: *c });
                }
                *parents.entry(*c).or_default() += 1;
            }
            match n.kind {
                NodeKind::Leaf => {
                    if !n.children.is_empty() {
                        v.push(Violation::LeafWithChildren { node: n.node_id });
                    }
                    for (i, p) in n.content.iter().enumerate() {
                        if p.cited_chunk_ids.is_empty() {
                            v.push(Violation::UncitedPassage { node: n.node_id, passage: i });
                        }
                        for &c in &p.cited_chunk_ids {
                            if c >= self.chunk_count {
                                v.push(Violation::CitationOutOfRange { node: n.node_id, chunk_id: c });
                            }
                        }
                    }
                }
                NodeKind::Intermediate => {
                    if !n.content.is_empty() {
                        v.push(Violation::IntermediateWithContent { node: n.node_id });
                    }
                }
            }
        }
        for (node, count) in &parents {
            if *count > 1 || *node == self.root {
                v.push(Violation::MultipleParents { node: *node });
            }
        }
        let reachable: BTreeSet<NodeId> = self.preorder().into_iter().collect();
        for id in self.nodes.keys() {
            if !reachable.contains(id) {
                v.push(Violation::Unreachable { node: *id });
            }
        }
        v
    }

    /// Full post-build validation: structure, non-empty intermediates,
    /// chunk coverage, summaries, consistent paths, and optional caps.
    pub fn validate(&self, caps: Option<Caps<'_>>) -> Vec<Violation> {
        let mut v = self.validate_structure();
        if v.iter().any(|x| matches!(x, Violation::MissingRoot)) {
            return v;
        }
        let all_orphaned = self.orphans.len() >= self.chunk_count;
        for n in self.nodes.values() {
            if n.kind == NodeKind::Intermediate && n.children.is_empty() && !(n.node_id == self.root && all_orphaned) {
                v.push(Violation::EmptyIntermediate { node: n.node_id });
            }
            if n.summary.trim().is_empty() {
                v.push(Violation::EmptySummary { node: n.node_id });
            }
            if let Some(caps) = caps {
                if n.is_leaf() {
                    let tokens = caps.tokenizer.count(&n.content_text());
                    if tokens > caps.max_content_tokens {
                        v.push(Violation::ContentTooLong {
                            node: n.node_id,
                            tokens,
                            limit: caps.max_content_tokens,
                        });
                    }
                }
                if n.children.len() > caps.max_children {
                    v.push(Violation::TooManyChildren {
                        node: n.node_id,
                        children: n.children.len(),
                        limit: caps.max_children,
                    });
                }
            }
        }
        let mut check = self.clone();
        check.refresh_paths(self.root);
        for (id, n) in &self.nodes {
            if check.nodes[id].path != n.path {
                v.push(Violation::PathMismatch { node: *id });
            }
        }
        let cited = self.all_cited();
        for c in 0..self.chunk_count {
            if !cited.contains(&c) && !self.orphans.contains(&c) {
                v.push(Violation::UncoveredChunk { chunk_id: c });
            }
        }
        v
    }

    /// Indented outline of the subtree at `id`, for inspection.
    pub fn render_outline(&self, id: NodeId, with_summaries: bool) -> String {
        let mut out = String::new();
        self.render_into(id, 0, with_summaries, &mut out);
        out
    }

    fn render_into(&self, id: NodeId, depth: usize, with_summaries: bool, out: &mut String) {
        let Some(n) = self.nodes.get(&id) else { return };
        let indent = "  ".repeat(depth);
        let marker = if n.is_leaf() { "-" } else { "+" };
        out.push_str(&format!("{indent}{marker} {} [{}]\n", n.title, n.node_id));
        if with_summaries && !n.summary.is_empty() {
            out.push_str(&format!("{indent}    summary: {}\n", n.summary));
        }
        if n.is_leaf() {
            for p in &n.content {
                let cites: Vec<String> = p.cited_chunk_ids.iter().map(|c| c.to_string()).collect();
                out.push_str(&format!("{indent}    | {} <{}>\n", p.text, cites.join(",")));
            }
        }
        for c in &n.children {
            self.render_into(*c, depth + 1, with_summaries, out);
        }
    }

    /// Resolve a `/`-separated title path (from the first level below root).
    pub fn find_by_path(&self, path: &str) -> Option<NodeId> {
        let mut cur = self.root;
        for part in path.split('/').map(str::trim).filter(|p| !p.is_empty()) {
            cur = *self.children(cur).iter().find(|c| self.nodes[*c].title == part)?;
        }
        Some(cur)
    }
}
