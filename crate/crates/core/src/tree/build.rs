//! The organizer: outline, chunk-by-chunk insertion with split and regroup,
//! refusion, bottom-up summaries, and batch-wise build and merge.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;

use super::{BuildConfig, BuildReport, BuildTiming, Caps, KnowledgeNode, KnowledgeTree, NodeId, NodeKind, Passage, TreeError};
use crate::corpus::{Chunk, CorpusError, Document};
use crate::llm::parse::{self, Assignment, ParseError, RefusedParagraph};
use crate::llm::{placeholders, CompletionRequest, GenerationParams, Gateway, Placeholders, TemplateId};
use crate::tokenizer::{truncate_to, Tokenizer};

pub const FALLBACK_OUTLINE_TITLE: &str = "Main Content";

const SUMMARY_TARGET_WORDS: std::ops::RangeInclusive<usize> = 100..=200;

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub tree: KnowledgeTree,
    pub report: BuildReport,
    pub timing: BuildTiming,
}

/// Result of one structured call. `value` is `None` when the backend
/// itself failed (after its retries).
struct Outcome<T> {
    value: Option<Result<T, ParseError>>,
    repaired: bool,
}

fn structured<T>(
    gw: &Gateway,
    template: TemplateId,
    values: Placeholders,
    max_tokens: u32,
    parse: impl Fn(&str) -> Result<T, ParseError>,
) -> Outcome<T> {
    let req = CompletionRequest::new(template, values).with_params(GenerationParams {
        max_tokens,
        ..GenerationParams::default()
    });
    match gw.complete_structured(&req, parse) {
        Ok(s) => Outcome {
            value: Some(s.value),
            repaired: s.repaired,
        },
        Err(e) => {
            tracing::warn!(%template, error = %e, "model call failed");
            Outcome {
                value: None,
                repaired: false,
            }
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn numbered(titles: &[String]) -> String {
    let lines: Vec<String> = titles.iter().enumerate().map(|(i, t)| format!("{i}. {t}")).collect();
    format!("\n{}", lines.join("\n"))
}

fn bracketed(items: &[String], base: usize) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, t)| format!("[{}] {}", i + base, one_line(t)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `candidate`, or `candidate (k)` for the smallest k that is not taken.
fn unique_title(taken: &[String], candidate: &str) -> String {
    let base = candidate.trim();
    let base = if base.is_empty() { "Untitled" } else { base };
    let exists = |t: &str| taken.iter().any(|x| x.eq_ignore_ascii_case(t));
    if !exists(base) {
        return base.to_string();
    }
    (2..)
        .map(|k| format!("{base} ({k})"))
        .find(|t| !exists(t))
        .expect("unbounded suffix search")
}

fn fallback_title(text: &str, chunk_id: usize) -> String {
    let words: Vec<&str> = text
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .take(6)
        .collect();
    if words.is_empty() {
        format!("Segment {}", chunk_id + 1)
    } else {
        words.join(" ")
    }
}

/// Sentence pieces of `text`, split after `.`, `!` or `?` followed by
/// whitespace.
fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | '!' | '?') {
            let next = i + c.len_utf8();
            if next == text.len() || text[next..].starts_with(char::is_whitespace) {
                let s = text[start..next].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = next;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Cut one over-long paragraph into pieces of at most `limit` tokens,
/// at sentence boundaries where possible.
fn hard_split(tok: &dyn Tokenizer, text: &str, limit: usize) -> Vec<String> {
    let mut pieces: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut cur_tokens = 0;
    let flush = |cur: &mut String, cur_tokens: &mut usize, pieces: &mut Vec<String>| {
        if !cur.is_empty() {
            pieces.push(std::mem::take(cur));
            *cur_tokens = 0;
        }
    };
    for sentence in sentences(text) {
        let mut s = sentence;
        while tok.count(s) > limit {
            flush(&mut cur, &mut cur_tokens, &mut pieces);
            let cut = tok.split_at(s, limit).max(1);
            let cut = (cut..=s.len()).find(|&i| s.is_char_boundary(i)).unwrap_or(s.len());
            pieces.push(s[..cut].trim().to_string());
            s = s[cut..].trim_start();
        }
        if s.is_empty() {
            continue;
        }
        let t = tok.count(s);
        if cur_tokens + t > limit {
            flush(&mut cur, &mut cur_tokens, &mut pieces);
        }
        if !cur.is_empty() {
            cur.push(' ');
        }
        cur.push_str(s);
        cur_tokens += t;
    }
    flush(&mut cur, &mut cur_tokens, &mut pieces);
    pieces.retain(|p| !p.is_empty());
    pieces
}

fn passages_tokens(tok: &dyn Tokenizer, ps: &[Passage]) -> usize {
    ps.iter().map(|p| tok.count(&p.text)).sum()
}

/// Deterministic split: paragraphs (hard-split when needed) greedily packed
/// into parts of at most `limit` tokens, titled "Part k/m".
fn split_fallback(tok: &dyn Tokenizer, title: &str, paragraphs: &[Passage], limit: usize) -> Vec<(String, Vec<Passage>)> {
    let mut pieces = Vec::new();
    for p in paragraphs {
        if tok.count(&p.text) <= limit {
            pieces.push(p.clone());
        } else {
            for piece in hard_split(tok, &p.text, limit) {
                pieces.push(Passage {
                    text: piece,
                    cited_chunk_ids: p.cited_chunk_ids.clone(),
                });
            }
        }
    }
    let mut parts: Vec<Vec<Passage>> = Vec::new();
    let mut cur: Vec<Passage> = Vec::new();
    let mut cur_tokens = 0;
    for p in pieces {
        let t = tok.count(&p.text);
        if !cur.is_empty() && cur_tokens + t > limit {
            parts.push(std::mem::take(&mut cur));
            cur_tokens = 0;
        }
        cur_tokens += t;
        cur.push(p);
    }
    if !cur.is_empty() {
        parts.push(cur);
    }
    let m = parts.len();
    parts
        .into_iter()
        .enumerate()
        .map(|(k, ps)| (format!("{title} (Part {}/{m})", k + 1), ps))
        .collect()
}

/// Contiguous blocks of `ceil(m / max_groups)` items.
fn contiguous_groups(titles: &[String], max_groups: usize) -> Vec<(String, Vec<usize>)> {
    let m = titles.len();
    let block = m.div_ceil(max_groups).max(1);
    (0..m)
        .collect::<Vec<_>>()
        .chunks(block)
        .enumerate()
        .map(|(k, members)| (format!("Group {} ({})", k + 1, titles[members[0]]), members.to_vec()))
        .collect()
}

fn sorted_groups(groups: Vec<Assignment>) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = groups
        .into_iter()
        .map(|g| {
            let mut m = g.members;
            m.sort_unstable();
            (g.title, m)
        })
        .collect();
    out.sort_by_key(|(_, m)| m[0]);
    out
}

fn check_inputs(doc: &Document, chunks: &[Chunk]) -> Result<(), TreeError> {
    if doc.text.trim().is_empty() {
        return Err(CorpusError::EmptyDocument(doc.doc_id.clone()).into());
    }
    if chunks.is_empty() {
        return Err(TreeError::NoChunks);
    }
    if let Some(c) = chunks.iter().find(|c| c.doc_id != doc.doc_id) {
        return Err(TreeError::ForeignChunk {
            chunk_id: c.chunk_id,
            expected: doc.doc_id.clone(),
            found: c.doc_id.clone(),
        });
    }
    Ok(())
}

/// Builds knowledge trees. Holds a child gateway so that the report's call
/// and token counts cover exactly this build.
#[derive(Debug)]
pub struct Organizer {
    gateway: Gateway,
    cfg: BuildConfig,
    report: BuildReport,
    new_groups: Vec<NodeId>,
}

impl Organizer {
    pub fn new(gateway: &Gateway, cfg: BuildConfig) -> Result<Self, TreeError> {
        cfg.validate()?;
        Ok(Self {
            gateway: gateway.child(),
            cfg,
            report: BuildReport::default(),
            new_groups: Vec::new(),
        })
    }

    pub fn report(&self) -> &BuildReport {
        &self.report
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn tok(&self) -> &dyn Tokenizer {
        self.gateway.tokenizer()
    }

    fn note<T>(&mut self, o: &Outcome<T>) {
        if o.repaired {
            self.report.repairs += 1;
        }
        if o.value.is_none() {
            self.report.llm_errors += 1;
        }
    }

    fn outline_excerpt(&self, text: &str) -> String {
        let spans = self.tok().token_spans(text);
        let head = self.cfg.outline_head_tokens;
        let ex = self.cfg.outline_excerpt_tokens;
        if spans.len() <= head + 2 * ex || ex == 0 {
            return text.to_string();
        }
        let head_text = &text[..spans[head].start];
        let mid = head + (spans.len() - head) / 2 - ex / 2;
        let mid_text = &text[spans[mid].start..spans[mid + ex].start];
        let tail_text = &text[spans[spans.len() - ex].start..];
        format!("{}\n\n[...]\n\n{}\n\n[...]\n\n{}", head_text.trim_end(), mid_text.trim(), tail_text.trim_start())
    }

    /// Root plus top-level outline titles, no content yet.
    pub fn generate_outline(&mut self, doc: &Document) -> Result<KnowledgeTree, TreeError> {
        if doc.text.trim().is_empty() {
            return Err(CorpusError::EmptyDocument(doc.doc_id.clone()).into());
        }
        let mut tree = KnowledgeTree::new(doc.doc_id.clone(), doc.title(), 0);
        let max = self.cfg.max_children;
        let values = placeholders([("max_titles", max.to_string()), ("document", self.outline_excerpt(&doc.text))]);
        let out = structured(&self.gateway, TemplateId::Outline, values, 1024, |raw| {
            let entries = parse::parse_outline(raw, max)?;
            if entries.len() < 2 {
                return Err(ParseError::Constraint(format!(
                    "the outline needs at least 2 distinct titles, got {}",
                    entries.len()
                )));
            }
            Ok(entries)
        });
        self.note(&out);
        match out.value {
            Some(Ok(entries)) => {
                for e in entries {
                    let id = tree.add_intermediate(tree.root, e.title)?;
                    tree.set_summary(id, e.scope)?;
                }
            }
            _ => {
                self.report.outline_fallback = true;
                tree.add_intermediate(tree.root, FALLBACK_OUTLINE_TITLE)?;
            }
        }
        self.report.outline_titles += tree.children(tree.root).len();
        Ok(tree)
    }

    /// Route one chunk through the tree. Returns whether any leaf took it;
    /// a chunk no path accepted is recorded as an orphan.
    pub fn insert_segment(&mut self, tree: &mut KnowledgeTree, chunk: &Chunk) -> Result<bool, TreeError> {
        if chunk.doc_id != tree.doc_id {
            return Err(TreeError::ForeignChunk {
                chunk_id: chunk.chunk_id,
                expected: tree.doc_id.clone(),
                found: chunk.doc_id.clone(),
            });
        }
        tree.chunk_count = tree.chunk_count.max(chunk.chunk_id + 1);
        let before = self.gateway.log().len();
        self.report.offered_chunks.insert(chunk.chunk_id);
        let touched = self.insert_at(tree, chunk, tree.root, 0)?;
        if !touched {
            tracing::warn!(chunk_id = chunk.chunk_id, "no insertion path accepted the chunk");
            tree.orphans.insert(chunk.chunk_id);
        }
        let calls = (self.gateway.log().len() - before) as u64;
        self.report.max_insertion_calls = self.report.max_insertion_calls.max(calls);
        Ok(touched)
    }

    fn insert_at(&mut self, tree: &mut KnowledgeTree, chunk: &Chunk, at: NodeId, depth: usize) -> Result<bool, TreeError> {
        self.report.max_insertion_depth = self.report.max_insertion_depth.max(depth);
        let children = tree.children(at).to_vec();
        if children.is_empty() || depth >= self.cfg.max_depth {
            let touched = self.create_node(tree, at, chunk)?;
            self.soft_group(tree, at)?;
            return Ok(touched);
        }
        let titles: Vec<String> = children.iter().map(|c| tree.nodes[c].title.clone()).collect();
        let Some(selection) = self.select(&titles, chunk) else {
            return Ok(false);
        };
        if selection.is_empty() {
            let touched = self.create_node(tree, at, chunk)?;
            self.soft_group(tree, at)?;
            return Ok(touched);
        }
        let mut touched = false;
        for (idx, extract) in selection {
            let target = children[idx];
            if tree.nodes[&target].is_leaf() {
                if self.merge_content(tree, target, chunk, &extract)? {
                    touched = true;
                    self.split_node(tree, target)?;
                }
            } else {
                touched |= self.insert_at(tree, chunk, target, depth + 1)?;
            }
        }
        self.soft_group(tree, at)?;
        Ok(touched)
    }

    /// Selected child indices with their extracts; `None` on backend failure.
    fn select(&mut self, titles: &[String], chunk: &Chunk) -> Option<Vec<(usize, String)>> {
        let n = titles.len();
        let k = self.cfg.select_num;
        let values = placeholders([
            ("select_num", k.to_string()),
            ("outlines", numbered(titles)),
            ("text", chunk.text.clone()),
        ]);
        let out = structured(&self.gateway, TemplateId::SelectTitles, values, 1024, |raw| {
            parse::parse_title_selection(raw, n, k)
        });
        self.note(&out);
        match out.value? {
            Ok(sel) => {
                let mut seen = BTreeSet::new();
                Some(
                    sel.entries
                        .into_iter()
                        .filter(|e| e.index >= 0 && seen.insert(e.index))
                        .map(|e| (e.index as usize, e.payload))
                        .collect(),
                )
            }
            Err(e) => {
                tracing::debug!(error = %e, "selection unusable, treating as no match");
                self.report.degraded_selections += 1;
                Some(Vec::new())
            }
        }
    }

    fn create_node(&mut self, tree: &mut KnowledgeTree, at: NodeId, chunk: &Chunk) -> Result<bool, TreeError> {
        let siblings: Vec<String> = tree.children(at).iter().map(|c| tree.nodes[c].title.clone()).collect();
        let listed = if siblings.is_empty() { "(none)".to_string() } else { numbered(&siblings) };
        let parent_title = tree.node(at).ok_or(TreeError::UnknownNode(at))?.title.clone();
        let values = placeholders([
            ("outlines", listed),
            ("text", chunk.text.clone()),
            ("parent_title", parent_title),
        ]);
        let out = structured(&self.gateway, TemplateId::CreateNode, values, 2048, |raw| {
            parse::parse_title_selection(raw, 0, 1)
        });
        self.note(&out);
        let (title, text) = match out.value {
            None => return Ok(false),
            Some(Ok(sel)) if !sel.entries.is_empty() => {
                let e = sel.entries.into_iter().next().expect("checked non-empty");
                let text = if e.payload.trim().is_empty() { chunk.text.trim().to_string() } else { e.payload };
                (e.title, text)
            }
            Some(_) => {
                self.report.create_fallbacks += 1;
                (fallback_title(&chunk.text, chunk.chunk_id), chunk.text.trim().to_string())
            }
        };
        let title = unique_title(&siblings, &title);
        let id = tree.add_leaf(at, title, vec![Passage::new(text, [chunk.chunk_id])])?;
        self.report.creates += 1;
        self.split_node(tree, id)?;
        Ok(true)
    }

    fn merge_content(&mut self, tree: &mut KnowledgeTree, leaf: NodeId, chunk: &Chunk, extract: &str) -> Result<bool, TreeError> {
        let node = tree.node(leaf).ok_or(TreeError::UnknownNode(leaf))?;
        let supply = if extract.trim().is_empty() { chunk.text.trim() } else { extract.trim() }.to_string();
        let values = placeholders([
            ("topic", node.title.clone()),
            ("exist_content", node.content_text()),
            ("supply_content", supply.clone()),
        ]);
        let out = structured(&self.gateway, TemplateId::MergeContent, values, 2048, parse::parse_merged_content);
        self.note(&out);
        let node = tree.node_mut(leaf).expect("checked above");
        match out.value {
            None => return Ok(false),
            Some(Ok(merged)) if merged.trim().is_empty() => {
                self.report.empty_merges += 1;
                match node.content.last_mut() {
                    Some(last) => {
                        last.cited_chunk_ids.insert(chunk.chunk_id);
                    }
                    None => node.content.push(Passage::new(supply, [chunk.chunk_id])),
                }
            }
            Some(Ok(merged)) => node.content.push(Passage::new(merged.trim(), [chunk.chunk_id])),
            Some(Err(_)) => {
                self.report.merge_fallbacks += 1;
                node.content.push(Passage::new(supply, [chunk.chunk_id]));
            }
        }
        self.report.merges += 1;
        Ok(true)
    }

    /// Split a leaf whose content exceeds the cap into at least two leaf
    /// children. No-op (returns false) when the leaf fits.
    pub fn split_node(&mut self, tree: &mut KnowledgeTree, id: NodeId) -> Result<bool, TreeError> {
        let node = tree.node(id).ok_or(TreeError::UnknownNode(id))?;
        let limit = self.cfg.max_content_tokens;
        if !node.is_leaf() || self.tok().count(&node.content_text()) <= limit {
            return Ok(false);
        }
        let title = node.title.clone();
        let paragraphs = node.content.clone();
        let mut parts = None;
        if paragraphs.len() >= 2 {
            let texts: Vec<String> = paragraphs.iter().map(|p| p.text.clone()).collect();
            let values = placeholders([
                ("max_tokens", limit.to_string()),
                ("title", title.clone()),
                ("paragraphs", bracketed(&texts, 0)),
            ]);
            let tok = self.gateway.tokenizer();
            let n = paragraphs.len();
            let out = structured(&self.gateway, TemplateId::SplitNode, values, 1024, |raw| {
                let groups = parse::parse_assignment(raw, n, n)?;
                if groups.len() < 2 {
                    return Err(ParseError::Constraint("a split needs at least 2 subtopics".into()));
                }
                for g in &groups {
                    let t: usize = g.members.iter().map(|&i| tok.count(&texts[i])).sum();
                    if t > limit {
                        return Err(ParseError::Constraint(format!(
                            "subtopic `{}` has {t} tokens, above the limit of {limit}",
                            g.title
                        )));
                    }
                }
                Ok(groups)
            });
            self.note(&out);
            if let Some(Ok(groups)) = out.value {
                parts = Some(
                    sorted_groups(groups)
                        .into_iter()
                        .map(|(t, members)| (t, members.iter().map(|&i| paragraphs[i].clone()).collect::<Vec<_>>()))
                        .collect::<Vec<_>>(),
                );
            }
        }
        let parts = match parts {
            Some(p) => p,
            None => {
                self.report.split_fallbacks += 1;
                split_fallback(self.tok(), &title, &paragraphs, limit)
            }
        };
        debug_assert!(parts.len() >= 2);
        debug_assert!(parts.iter().all(|(_, ps)| passages_tokens(self.tok(), ps) <= limit));
        let node = tree.node_mut(id).expect("checked above");
        node.kind = NodeKind::Intermediate;
        node.content.clear();
        let mut taken: Vec<String> = Vec::new();
        for (t, ps) in parts {
            let t = unique_title(&taken, &t);
            taken.push(t.clone());
            tree.add_leaf(id, t, ps)?;
        }
        self.report.splits += 1;
        tracing::debug!(node = %id, children = taken.len(), "split leaf");
        self.soft_group(tree, id)?;
        Ok(true)
    }

    /// Regroup the children of `parent` under named group nodes when there
    /// are more than the fan-out cap. No-op (returns false) otherwise.
    pub fn soft_group(&mut self, tree: &mut KnowledgeTree, parent: NodeId) -> Result<bool, TreeError> {
        let node = tree.node(parent).ok_or(TreeError::UnknownNode(parent))?;
        let max = self.cfg.max_children;
        let m = node.children.len();
        if m <= max {
            return Ok(false);
        }
        let titles: Vec<String> = node.children.iter().map(|c| tree.nodes[c].title.clone()).collect();
        let values = placeholders([
            ("max_groups", max.to_string()),
            ("parent_title", node.title.clone()),
            ("titles", bracketed(&titles, 0)),
        ]);
        let out = structured(&self.gateway, TemplateId::GroupTitles, values, 1024, |raw| {
            let groups = parse::parse_assignment(raw, m, max)?;
            if let Some(g) = groups.iter().find(|g| g.members.len() > max) {
                return Err(ParseError::Constraint(format!(
                    "group `{}` has {} members, above the limit of {max}",
                    g.title,
                    g.members.len()
                )));
            }
            Ok(groups)
        });
        self.note(&out);
        let groups = match out.value {
            Some(Ok(g)) => sorted_groups(g),
            _ => {
                self.report.grouping_fallbacks += 1;
                contiguous_groups(&titles, max)
            }
        };
        self.apply_groups(tree, parent, groups);
        self.report.groupings += 1;
        Ok(true)
    }

    fn apply_groups(&mut self, tree: &mut KnowledgeTree, parent: NodeId, groups: Vec<(String, Vec<usize>)>) {
        let old = tree.nodes[&parent].children.clone();
        let mut taken: Vec<String> = groups
            .iter()
            .filter(|(_, m)| m.len() == 1)
            .map(|(_, m)| tree.nodes[&old[m[0]]].title.clone())
            .collect();
        let mut new_children = Vec::with_capacity(groups.len());
        let mut oversized = Vec::new();
        for (title, members) in groups {
            if members.len() == 1 {
                new_children.push(old[members[0]]);
                continue;
            }
            let title = unique_title(&taken, &title);
            taken.push(title.clone());
            let gid = tree.next_id();
            tree.nodes.insert(
                gid,
                KnowledgeNode {
                    node_id: gid,
                    title,
                    kind: NodeKind::Intermediate,
                    content: Vec::new(),
                    children: members.iter().map(|&i| old[i]).collect(),
                    summary: String::new(),
                    path: Vec::new(),
                },
            );
            if members.len() > self.cfg.max_children {
                oversized.push(gid);
            }
            self.new_groups.push(gid);
            new_children.push(gid);
        }
        tree.nodes.get_mut(&parent).expect("parent exists").children = new_children;
        tree.refresh_paths(parent);
        for gid in oversized {
            let titles: Vec<String> = tree.nodes[&gid].children.iter().map(|c| tree.nodes[c].title.clone()).collect();
            let groups = contiguous_groups(&titles, self.cfg.max_children);
            self.apply_groups(tree, gid, groups);
        }
    }

    fn prune_empty(&mut self, tree: &mut KnowledgeTree) {
        loop {
            let empty: Vec<NodeId> = tree
                .nodes
                .values()
                .filter(|n| n.node_id != tree.root && n.kind == NodeKind::Intermediate && n.children.is_empty())
                .map(|n| n.node_id)
                .collect();
            if empty.is_empty() {
                return;
            }
            for id in &empty {
                tree.nodes.remove(id);
            }
            for n in tree.nodes.values_mut() {
                n.children.retain(|c| !empty.contains(c));
            }
            self.report.pruned_outline_nodes += empty.len();
        }
    }

    /// Rewrite every leaf through refusion, then summarize all nodes
    /// bottom-up.
    pub fn refuse_and_summarize(&mut self, tree: &mut KnowledgeTree) {
        self.refuse(tree);
        self.summarize(tree, None);
    }

    fn refuse(&mut self, tree: &mut KnowledgeTree) {
        let jobs: Vec<(NodeId, String, Vec<Passage>)> = tree
            .leaves()
            .into_iter()
            .map(|id| {
                let n = &tree.nodes[&id];
                (id, n.title.clone(), n.content.clone())
            })
            .collect();
        let gw = &self.gateway;
        let limit = self.cfg.max_content_tokens;
        let run = |(id, title, passages): &(NodeId, String, Vec<Passage>)| {
            let texts: Vec<String> = passages.iter().map(|p| p.text.clone()).collect();
            let values = placeholders([("title", title.clone()), ("text", bracketed(&texts, 1))]);
            let tok = gw.tokenizer();
            let out = structured(gw, TemplateId::Refusion, values, 4096, |raw| {
                let paras = parse::parse_refusion(raw, texts.len())?;
                let total: usize = paras.iter().map(|p| tok.count(&p.paragraph)).sum();
                if total > limit {
                    return Err(ParseError::Constraint(format!(
                        "rewritten content has {total} tokens, above the limit of {limit}"
                    )));
                }
                Ok(paras)
            });
            (*id, out)
        };
        let results: Vec<(NodeId, Outcome<Vec<RefusedParagraph>>)> = if self.cfg.parallel {
            jobs.par_iter().map(run).collect()
        } else {
            jobs.iter().map(run).collect()
        };
        for ((id, _, passages), (_, out)) in jobs.iter().zip(results) {
            self.note(&out);
            match out.value {
                Some(Ok(paras)) => {
                    let content = paras
                        .into_iter()
                        .map(|p| Passage {
                            text: p.paragraph,
                            cited_chunk_ids: p
                                .cited
                                .iter()
                                .flat_map(|&label| passages[label - 1].cited_chunk_ids.iter().copied())
                                .collect(),
                        })
                        .collect();
                    tree.nodes.get_mut(id).expect("leaf exists").content = content;
                }
                _ => {
                    tracing::debug!(node = %id, "refusion unusable, keeping snippets");
                    self.report.refusion_fallbacks += 1;
                }
            }
        }
    }

    fn summary_input(tree: &KnowledgeTree, id: NodeId) -> String {
        let n = &tree.nodes[&id];
        if n.is_leaf() {
            let text = n.content_text();
            return if text.trim().is_empty() { n.title.clone() } else { text };
        }
        let subs: Vec<&KnowledgeNode> = n.children.iter().map(|c| &tree.nodes[c]).collect();
        let mut out = format!(
            "Title: {}\nSubtopics: {}\n",
            n.title,
            subs.iter().map(|c| c.title.as_str()).collect::<Vec<_>>().join("; ")
        );
        for c in subs {
            out.push_str(&format!("\n- {}: {}", c.title, one_line(&c.summary)));
        }
        out
    }

    /// Summaries bottom-up by height; nodes of equal height are independent.
    fn summarize(&mut self, tree: &mut KnowledgeTree, only: Option<&BTreeSet<NodeId>>) {
        let mut height: BTreeMap<NodeId, usize> = BTreeMap::new();
        for id in tree.postorder() {
            let h = tree.nodes[&id]
                .children
                .iter()
                .map(|c| height.get(c).map_or(0, |h| h + 1))
                .max()
                .unwrap_or(0);
            height.insert(id, h);
        }
        let mut levels: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
        for (id, h) in &height {
            if only.is_none_or(|s| s.contains(id)) {
                levels.entry(*h).or_default().push(*id);
            }
        }
        for ids in levels.into_values() {
            let inputs: Vec<(NodeId, String)> = ids.iter().map(|&id| (id, Self::summary_input(tree, id))).collect();
            let gw = &self.gateway;
            let run = |(_, text): &(NodeId, String)| {
                let req = CompletionRequest::new(TemplateId::NodeSummary, placeholders([("text", text.clone())]));
                gw.complete(&req).map(|r| r.raw_text.trim().to_string())
            };
            let outs: Vec<_> = if self.cfg.parallel {
                inputs.par_iter().map(run).collect()
            } else {
                inputs.iter().map(run).collect()
            };
            for ((id, input), out) in inputs.iter().zip(outs) {
                let summary = match out {
                    Ok(s) if !s.is_empty() => s,
                    other => {
                        if other.is_err() {
                            self.report.llm_errors += 1;
                        }
                        self.report.summary_fallbacks += 1;
                        let t = one_line(truncate_to(self.tok(), input, self.cfg.summary_fallback_tokens));
                        if t.is_empty() {
                            tree.nodes[id].title.clone()
                        } else {
                            t
                        }
                    }
                };
                self.report.summaries += 1;
                if SUMMARY_TARGET_WORDS.contains(&summary.split_whitespace().count()) {
                    self.report.summaries_in_target += 1;
                }
                tree.nodes.get_mut(id).expect("node exists").summary = summary;
            }
        }
    }

    fn organize(&mut self, doc: &Document, chunks: &[Chunk], summarize_root: bool) -> Result<KnowledgeTree, TreeError> {
        let mut tree = self.generate_outline(doc)?;
        for c in chunks {
            self.insert_segment(&mut tree, c)?;
        }
        self.prune_empty(&mut tree);
        self.refuse(&mut tree);
        if summarize_root {
            self.summarize(&mut tree, None);
        } else {
            let below: BTreeSet<NodeId> = tree.nodes.keys().copied().filter(|&id| id != tree.root).collect();
            self.summarize(&mut tree, Some(&below));
        }
        Ok(tree)
    }

    fn finish(mut self, mut tree: KnowledgeTree, chunk_count: usize, start: Instant) -> BuildOutput {
        tree.chunk_count = chunk_count;
        let root = tree.root;
        tree.refresh_paths(root);
        let caps = Caps {
            max_content_tokens: self.cfg.max_content_tokens,
            max_children: self.cfg.max_children,
            tokenizer: self.gateway.tokenizer(),
        };
        let r = &mut self.report;
        r.violations = tree.validate(Some(caps));
        r.doc_id = tree.doc_id.clone();
        r.chunks = chunk_count;
        r.nodes = tree.len();
        r.leaves = tree.leaves().len();
        r.depth = tree.depth();
        r.batches = r.batches.max(1);
        r.llm_calls = self.gateway.log().len() as u64;
        r.usage = self.gateway.log().usage();
        r.orphans = tree.orphans.iter().copied().collect();
        if !r.violations.is_empty() {
            tracing::warn!(doc_id = %tree.doc_id, violations = r.violations.len(), "tree invariants violated");
        }
        tracing::info!(
            doc_id = %tree.doc_id,
            nodes = r.nodes,
            calls = r.llm_calls,
            tokens = r.usage.total(),
            orphans = r.orphans.len(),
            "built tree"
        );
        BuildOutput {
            tree,
            report: self.report,
            timing: BuildTiming {
                wall_time_ms: start.elapsed().as_millis() as u64,
            },
        }
    }

    /// Outline, sequential insertion of every chunk, refusion and summaries.
    pub fn build(mut self, doc: &Document, chunks: &[Chunk]) -> Result<BuildOutput, TreeError> {
        let start = Instant::now();
        check_inputs(doc, chunks)?;
        let tree = self.organize(doc, chunks, true)?;
        let n = chunks.iter().map(|c| c.chunk_id + 1).max().unwrap_or(0);
        Ok(self.finish(tree, n, start))
    }

    /// Build one subtree per contiguous batch of chunks, then merge them
    /// under a single root, regroup the root if needed, and re-summarize
    /// the root and any group nodes the merge created.
    pub fn build_batched(mut self, doc: &Document, chunks: &[Chunk]) -> Result<BuildOutput, TreeError> {
        check_inputs(doc, chunks)?;
        if self.cfg.batch_size >= chunks.len() {
            return self.build(doc, chunks);
        }
        let start = Instant::now();
        let batches: Vec<&[Chunk]> = chunks.chunks(self.cfg.batch_size).collect();
        let run = |batch: &&[Chunk]| -> Result<(KnowledgeTree, BuildReport), TreeError> {
            let mut org = Organizer::new(&self.gateway, self.cfg.clone())?;
            let (lo, hi) = (batch[0].char_span.0, batch[batch.len() - 1].char_span.1);
            let text = doc.text.get(lo..hi).unwrap_or(&doc.text).to_string();
            let sub = Document {
                doc_id: doc.doc_id.clone(),
                text,
                meta: doc.meta.clone(),
            };
            let tree = org.organize(&sub, batch, false)?;
            Ok((tree, org.report))
        };
        let results: Vec<Result<(KnowledgeTree, BuildReport), TreeError>> = if self.cfg.parallel {
            batches.par_iter().map(run).collect()
        } else {
            batches.iter().map(run).collect()
        };
        let n = chunks.iter().map(|c| c.chunk_id + 1).max().unwrap_or(0);
        let mut tree = KnowledgeTree::new(doc.doc_id.clone(), doc.title(), n);
        let root = tree.root;
        for res in results {
            let (sub, rep) = res?;
            for &c in sub.children(sub.root) {
                graft(&mut tree, root, &sub, c);
            }
            tree.orphans.extend(sub.orphans.iter().copied());
            self.report.absorb(&rep);
        }
        self.report.batches = batches.len();
        self.new_groups.clear();
        self.soft_group(&mut tree, root)?;
        let mut targets: BTreeSet<NodeId> = self.new_groups.iter().copied().filter(|g| tree.nodes.contains_key(g)).collect();
        targets.insert(root);
        self.summarize(&mut tree, Some(&targets));
        Ok(self.finish(tree, n, start))
    }
}

/// Copy the subtree of `src` rooted at `src_id` under `dst_parent`,
/// assigning fresh ids.
fn graft(dst: &mut KnowledgeTree, dst_parent: NodeId, src: &KnowledgeTree, src_id: NodeId) {
    let n = &src.nodes[&src_id];
    let id = dst.next_id();
    dst.nodes.insert(
        id,
        KnowledgeNode {
            node_id: id,
            children: Vec::new(),
            ..n.clone()
        },
    );
    dst.nodes.get_mut(&dst_parent).expect("parent exists").children.push(id);
    for &c in &n.children {
        graft(dst, id, src, c);
    }
}

pub fn build_tree(gateway: &Gateway, doc: &Document, chunks: &[Chunk], cfg: &BuildConfig) -> Result<BuildOutput, TreeError> {
    Organizer::new(gateway, cfg.clone())?.build(doc, chunks)
}

pub fn build_tree_batched(
    gateway: &Gateway,
    doc: &Document,
    chunks: &[Chunk],
    cfg: &BuildConfig,
) -> Result<BuildOutput, TreeError> {
    Organizer::new(gateway, cfg.clone())?.build_batched(doc, chunks)
}
