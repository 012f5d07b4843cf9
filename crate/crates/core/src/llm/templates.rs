//! Prompt templates.
//!
//! The seven organization/navigation templates are stored verbatim under
//! `assets/prompts/`. The remaining ones (outline, split, group, memory,
//! answer) cover operations whose wording we define ourselves.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version tag for the template asset set. Bump on any body change.
pub const TEMPLATE_SET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    SelectTitles,
    CreateNode,
    MergeContent,
    Refusion,
    NodeSummary,
    Navigate,
    LeafSelect,
    Outline,
    SplitNode,
    GroupTitles,
    NavigateMemory,
    MemoryUpdate,
    Answer,
}

impl TemplateId {
    pub const ALL: [TemplateId; 13] = [
        TemplateId::SelectTitles,
        TemplateId::CreateNode,
        TemplateId::MergeContent,
        TemplateId::Refusion,
        TemplateId::NodeSummary,
        TemplateId::Navigate,
        TemplateId::LeafSelect,
        TemplateId::Outline,
        TemplateId::SplitNode,
        TemplateId::GroupTitles,
        TemplateId::NavigateMemory,
        TemplateId::MemoryUpdate,
        TemplateId::Answer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::SelectTitles => "select_titles",
            TemplateId::CreateNode => "create_node",
            TemplateId::MergeContent => "merge_content",
            TemplateId::Refusion => "refusion",
            TemplateId::NodeSummary => "node_summary",
            TemplateId::Navigate => "navigate",
            TemplateId::LeafSelect => "leaf_select",
            TemplateId::Outline => "outline",
            TemplateId::SplitNode => "split_node",
            TemplateId::GroupTitles => "group_titles",
            TemplateId::NavigateMemory => "navigate_memory",
            TemplateId::MemoryUpdate => "memory_update",
            TemplateId::Answer => "answer",
        }
    }

    pub fn body(self) -> &'static str {
        match self {
            TemplateId::SelectTitles => include_str!("../../assets/prompts/select_titles.txt"),
            TemplateId::CreateNode => include_str!("../../assets/prompts/create_node.txt"),
            TemplateId::MergeContent => include_str!("../../assets/prompts/merge_content.txt"),
            TemplateId::Refusion => include_str!("../../assets/prompts/refusion.txt"),
            TemplateId::NodeSummary => include_str!("../../assets/prompts/node_summary.txt"),
            TemplateId::Navigate => include_str!("../../assets/prompts/navigate.txt"),
            TemplateId::LeafSelect => include_str!("../../assets/prompts/leaf_select.txt"),
            TemplateId::Outline => include_str!("../../assets/prompts/outline.txt"),
            TemplateId::SplitNode => include_str!("../../assets/prompts/split_node.txt"),
            TemplateId::GroupTitles => include_str!("../../assets/prompts/group_titles.txt"),
            TemplateId::NavigateMemory => {
                include_str!("../../assets/prompts/navigate_memory.txt")
            }
            TemplateId::MemoryUpdate => include_str!("../../assets/prompts/memory_update.txt"),
            TemplateId::Answer => include_str!("../../assets/prompts/answer.txt"),
        }
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::SelectTitles => &["select_num", "outlines", "text"],
            TemplateId::CreateNode => &["outlines", "text", "parent_title"],
            TemplateId::MergeContent => &["topic", "exist_content", "supply_content"],
            TemplateId::Refusion => &["title", "text"],
            TemplateId::NodeSummary => &["text"],
            TemplateId::Navigate => &["path", "entries", "question"],
            TemplateId::LeafSelect => &["query", "texts"],
            TemplateId::Outline => &["max_titles", "document"],
            TemplateId::SplitNode => &["max_tokens", "title", "paragraphs"],
            TemplateId::GroupTitles => &["max_groups", "parent_title", "titles"],
            TemplateId::NavigateMemory => &["path", "entries", "question", "memory"],
            TemplateId::MemoryUpdate => &["max_tokens", "question", "memory", "context"],
            TemplateId::Answer => &["retrieved", "summaries", "evidence", "question"],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown template id `{0}`")]
pub struct UnknownTemplate(pub String);

impl FromStr for TemplateId {
    type Err = UnknownTemplate;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("template `{template}` is missing placeholder `{key}`")]
    MissingPlaceholder { template: TemplateId, key: String },
}

pub type Placeholders = BTreeMap<String, String>;

/// Substitute `{name}` placeholders in a single pass. Substituted values are
/// never re-scanned, so values that happen to contain braces are safe.
pub fn render(template: TemplateId, values: &Placeholders) -> Result<String, RenderError> {
    let declared = template.placeholders();
    for key in declared {
        if !values.contains_key(*key) {
            return Err(RenderError::MissingPlaceholder {
                template,
                key: (*key).to_string(),
            });
        }
    }
    let body = template.body();
    let mut out = String::with_capacity(body.len() + values.values().map(String::len).sum::<usize>());
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        let name = &after[..name_len];
        if after[name_len..].starts_with('}') && declared.contains(&name) {
            out.push_str(&values[name]);
            rest = &after[name_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Convenience builder for placeholder maps.
pub fn placeholders<K: Into<String>, V: Into<String>>(
    pairs: impl IntoIterator<Item = (K, V)>,
) -> Placeholders {
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}
