use serde::{Deserialize, Serialize};

use super::TreeError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    /// Cap on titles a chunk may be assigned to at one level.
    pub select_num: usize,
    /// Leaf content cap in tokens; a leaf above it is split.
    pub max_content_tokens: usize,
    /// Fan-out cap; a level above it is regrouped.
    pub max_children: usize,
    pub batch_size: usize,
    /// Insertion depth at which CreateNode is forced.
    pub max_depth: usize,
    pub outline_head_tokens: usize,
    pub outline_excerpt_tokens: usize,
    /// Length of the truncated-input summary used when summarization fails.
    pub summary_fallback_tokens: usize,
    /// Run refusion, summaries and batches on the rayon pool.
    pub parallel: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            select_num: 2,
            max_content_tokens: 1536,
            max_children: 12,
            batch_size: 250,
            max_depth: 12,
            outline_head_tokens: 4000,
            outline_excerpt_tokens: 400,
            summary_fallback_tokens: 150,
            parallel: true,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<(), TreeError> {
        let bad = |m: &str| Err(TreeError::InvalidConfig(m.to_string()));
        if self.select_num == 0 {
            return bad("select_num must be at least 1");
        }
        if self.max_content_tokens == 0 {
            return bad("max_content_tokens must be positive");
        }
        if self.max_children < 2 {
            return bad("max_children must be at least 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be positive");
        }
        if self.outline_head_tokens == 0 || self.summary_fallback_tokens == 0 {
            return bad("outline and summary budgets must be positive");
        }
        Ok(())
    }
}
