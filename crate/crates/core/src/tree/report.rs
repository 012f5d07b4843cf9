use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::Violation;
use crate::llm::Usage;

/// Counters collected while building one tree. Everything here is
/// deterministic for a deterministic backend; wall time lives in
/// [`BuildTiming`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildReport {
    pub doc_id: String,
    pub chunks: usize,
    pub nodes: usize,
    pub leaves: usize,
    pub depth: usize,
    pub batches: usize,
    pub llm_calls: u64,
    pub usage: Usage,
    pub orphans: Vec<usize>,
    pub outline_titles: usize,
    pub outline_fallback: bool,
    pub pruned_outline_nodes: usize,
    pub creates: u64,
    pub merges: u64,
    pub empty_merges: u64,
    pub merge_fallbacks: u64,
    pub create_fallbacks: u64,
    pub degraded_selections: u64,
    pub splits: u64,
    pub split_fallbacks: u64,
    pub groupings: u64,
    pub grouping_fallbacks: u64,
    pub refusion_fallbacks: u64,
    pub summary_fallbacks: u64,
    pub summaries: u64,
    pub summaries_in_target: u64,
    pub repairs: u64,
    pub llm_errors: u64,
    pub max_insertion_calls: u64,
    pub max_insertion_depth: usize,
    /// Chunk ids whose text was placed in at least one insertion prompt.
    pub offered_chunks: BTreeSet<usize>,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildTiming {
    pub wall_time_ms: u64,
}

impl BuildReport {
    /// Upper bound on completion calls for one insertion that descends at
    /// most `depth` levels: every visited node may cost a select, a create
    /// with its split and regroup, one merge/split/regroup per selected
    /// leaf, and a level regroup, each at most twice with repair.
    pub fn insertion_call_bound(select_num: usize, depth: usize) -> u64 {
        let s = select_num as u64;
        let mut visited = 0u64;
        let mut width = 1u64;
        for _ in 0..=depth {
            visited = visited.saturating_add(width);
            width = width.saturating_mul(s);
        }
        visited.saturating_mul(2 * (1 + 3 + 3 * s + 1))
    }

    pub fn call_bound_held(&self, select_num: usize) -> bool {
        self.max_insertion_calls <= Self::insertion_call_bound(select_num, self.max_insertion_depth)
    }

    /// Fold a batch report into a merged one (structure fields are
    /// recomputed by the caller).
    pub fn absorb(&mut self, other: &BuildReport) {
        self.outline_titles += other.outline_titles;
        self.outline_fallback |= other.outline_fallback;
        self.pruned_outline_nodes += other.pruned_outline_nodes;
        self.creates += other.creates;
        self.merges += other.merges;
        self.empty_merges += other.empty_merges;
        self.merge_fallbacks += other.merge_fallbacks;
        self.create_fallbacks += other.create_fallbacks;
        self.degraded_selections += other.degraded_selections;
        self.splits += other.splits;
        self.split_fallbacks += other.split_fallbacks;
        self.groupings += other.groupings;
        self.grouping_fallbacks += other.grouping_fallbacks;
        self.refusion_fallbacks += other.refusion_fallbacks;
        self.summary_fallbacks += other.summary_fallbacks;
        self.summaries += other.summaries;
        self.summaries_in_target += other.summaries_in_target;
        self.repairs += other.repairs;
        self.llm_errors += other.llm_errors;
        self.max_insertion_calls = self.max_insertion_calls.max(other.max_insertion_calls);
        self.max_insertion_depth = self.max_insertion_depth.max(other.max_insertion_depth);
        self.offered_chunks.extend(other.offered_chunks.iter().copied());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_grows_with_depth() {
        assert_eq!(BuildReport::insertion_call_bound(2, 0), 22);
        assert_eq!(BuildReport::insertion_call_bound(2, 1), 66);
        assert!(BuildReport::insertion_call_bound(2, 12) > BuildReport::insertion_call_bound(2, 11));
        assert_eq!(BuildReport::insertion_call_bound(2, 200), u64::MAX);
    }
}
