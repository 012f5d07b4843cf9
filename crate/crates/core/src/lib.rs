//! Hierarchical knowledge trees over long documents, and query-driven
//! navigational retrieval over them.
//!
//! Offline, each document is chunked, embedded, and organized by an LLM into
//! a [`tree::KnowledgeTree`] whose leaves cite the chunks they were built
//! from. Online, a query is first localized with exact vector search, then
//! the navigator walks the candidate subtrees top-down, absorbing summaries
//! or descending for raw evidence, and assembles a three-part context for
//! answer generation.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod index;
pub mod llm;
pub mod nav;
pub mod store;
pub mod synthetic;
pub mod tokenizer;
pub mod tree;
