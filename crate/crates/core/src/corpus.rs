//! Documents and token-bounded overlapping chunks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::Tokenizer;

pub const DEFAULT_CHUNK_TOKEN_SIZE: usize = 512;
pub const DEFAULT_OVERLAP_RATE: f64 = 0.2;
pub const MIN_CHUNK_TOKEN_SIZE: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("document `{0}` is empty")]
    EmptyDocument(String),
    #[error("tokenizer failure: {0}")]
    TokenizerFailure(String),
    #[error("invalid chunking config: {0}")]
    InvalidConfig(String),
    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            text: text.into(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn title(&self) -> &str {
        self.meta.get("title").map(String::as_str).unwrap_or(&self.doc_id)
    }
}

/// A contiguous segment of a document. `char_span` is authoritative;
/// `text` is the byte range it names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: usize,
    pub doc_id: String,
    pub text: String,
    pub token_count: usize,
    /// Byte offsets `[start, end)` into `Document::text`.
    pub char_span: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub chunk_token_size: usize,
    pub overlap_rate: f64,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            chunk_token_size: DEFAULT_CHUNK_TOKEN_SIZE,
            overlap_rate: DEFAULT_OVERLAP_RATE,
        }
    }
}

impl ChunkConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.chunk_token_size < MIN_CHUNK_TOKEN_SIZE {
            return Err(CorpusError::InvalidConfig(format!(
                "chunk_token_size {} < {MIN_CHUNK_TOKEN_SIZE}",
                self.chunk_token_size
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_rate) {
            return Err(CorpusError::InvalidConfig(format!(
                "overlap_rate {} outside [0, 1)",
                self.overlap_rate
            )));
        }
        Ok(())
    }

    /// Tokens shared by consecutive chunks: `floor(rate * size)`.
    pub fn overlap_tokens(&self) -> usize {
        (self.overlap_rate * self.chunk_token_size as f64).floor() as usize
    }

    /// Nominal token distance between consecutive chunk starts.
    pub fn stride(&self) -> usize {
        self.chunk_token_size - self.overlap_tokens()
    }
}

/// Split a document into overlapping chunks of at most `chunk_token_size`
/// tokens.
///
/// Windows advance by a fixed stride of `size - floor(rate * size)` tokens.
/// Both ends of a window snap back to the nearest whitespace so no chunk
/// starts or ends inside a word; a window with no whitespace at all is cut
/// at a token boundary. Spans include the whitespace that follows the last
/// token, so the spans tile the document.
pub fn chunk_document(
    doc: &Document,
    cfg: &ChunkConfig,
    tok: &dyn Tokenizer,
) -> Result<Vec<Chunk>, CorpusError> {
    cfg.validate()?;
    if doc.text.is_empty() {
        return Err(CorpusError::EmptyDocument(doc.doc_id.clone()));
    }
    let text = doc.text.as_str();
    let spans = tok.token_spans(text);
    for s in &spans {
        if s.start >= s.end || s.end > text.len() || !text.is_char_boundary(s.start) {
            return Err(CorpusError::TokenizerFailure(format!(
                "{} produced invalid span {s:?}",
                tok.name()
            )));
        }
    }
    let n = spans.len();
    if n == 0 {
        // Whitespace-only text: a single zero-token chunk would violate the
        // token_count >= 1 invariant.
        return Err(CorpusError::EmptyDocument(doc.doc_id.clone()));
    }

    // word_break[b]: position b (between token b-1 and b) is whitespace-separated.
    let word_break = |b: usize| -> bool {
        b == 0 || b == n || text[spans[b - 1].end..spans[b].start].chars().any(char::is_whitespace)
    };
    let byte_at = |b: usize| -> usize {
        if b == n {
            text.len()
        } else if b == 0 {
            0
        } else {
            spans[b].start
        }
    };

    let size = cfg.chunk_token_size;
    let overlap = cfg.overlap_tokens();
    let mut chunks = Vec::new();
    let mut start = 0usize;
    loop {
        let mut end = (start + size).min(n);
        if end < n && !word_break(end) {
            if let Some(b) = (start + 1..end).rev().find(|&b| word_break(b)) {
                end = b;
            }
        }
        let (lo, hi) = (byte_at(start), byte_at(end));
        chunks.push(Chunk {
            chunk_id: chunks.len(),
            doc_id: doc.doc_id.clone(),
            text: text[lo..hi].to_string(),
            token_count: end - start,
            char_span: (lo, hi),
        });
        if end == n {
            break;
        }
        let target = end.saturating_sub(overlap).max(start + 1);
        let mut next = (start + 1..=target).rev().find(|&b| word_break(b));
        if next.is_none() {
            next = (target..=end).find(|&b| word_break(b));
        }
        start = next.unwrap_or(end);
    }
    Ok(chunks)
}

/// Rebuild the document text from its chunks by dropping each chunk's
/// overlapped prefix.
pub fn reconstruct(text_len_hint: usize, chunks: &[Chunk]) -> String {
    let mut out = String::with_capacity(text_len_hint);
    let mut covered = 0usize;
    for c in chunks {
        let (lo, hi) = c.char_span;
        if hi <= covered {
            continue;
        }
        let skip = covered.saturating_sub(lo);
        out.push_str(&c.text[skip..]);
        covered = hi;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::WordPieceTokenizer;
    use proptest::prelude::*;

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    /// Brute-force oracle: locate each chunk's first token in the full
    /// token stream by re-tokenizing the prefix before its span.
    fn token_offset(tok: &WordPieceTokenizer, doc: &str, c: &Chunk) -> usize {
        tok.count(&doc[..c.char_span.0])
    }

    #[test]
    fn default_values() {
        let cfg = ChunkConfig::default();
        assert_eq!(cfg.chunk_token_size, 512);
        assert_eq!(cfg.overlap_rate, 0.2);
        assert_eq!(cfg.overlap_tokens(), 102);
        assert_eq!(cfg.stride(), 410);
    }

    #[test]
    fn twelve_hundred_tokens_make_three_chunks() {
        let tok = WordPieceTokenizer;
        let doc = Document::new("d", words(1200));
        let chunks = chunk_document(&doc, &ChunkConfig::default(), &tok).unwrap();
        assert_eq!(chunks.len(), 3);
        let offsets: Vec<_> = chunks.iter().map(|c| token_offset(&tok, &doc.text, c)).collect();
        assert_eq!(offsets, vec![0, 410, 820]);
        let counts: Vec<_> = chunks.iter().map(|c| tok.count(&c.text)).collect();
        assert_eq!(counts, vec![512, 512, 380]);
        for c in &chunks {
            assert_eq!(c.token_count, tok.count(&c.text));
        }
        assert_eq!(reconstruct(doc.text.len(), &chunks), doc.text);
    }

    #[test]
    fn short_document_is_one_chunk() {
        let tok = WordPieceTokenizer;
        let doc = Document::new("d", words(100));
        let chunks = chunk_document(&doc, &ChunkConfig::default(), &tok).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, doc.text);
        assert_eq!(chunks[0].char_span, (0, doc.text.len()));
    }

    #[test]
    fn empty_document_rejected() {
        let tok = WordPieceTokenizer;
        let err = chunk_document(&Document::new("e", ""), &ChunkConfig::default(), &tok);
        assert_eq!(err, Err(CorpusError::EmptyDocument("e".into())));
        let err = chunk_document(&Document::new("e", "  \n "), &ChunkConfig::default(), &tok);
        assert!(matches!(err, Err(CorpusError::EmptyDocument(_))));
    }

    #[test]
    fn bad_config_rejected() {
        let tok = WordPieceTokenizer;
        let doc = Document::new("d", "some text");
        for cfg in [
            ChunkConfig { chunk_token_size: 15, overlap_rate: 0.2 },
            ChunkConfig { chunk_token_size: 64, overlap_rate: 1.0 },
            ChunkConfig { chunk_token_size: 64, overlap_rate: -0.1 },
        ] {
            assert!(matches!(
                chunk_document(&doc, &cfg, &tok),
                Err(CorpusError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn never_splits_inside_a_word() {
        let tok = WordPieceTokenizer;
        let text = "alpha, beta. gamma; delta! ".repeat(40);
        let doc = Document::new("d", text.clone());
        let cfg = ChunkConfig { chunk_token_size: 16, overlap_rate: 0.25 };
        let chunks = chunk_document(&doc, &cfg, &tok).unwrap();
        for c in &chunks {
            let (lo, hi) = c.char_span;
            assert!(lo == 0 || text[..lo].ends_with(char::is_whitespace), "{c:?}");
            assert!(hi == text.len() || text[..hi].ends_with(char::is_whitespace), "{c:?}");
        }
        assert_eq!(reconstruct(text.len(), &chunks), text);
    }

    proptest! {
        #[test]
        fn chunk_invariants(
            text in "[a-z]{1,6}([ ,.\n]{1,2}[a-z]{1,6}){0,300}",
            size in 16usize..64,
            rate in 0.0f64..0.9,
        ) {
            let tok = WordPieceTokenizer;
            let doc = Document::new("p", text.clone());
            let cfg = ChunkConfig { chunk_token_size: size, overlap_rate: rate };
            let chunks = chunk_document(&doc, &cfg, &tok).unwrap();
            prop_assert_eq!(reconstruct(text.len(), &chunks), text.clone());
            let mut prev_lo = None;
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.chunk_id, i);
                prop_assert_eq!(&text[c.char_span.0..c.char_span.1], c.text.as_str());
                prop_assert!(c.token_count >= 1 && c.token_count <= size);
                prop_assert_eq!(c.token_count, tok.count(&c.text));
                if let Some(p) = prev_lo { prop_assert!(c.char_span.0 > p); }
                prev_lo = Some(c.char_span.0);
            }
            let again = chunk_document(&doc, &cfg, &tok).unwrap();
            prop_assert_eq!(chunks, again);
        }

        #[test]
        fn whitespace_separated_words_give_exact_windows(
            n in 1usize..700,
            size in 16usize..100,
            rate in 0.0f64..0.9,
        ) {
            let tok = WordPieceTokenizer;
            let doc = Document::new("p", words(n));
            let cfg = ChunkConfig { chunk_token_size: size, overlap_rate: rate };
            let chunks = chunk_document(&doc, &cfg, &tok).unwrap();
            for (i, c) in chunks.iter().enumerate() {
                let off = token_offset(&tok, &doc.text, c);
                prop_assert_eq!(off, i * cfg.stride());
                if i + 1 < chunks.len() {
                    prop_assert_eq!(c.token_count, size);
                    let next = token_offset(&tok, &doc.text, &chunks[i + 1]);
                    prop_assert_eq!(off + size - next, cfg.overlap_tokens());
                }
            }
        }
    }
}
