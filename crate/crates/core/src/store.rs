//! On-disk artifacts: tree archives, vector indices, JSON-lines corpora,
//! traces and reports.
//!
//! A tree archive is a JSON object whose `payload` is the canonical region;
//! `content_hash` is the SHA-256 of the payload's compact serialization.
//! Build metadata (reports, wall time) goes in `sidecar`, which is not
//! hashed. Indices are packed little-endian vectors with a trailing
//! SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Chunk, Document};
use crate::index::{ChunkIndex, IndexEntry};
use crate::nav::{KnowledgeBase, NavigationTrace};
use crate::tree::{BuildReport, BuildTiming, KnowledgeTree, Violation};

pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_VERSION: &str = "1.0";
const INDEX_MAGIC: &[u8; 4] = b"TNIX";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: unsupported format version {found} (this build reads major {FORMAT_MAJOR})")]
    VersionMismatch { path: PathBuf, found: String },
    #[error("{path}: corrupt archive: {reason}")]
    Corruption { path: PathBuf, reason: String },
    #[error("{path}: tree invariants violated: {violations:?}")]
    InvariantViolation { path: PathBuf, violations: Vec<Violation> },
    #[error("{path}: {reason}")]
    Missing { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> StoreError {
    StoreError::Corruption {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Non-canonical build metadata stored next to a tree.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<BuildReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<BuildTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Archive<T> {
    format_version: String,
    kind: String,
    content_hash: String,
    payload: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sidecar: Option<Sidecar>,
}

/// Compact JSON of the tree; the hashed canonical form.
pub fn canonical_tree_bytes(tree: &KnowledgeTree) -> Vec<u8> {
    serde_json::to_vec(tree).expect("trees serialize")
}

pub fn tree_hash(tree: &KnowledgeTree) -> String {
    sha256_hex(&canonical_tree_bytes(tree))
}

/// Archive bytes for a tree. A function of the tree and sidecar only.
pub fn encode_tree(tree: &KnowledgeTree, sidecar: Option<&Sidecar>) -> Vec<u8> {
    let archive = Archive {
        format_version: FORMAT_VERSION.to_string(),
        kind: "knowledge_tree".to_string(),
        content_hash: tree_hash(tree),
        payload: tree,
        sidecar: sidecar.cloned(),
    };
    let mut out = serde_json::to_vec_pretty(&archive).expect("archives serialize");
    out.push(b'\n');
    out
}

pub fn save_tree(path: &Path, tree: &KnowledgeTree, sidecar: Option<&Sidecar>) -> Result<(), StoreError> {
    write_atomic(path, &encode_tree(tree, sidecar))
}

fn check_version(path: &Path, v: &str) -> Result<(), StoreError> {
    let major = v.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major != Some(FORMAT_MAJOR) {
        return Err(StoreError::VersionMismatch {
            path: path.to_path_buf(),
            found: v.to_string(),
        });
    }
    Ok(())
}

/// Parse and verify archive bytes: version, hash, then structural
/// invariants.
pub fn decode_tree(path: &Path, bytes: &[u8]) -> Result<(KnowledgeTree, Option<Sidecar>), StoreError> {
    #[derive(Deserialize)]
    struct Header {
        format_version: String,
    }
    let header: Header = serde_json::from_slice(bytes).map_err(|e| corrupt(path, e.to_string()))?;
    check_version(path, &header.format_version)?;
    let archive: Archive<KnowledgeTree> = serde_json::from_slice(bytes).map_err(|e| corrupt(path, e.to_string()))?;
    if archive.kind != "knowledge_tree" {
        return Err(corrupt(path, format!("expected a knowledge_tree archive, found {}", archive.kind)));
    }
    let actual = tree_hash(&archive.payload);
    if actual != archive.content_hash {
        return Err(corrupt(path, format!("content hash {actual} does not match recorded {}", archive.content_hash)));
    }
    let violations = archive.payload.validate(None);
    if !violations.is_empty() {
        return Err(StoreError::InvariantViolation {
            path: path.to_path_buf(),
            violations,
        });
    }
    Ok((archive.payload, archive.sidecar))
}

pub fn load_tree(path: &Path) -> Result<KnowledgeTree, StoreError> {
    load_tree_with_sidecar(path).map(|(t, _)| t)
}

pub fn load_tree_with_sidecar(path: &Path) -> Result<(KnowledgeTree, Option<Sidecar>), StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tree(path, &bytes)
}

/// Packed index: magic, u32 version, u32 dim, u64 count, then per entry
/// u64 chunk id, u32 doc id length, doc id bytes, `dim` f32 values; a
/// SHA-256 of all preceding bytes closes the file.
pub fn encode_index(index: &ChunkIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&FORMAT_MAJOR.to_le_bytes());
    out.extend_from_slice(&(index.dim as u32).to_le_bytes());
    out.extend_from_slice(&(index.entries.len() as u64).to_le_bytes());
    for e in &index.entries {
        out.extend_from_slice(&(e.chunk_id as u64).to_le_bytes());
        out.extend_from_slice(&(e.doc_id.len() as u32).to_le_bytes());
        out.extend_from_slice(e.doc_id.as_bytes());
        for x in &e.vector {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt(self.path, "truncated index"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_index(path: &Path, bytes: &[u8]) -> Result<ChunkIndex, StoreError> {
    if bytes.len() < 4 + 4 + 4 + 8 + 32 || &bytes[..4] != INDEX_MAGIC {
        return Err(corrupt(path, "not an index file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt(path, "index checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 4, path };
    let version = r.u32()?;
    if version != FORMAT_MAJOR {
        return Err(StoreError::VersionMismatch {
            path: path.to_path_buf(),
            found: version.to_string(),
        });
    }
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let chunk_id = r.u64()? as usize;
        let len = r.u32()? as usize;
        let doc_id = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt(path, "doc id is not UTF-8"))?;
        let raw = r.take(dim.checked_mul(4).ok_or_else(|| corrupt(path, "dimension overflow"))?)?;
        let vector = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        entries.push(IndexEntry { chunk_id, doc_id, vector });
    }
    if r.pos != body.len() {
        return Err(corrupt(path, "trailing bytes after index entries"));
    }
    let index = ChunkIndex { dim, entries };
    index.validate().map_err(|e| corrupt(path, e.to_string()))?;
    Ok(index)
}

pub fn save_index(path: &Path, index: &ChunkIndex) -> Result<(), StoreError> {
    write_atomic(path, &encode_index(index))
}

pub fn load_index(path: &Path) -> Result<ChunkIndex, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_index(path, &bytes)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("records serialize") + "\n")
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), StoreError> {
    write_atomic(path, to_jsonl(items).as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| corrupt(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("values serialize");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| corrupt(path, e.to_string()))
}

/// Make a document id safe to embed in a file name.
pub fn file_stem(doc_id: &str) -> String {
    doc_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

/// A corpus directory:
/// `corpus.jsonl`, `chunks.jsonl`, `tree.<doc>.json`, `index.<doc>.bin`,
/// `traces/*.jsonl`, `reports/*.json`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusDir {
    pub root: PathBuf,
}

impl CorpusDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }

    pub fn chunks_path(&self) -> PathBuf {
        self.root.join("chunks.jsonl")
    }

    pub fn tree_path(&self, doc_id: &str) -> PathBuf {
        self.root.join(format!("tree.{}.json", file_stem(doc_id)))
    }

    pub fn index_path(&self, doc_id: &str) -> PathBuf {
        self.root.join(format!("index.{}.bin", file_stem(doc_id)))
    }

    pub fn trace_path(&self, query_id: &str) -> PathBuf {
        self.root.join("traces").join(format!("{}.jsonl", file_stem(query_id)))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{}.json", file_stem(name)))
    }

    pub fn read_documents(&self) -> Result<Vec<Document>, StoreError> {
        read_jsonl(&self.corpus_path())
    }

    /// Write documents, chunks, trees and indices for a set of knowledge
    /// bases, replacing `corpus.jsonl` and `chunks.jsonl`.
    pub fn save(&self, kbs: &[(&KnowledgeBase, Option<Sidecar>)]) -> Result<(), StoreError> {
        let docs: Vec<&Document> = kbs.iter().map(|(kb, _)| &kb.document).collect();
        write_jsonl(&self.corpus_path(), &docs)?;
        let chunks: Vec<&Chunk> = kbs.iter().flat_map(|(kb, _)| kb.chunks.iter()).collect();
        write_jsonl(&self.chunks_path(), &chunks)?;
        for (kb, sidecar) in kbs {
            save_tree(&self.tree_path(&kb.document.doc_id), &kb.tree, sidecar.as_ref())?;
            save_index(&self.index_path(&kb.document.doc_id), &kb.index)?;
        }
        Ok(())
    }

    /// Every knowledge base listed in `corpus.jsonl`.
    pub fn load_all(&self) -> Result<BTreeMap<String, KnowledgeBase>, StoreError> {
        let docs = self.read_documents()?;
        let chunks: Vec<Chunk> = read_jsonl(&self.chunks_path())?;
        let mut by_doc: BTreeMap<String, Vec<Chunk>> = BTreeMap::new();
        for c in chunks {
            by_doc.entry(c.doc_id.clone()).or_default().push(c);
        }
        let mut out = BTreeMap::new();
        for document in docs {
            let doc_id = document.doc_id.clone();
            let tree = load_tree(&self.tree_path(&doc_id))?;
            let index = load_index(&self.index_path(&doc_id))?;
            let kb = KnowledgeBase {
                document,
                chunks: by_doc.remove(&doc_id).unwrap_or_default(),
                tree,
                index,
            };
            kb.check().map_err(|e| StoreError::Missing {
                path: self.root.clone(),
                reason: format!("document {doc_id}: {e}"),
            })?;
            out.insert(doc_id, kb);
        }
        Ok(out)
    }

    pub fn load(&self, doc_id: &str) -> Result<KnowledgeBase, StoreError> {
        self.load_all()?.remove(doc_id).ok_or_else(|| StoreError::Missing {
            path: self.corpus_path(),
            reason: format!("no document {doc_id}"),
        })
    }

    pub fn save_trace(&self, trace: &NavigationTrace) -> Result<PathBuf, StoreError> {
        let path = self.trace_path(&trace.query_id);
        write_atomic(&path, trace.to_jsonl().as_bytes())?;
        Ok(path)
    }

    pub fn save_report<T: Serialize>(&self, name: &str, report: &T) -> Result<PathBuf, StoreError> {
        let path = self.report_path(name);
        write_json(&path, report)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{NodeId, Passage};

    fn tree() -> KnowledgeTree {
        let mut t = KnowledgeTree::new("d", "Doc", 2);
        let a = t.add_intermediate(t.root, "A").unwrap();
        let l = t.add_leaf(a, "L", vec![Passage::new("x", [0, 1])]).unwrap();
        for id in [t.root, a, l] {
            t.set_summary(id, "s").unwrap();
        }
        t.refresh_paths(t.root);
        t
    }

    #[test]
    fn tree_round_trip_and_tamper() {
        let t = tree();
        let bytes = encode_tree(&t, None);
        let (back, side) = decode_tree(Path::new("t"), &bytes).unwrap();
        assert_eq!(back, t);
        assert!(side.is_none());
        assert_eq!(encode_tree(&back, None), bytes);
        let text = String::from_utf8(bytes).unwrap().replace("\"title\": \"L\"", "\"title\": \"M\"");
        assert!(matches!(decode_tree(Path::new("t"), text.as_bytes()), Err(StoreError::Corruption { .. })));
    }

    #[test]
    fn version_gate() {
        let text = String::from_utf8(encode_tree(&tree(), None)).unwrap().replace("\"1.0\"", "\"2.0\"");
        assert!(matches!(decode_tree(Path::new("t"), text.as_bytes()), Err(StoreError::VersionMismatch { .. })));
    }

    #[test]
    fn missing_child_is_reported() {
        let mut t = tree();
        t.nodes.get_mut(&NodeId(1)).unwrap().children.push(NodeId(9));
        let bytes = encode_tree(&t, None);
        match decode_tree(Path::new("t"), &bytes) {
            Err(StoreError::InvariantViolation { violations, .. }) => {
                assert!(violations.iter().any(|v| matches!(v, Violation::MissingChild { .. })), "{violations:?}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn index_round_trip_and_tamper() {
        let idx = ChunkIndex {
            dim: 2,
            entries: vec![
                IndexEntry { chunk_id: 0, doc_id: "d".into(), vector: vec![1.0, 0.0] },
                IndexEntry { chunk_id: 1, doc_id: "d".into(), vector: vec![0.6, 0.8] },
            ],
        };
        let mut bytes = encode_index(&idx);
        assert_eq!(decode_index(Path::new("i"), &bytes).unwrap(), idx);
        bytes[30] ^= 1;
        assert!(matches!(decode_index(Path::new("i"), &bytes), Err(StoreError::Corruption { .. })));
        assert!(decode_index(Path::new("i"), b"TNIX").is_err());
    }

    #[test]
    fn stems() {
        assert_eq!(file_stem("a/b c.txt"), "a_b_c.txt");
    }
}
