//! QA scoring: token F1, retrieval recall and per-run reports.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::Gateway;
use crate::nav::{ContextSet, KnowledgeBase, Mode, NavConfig, NavigationTrace, Navigator, Query};

pub const RECALL_DEFINITION: &str = "recall@1: a gold evidence string (or, without evidence annotations, a gold answer) \
appears in the normalized assembled context on token boundaries";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("record {0}: gold_answers is empty")]
    NoGold(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARecord {
    pub query_id: String,
    pub doc_id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_evidence: Option<Vec<String>>,
}

impl QARecord {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.gold_answers.is_empty() {
            return Err(EvalError::NoGold(self.query_id.clone()));
        }
        Ok(())
    }
}

/// One record per non-blank line.
pub fn parse_qa_jsonl(text: &str) -> Result<Vec<QARecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QARecord = serde_json::from_str(line).map_err(|source| EvalError::Json { line: i + 1, source })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Lowercase, strip punctuation, drop articles, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn f1_pair(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Best token F1 of `prediction` against any gold answer.
pub fn token_f1(prediction: &str, gold_answers: &[String]) -> f64 {
    let pred = normalize_answer(prediction);
    let pred: Vec<&str> = pred.split_whitespace().collect();
    gold_answers
        .iter()
        .map(|g| {
            let g = normalize_answer(g);
            let g: Vec<&str> = g.split_whitespace().collect();
            f1_pair(&pred, &g)
        })
        .fold(0.0, f64::max)
}

/// Whether the assembled context covers the record's gold evidence, or
/// its gold answers when no evidence is annotated.
pub fn recall_at_1(context: &ContextSet, record: &QARecord) -> bool {
    let hay = format!(" {} ", normalize_answer(&context.text()));
    let needles: &[String] = match &record.gold_evidence {
        Some(e) if !e.is_empty() => e,
        _ => &record.gold_answers,
    };
    needles.iter().any(|n| {
        let n = normalize_answer(n);
        !n.is_empty() && hay.contains(&format!(" {n} "))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub query_id: String,
    pub doc_id: String,
    pub answer: String,
    pub f1: f64,
    pub recall_hit: bool,
    pub context_tokens: usize,
    pub llm_calls: usize,
    pub navigate_calls: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregates {
    pub queries: usize,
    pub failed: usize,
    pub mean_f1: f64,
    pub recall_at_1: f64,
    pub mean_context_tokens: f64,
    pub mean_llm_calls: f64,
    pub mean_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_definition: String,
    pub mode: Mode,
    pub memory: bool,
    pub rows: Vec<EvalRow>,
    pub aggregates: EvalAggregates,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl EvalReport {
    pub fn from_rows(mode: Mode, memory: bool, rows: Vec<EvalRow>) -> Self {
        let aggregates = Self::aggregate(&rows);
        Self {
            recall_definition: RECALL_DEFINITION.to_string(),
            mode,
            memory,
            rows,
            aggregates,
        }
    }

    /// Aggregates over every row; failed rows count with zero scores.
    pub fn aggregate(rows: &[EvalRow]) -> EvalAggregates {
        EvalAggregates {
            queries: rows.len(),
            failed: rows.iter().filter(|r| r.error.is_some()).count(),
            mean_f1: mean(rows.iter().map(|r| r.f1)),
            recall_at_1: mean(rows.iter().map(|r| if r.recall_hit { 1.0 } else { 0.0 })),
            mean_context_tokens: mean(rows.iter().map(|r| r.context_tokens as f64)),
            mean_llm_calls: mean(rows.iter().map(|r| r.llm_calls as f64)),
            mean_latency_ms: mean(rows.iter().map(|r| r.latency_ms)),
        }
    }

    /// Largest absolute gap between stored and recomputed aggregates.
    pub fn integrity_gap(&self) -> f64 {
        let a = &self.aggregates;
        let b = Self::aggregate(&self.rows);
        if a.queries != b.queries || a.failed != b.failed {
            return f64::INFINITY;
        }
        [
            (a.mean_f1, b.mean_f1),
            (a.recall_at_1, b.recall_at_1),
            (a.mean_context_tokens, b.mean_context_tokens),
            (a.mean_llm_calls, b.mean_llm_calls),
            (a.mean_latency_ms, b.mean_latency_ms),
        ]
        .iter()
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
    }

    /// The report with wall-clock fields zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        let rows: Vec<EvalRow> = self.rows.iter().cloned().map(|r| EvalRow { latency_ms: 0.0, ..r }).collect();
        Self::from_rows(self.mode, self.memory, rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: Mode,
    pub memory: bool,
    pub nav: NavConfig,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            memory: false,
            nav: NavConfig::default(),
            workers: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: EvalReport,
    pub traces: Vec<NavigationTrace>,
}

fn eval_one(gateway: &Gateway, kbs: &BTreeMap<String, KnowledgeBase>, rec: &QARecord, opts: &EvalOptions) -> (EvalRow, NavigationTrace) {
    let started = Instant::now();
    let mut row = EvalRow {
        query_id: rec.query_id.clone(),
        doc_id: rec.doc_id.clone(),
        answer: String::new(),
        f1: 0.0,
        recall_hit: false,
        context_tokens: 0,
        llm_calls: 0,
        navigate_calls: 0,
        prompt_tokens: 0,
        completion_tokens: 0,
        latency_ms: 0.0,
        error: None,
    };
    let mut trace = NavigationTrace {
        query_id: rec.query_id.clone(),
        events: Vec::new(),
    };
    match kbs.get(&rec.doc_id) {
        None => row.error = Some(format!("no knowledge base for document {}", rec.doc_id)),
        Some(kb) => {
            let query = Query::new(rec.query_id.clone(), rec.question.clone())
                .with_mode(opts.mode)
                .with_memory(opts.memory);
            match Navigator::new(gateway, kb, opts.nav.clone()).run(&query) {
                Ok(out) => {
                    row.f1 = token_f1(&out.answer, &rec.gold_answers);
                    row.recall_hit = recall_at_1(&out.context, rec);
                    row.context_tokens = out.context.token_total;
                    row.llm_calls = out.llm_calls;
                    row.navigate_calls = out.navigate_calls;
                    row.prompt_tokens = out.usage.prompt_tokens;
                    row.completion_tokens = out.usage.completion_tokens;
                    row.answer = out.answer;
                    trace = out.trace;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
        }
    }
    if let Some(e) = &row.error {
        tracing::warn!(query = %rec.query_id, error = %e, "query failed");
    }
    row.latency_ms = started.elapsed().as_secs_f64() * 1000.0;
    (row, trace)
}

/// Answer and score every record on a bounded worker pool. Failures are
/// recorded per row and the run continues.
pub fn run_eval(gateway: &Gateway, kbs: &BTreeMap<String, KnowledgeBase>, qa: &[QARecord], opts: &EvalOptions) -> Result<EvalRun, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let results: Vec<(EvalRow, NavigationTrace)> = pool.install(|| qa.par_iter().map(|rec| eval_one(gateway, kbs, rec, opts)).collect());
    let (rows, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(EvalRun {
        report: EvalReport::from_rows(opts.mode, opts.memory, rows),
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nav::{RawItem, VecItem};
    use crate::tree::NodeId;

    fn g(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("the cat", &g(&["the cat"])), 1.0);
        assert!((token_f1("x b", &g(&["b c"])) - 0.5).abs() < 1e-12);
        // "a" is an article and normalizes away, leaving P=1, R=1/2
        assert!((token_f1("a b", &g(&["b c"])) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("", &g(&["x"])), 0.0);
        assert_eq!(token_f1("The Cat.", &g(&["dog", "cat"])), 1.0);
        assert_eq!(token_f1("the", &g(&["a"])), 0.0);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("  The  Cat, sat!  "), "cat sat");
        assert_eq!(normalize_answer("An apple a day"), "apple day");
    }

    fn ctx(raw: &str) -> ContextSet {
        ContextSet {
            c_vec: vec![VecItem { chunk_id: 0, text: "unrelated words".into(), score: 0.1 }],
            c_raw: vec![RawItem { node_id: NodeId(1), path: "R".into(), text: raw.into(), cited_chunk_ids: Default::default() }],
            ..ContextSet::default()
        }
    }

    #[test]
    fn recall_examples() {
        let rec = QARecord { query_id: "q".into(), doc_id: "d".into(), question: "?".into(), gold_answers: g(&["the cat"]), gold_evidence: None };
        assert!(recall_at_1(&ctx("I saw The Cat. yesterday"), &rec));
        assert!(!recall_at_1(&ctx("a dog barked"), &rec));
        assert!(!recall_at_1(&ctx("concatenate"), &rec));
        let with_ev = QARecord { gold_evidence: Some(g(&["cat sat on the mat"])), ..rec };
        assert!(!recall_at_1(&ctx("the cat"), &with_ev));
        assert!(recall_at_1(&ctx("x The cat sat on the mat."), &with_ev));
    }

    #[test]
    fn qa_jsonl() {
        let text = "{\"query_id\":\"q1\",\"doc_id\":\"d\",\"question\":\"?\",\"gold_answers\":[\"x\"]}\n\n";
        assert_eq!(parse_qa_jsonl(text).unwrap().len(), 1);
        let bad = "{\"query_id\":\"q1\",\"doc_id\":\"d\",\"question\":\"?\",\"gold_answers\":[]}";
        assert!(matches!(parse_qa_jsonl(bad), Err(EvalError::NoGold(_))));
        assert!(matches!(parse_qa_jsonl("{"), Err(EvalError::Json { line: 1, .. })));
    }

    #[test]
    fn aggregates_recompute() {
        let row = |f1: f64, hit: bool| EvalRow {
            query_id: "q".into(),
            doc_id: "d".into(),
            answer: String::new(),
            f1,
            recall_hit: hit,
            context_tokens: 10,
            llm_calls: 3,
            navigate_calls: 1,
            prompt_tokens: 0,
            completion_tokens: 0,
            latency_ms: 2.0,
            error: None,
        };
        let r = EvalReport::from_rows(Mode::Full, false, vec![row(1.0, true), row(0.5, false)]);
        assert_eq!(r.aggregates.mean_f1, 0.75);
        assert_eq!(r.aggregates.recall_at_1, 0.5);
        assert_eq!(r.integrity_gap(), 0.0);
        assert_eq!(EvalReport::aggregate(&[]).mean_f1, 0.0);
    }
}
