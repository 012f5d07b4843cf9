use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use treenav::config::{BackendKind, Config};
use treenav::corpus::Document;
use treenav::eval::{parse_qa_jsonl, run_eval, EvalOptions};
use treenav::llm::mock::{MockBackend, MockScript};
use treenav::llm::openai::OpenAiBackend;
use treenav::llm::Gateway;
use treenav::nav::{part_tokens, KnowledgeBase, Mode, Navigator, Query};
use treenav::store::{self, CorpusDir, Sidecar};
use treenav::synthetic;
use treenav::tree::BuildTiming;

#[derive(Parser, Debug)]
#[command(name = "treenav", version, about = "Build knowledge trees over long documents and answer questions by navigating them")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Backend override: mock, openai or synthetic.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Mock script (JSON lines) for the mock backend.
    #[arg(long, global = true)]
    script: Option<PathBuf>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Chunk, embed and organize documents into a corpus directory.
    Build {
        /// A .jsonl of documents, a text file, or a directory of .txt files.
        corpus: PathBuf,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, default_value = "treenav-out")]
        out: PathBuf,
    },
    /// Answer one question against a built tree.
    Query {
        /// A tree.<doc>.json file or a corpus directory holding one document.
        tree: PathBuf,
        question: String,
        #[arg(long)]
        memory: bool,
        #[arg(long, default_value = "full")]
        mode: Mode,
        /// Write the navigation trace under traces/.
        #[arg(long)]
        trace: bool,
        /// Print the full outcome as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Score a QA set (JSON lines) against a corpus directory.
    Eval {
        qa: PathBuf,
        #[arg(long, default_value = "full")]
        mode: Mode,
        #[arg(long)]
        memory: bool,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "treenav-out")]
        store: PathBuf,
    },
    /// Print a tree or one of its subtrees.
    Inspect {
        tree: PathBuf,
        /// Slash-separated titles below the root, e.g. "Topic/Subtopic".
        #[arg(long)]
        path: Option<String>,
        #[arg(long)]
        summaries: bool,
    },
    /// Write a generated corpus, its QA set and a matching config.
    Generate {
        out: PathBuf,
        /// planted or three-topic.
        #[arg(long, default_value = "planted")]
        kind: String,
        #[arg(long, default_value_t = 40)]
        docs: usize,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(b) = &cli.backend {
        cfg.backend.kind = match b.as_str() {
            "mock" => BackendKind::Mock,
            "openai" => BackendKind::Openai,
            "synthetic" => BackendKind::Synthetic,
            other => bail!("unknown backend `{other}` (expected mock, openai or synthetic)"),
        };
    }
    if let Some(s) = &cli.script {
        cfg.backend.script = Some(s.display().to_string());
    }
    Ok(cfg)
}

fn gateway(cfg: &Config) -> Result<Gateway> {
    Ok(match cfg.backend.kind {
        BackendKind::Mock => {
            let backend = match &cfg.backend.script {
                Some(p) => MockBackend::new(MockScript::load(Path::new(p)).with_context(|| format!("loading script {p}"))?),
                None => MockBackend::new(MockScript::new()),
            };
            Gateway::new(Arc::new(backend.lenient()))
        }
        BackendKind::Openai => Gateway::new(Arc::new(OpenAiBackend::new(cfg.backend.openai())?)),
        BackendKind::Synthetic => match cfg.backend.world.as_deref().unwrap_or("planted") {
            "planted" => synthetic::planted_world().gateway(),
            "three-topic" => synthetic::three_topic_corpus().world.gateway(),
            other => bail!("unknown synthetic world `{other}`"),
        },
    })
}

fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        return files.iter().map(|f| text_document(f)).collect();
    }
    if path.extension().is_some_and(|x| x == "jsonl") {
        return Ok(store::read_jsonl(path)?);
    }
    Ok(vec![text_document(path)?])
}

fn text_document(path: &Path) -> Result<Document> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "doc".into());
    Ok(Document::new(stem.clone(), text).with_meta("title", stem))
}

fn build(cfg: &Config, corpus: &Path, batch_size: Option<usize>, out: &Path) -> Result<()> {
    let docs = read_corpus(corpus)?;
    if docs.is_empty() {
        bail!("no documents in {}", corpus.display());
    }
    let gw = gateway(cfg)?;
    let mut build_cfg = cfg.build();
    if let Some(b) = batch_size {
        build_cfg.batch_size = b;
    }
    let dir = CorpusDir::new(out);
    let mut built = Vec::new();
    for doc in docs {
        let started = Instant::now();
        let (kb, output) = KnowledgeBase::build(&gw, doc, &cfg.chunking(), &build_cfg)?;
        let r = &output.report;
        println!(
            "{}: {} chunks, {} nodes, {} leaves, depth {}, {} llm calls, {} tokens, {} violations",
            kb.document.doc_id,
            r.chunks,
            r.nodes,
            r.leaves,
            r.depth,
            r.llm_calls,
            r.usage.total(),
            r.violations.len()
        );
        let sidecar = Sidecar {
            report: Some(output.report.clone()),
            timing: Some(BuildTiming {
                wall_time_ms: started.elapsed().as_millis() as u64,
            }),
            backend: Some(gw.backend_id().to_string()),
        };
        built.push((kb, Some(sidecar)));
    }
    let refs: Vec<(&KnowledgeBase, Option<Sidecar>)> = built.iter().map(|(k, s)| (k, s.clone())).collect();
    dir.save(&refs)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// The corpus directory and document a tree argument names.
fn locate(tree: &Path) -> Result<(CorpusDir, String)> {
    if tree.is_dir() {
        let dir = CorpusDir::new(tree);
        let docs = dir.read_documents()?;
        return match docs.as_slice() {
            [one] => Ok((dir, one.doc_id.clone())),
            _ => bail!("{} holds {} documents; pass a tree.<doc>.json file", tree.display(), docs.len()),
        };
    }
    let parent = tree.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let t = store::load_tree(tree)?;
    Ok((CorpusDir::new(parent), t.doc_id))
}

fn query(cfg: &Config, tree: &Path, question: &str, memory: bool, mode: Mode, trace: bool, json: bool) -> Result<()> {
    let (dir, doc_id) = locate(tree)?;
    let kb = dir.load(&doc_id)?;
    let gw = gateway(cfg)?;
    let q = Query::new("cli", question).with_memory(memory).with_mode(mode);
    let out = Navigator::new(&gw, &kb, cfg.nav()).run(&q)?;
    if trace {
        let path = dir.save_trace(&out.trace)?;
        eprintln!("trace written to {}", path.display());
    }
    if json {
        let v = serde_json::json!({
            "answer": out.answer,
            "context": out.context,
            "decisions": out.decisions,
            "memory": out.memory,
            "usage": out.usage,
            "llm_calls": out.llm_calls,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(());
    }
    println!("{}", out.answer);
    let parts = part_tokens(&out.context, gw.tokenizer());
    eprintln!(
        "context: {} tokens ({} retrieved, {} evidence, {} summaries); {} nodes visited; {} llm calls",
        out.context.token_total,
        parts["c_vec"],
        parts["c_raw"],
        parts["c_sum"],
        out.visited.len(),
        out.llm_calls
    );
    Ok(())
}

fn eval(cfg: &Config, qa: &Path, mode: Mode, memory: bool, report: Option<&Path>, store_dir: &Path) -> Result<()> {
    let text = std::fs::read_to_string(qa).with_context(|| format!("reading {}", qa.display()))?;
    let records = parse_qa_jsonl(&text)?;
    let dir = CorpusDir::new(store_dir);
    let kbs: BTreeMap<String, KnowledgeBase> = dir.load_all()?;
    let gw = gateway(cfg)?;
    let opts = EvalOptions {
        mode,
        memory,
        nav: cfg.nav(),
        workers: cfg.workers,
    };
    let run = run_eval(&gw, &kbs, &records, &opts)?;
    for t in &run.traces {
        dir.save_trace(t)?;
    }
    let path = match report {
        Some(p) => {
            store::write_json(p, &run.report)?;
            p.to_path_buf()
        }
        None => dir.save_report(&format!("eval-{}{}", mode, if memory { "-memory" } else { "" }), &run.report)?,
    };
    let a = &run.report.aggregates;
    println!(
        "{} queries ({} failed), mode {}{}: F1 {:.4}, Recall@1 {:.4}, {:.1} context tokens, {:.1} llm calls, {:.1} ms/query",
        a.queries,
        a.failed,
        mode,
        if memory { " +memory" } else { "" },
        a.mean_f1,
        a.recall_at_1,
        a.mean_context_tokens,
        a.mean_llm_calls,
        a.mean_latency_ms
    );
    println!("{}", run.report.recall_definition);
    println!("report written to {}", path.display());
    Ok(())
}

fn inspect(tree: &Path, path: Option<&str>, summaries: bool) -> Result<()> {
    let tree_file = if tree.is_dir() {
        let (dir, doc) = locate(tree)?;
        dir.tree_path(&doc)
    } else {
        tree.to_path_buf()
    };
    let t = store::load_tree(&tree_file)?;
    let id = match path {
        Some(p) => t.find_by_path(p).with_context(|| format!("no node at path {p}"))?,
        None => t.root,
    };
    print!("{}", t.render_outline(id, summaries));
    Ok(())
}

fn generate(out: &Path, kind: &str, docs: usize) -> Result<()> {
    let mut cfg = Config::default();
    cfg.backend.kind = BackendKind::Synthetic;
    let (documents, qa) = match kind {
        "planted" => {
            let c = synthetic::planted_corpus(docs);
            cfg.chunk_token_size = c.chunking.chunk_token_size;
            cfg.overlap_rate = c.chunking.overlap_rate;
            cfg.max_titles_num = c.build.max_children;
            cfg.backend.world = Some("planted".into());
            let qa: Vec<_> = c.docs.iter().map(|d| d.record.clone()).collect();
            (c.docs.into_iter().map(|d| d.document).collect::<Vec<_>>(), qa)
        }
        "three-topic" => {
            let c = synthetic::three_topic_corpus();
            cfg.chunk_token_size = c.chunking.chunk_token_size;
            cfg.overlap_rate = c.chunking.overlap_rate;
            cfg.backend.world = Some("three-topic".into());
            (vec![c.document], Vec::new())
        }
        other => bail!("unknown corpus kind `{other}` (expected planted or three-topic)"),
    };
    store::write_jsonl(&out.join("documents.jsonl"), &documents)?;
    if !qa.is_empty() {
        store::write_jsonl(&out.join("qa.jsonl"), &qa)?;
    }
    store::write_atomic(&out.join("treenav.toml"), cfg.to_toml().as_bytes())?;
    println!("wrote {} documents and {} questions to {}", documents.len(), qa.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Build { corpus, batch_size, out } => build(&cfg, corpus, *batch_size, out),
        Command::Query {
            tree,
            question,
            memory,
            mode,
            trace,
            json,
        } => query(&cfg, tree, question, *memory, *mode, *trace, *json),
        Command::Eval {
            qa,
            mode,
            memory,
            report,
            store,
        } => eval(&cfg, qa, *mode, *memory, report.as_deref(), store),
        Command::Inspect { tree, path, summaries } => inspect(tree, path.as_deref(), *summaries),
        Command::Generate { out, kind, docs } => generate(out, kind, *docs),
    }
}
