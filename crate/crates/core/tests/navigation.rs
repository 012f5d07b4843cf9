use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use treenav::corpus::{Chunk, Document};
use treenav::eval::recall_at_1;
use treenav::index::ChunkIndex;
use treenav::llm::mock::MockBackend;
use treenav::llm::parse::{navigation_to_raw, Category, NavDecision};
use treenav::llm::{Gateway, TemplateId};
use treenav::nav::{KnowledgeBase, Mode, NavConfig, Navigator, Part, Query, TraceEvent};
use treenav::synthetic::{memory_scenario, planted_corpus};
use treenav::tokenizer::{Tokenizer, WordPieceTokenizer};
use treenav::tree::{KnowledgeTree, NodeId, Passage};

fn numbered_lines(block: &str) -> Vec<(usize, String)> {
    block
        .lines()
        .filter_map(|l| {
            let l = l.trim();
            let (i, rest) = l.strip_prefix('[').and_then(|r| r.split_once(']')).or_else(|| l.split_once(". "))?;
            Some((i.trim().parse().ok()?, rest.trim().to_string()))
        })
        .collect()
}

fn all_explore() -> Gateway {
    Gateway::new(Arc::new(
        MockBackend::from_fn(|req, _| match req.template {
            TemplateId::Navigate | TemplateId::NavigateMemory => {
                let d: Vec<NavDecision> = numbered_lines(req.get("entries"))
                    .into_iter()
                    .map(|(index, rest)| NavDecision {
                        index,
                        title: rest.split_once(": ").map_or(rest.clone(), |(t, _)| t.to_string()),
                        category: Category::Explore,
                    })
                    .collect();
                Some(navigation_to_raw(&d))
            }
            TemplateId::LeafSelect => Some(numbered_lines(req.get("texts")).iter().map(|(i, _)| format!("{i}//")).collect()),
            _ => None,
        })
        .lenient(),
    ))
}

/// A random tree with one chunk per leaf and the given summary sizes.
fn random_kb(rng: &mut ChaCha8Rng, gw: &Gateway, max_summary_words: usize) -> KnowledgeBase {
    let n_leaves = rng.gen_range(1..14);
    let words = |rng: &mut ChaCha8Rng, n: usize| -> String {
        (0..n).map(|_| ["harbor", "cargo", "tide", "quay"][rng.gen_range(0..4)]).collect::<Vec<_>>().join(" ")
    };
    let mut chunks = Vec::new();
    let mut text = String::new();
    for i in 0..n_leaves {
        let len = rng.gen_range(1..60);
        let t = format!("{} ", words(rng, len));
        chunks.push(Chunk {
            chunk_id: i,
            doc_id: "rand".into(),
            token_count: WordPieceTokenizer.count(&t),
            char_span: (text.len(), text.len() + t.len()),
            text: t.clone(),
        });
        text.push_str(&t);
    }
    let mut tree = KnowledgeTree::new("rand", "Random", n_leaves);
    let mut parents = vec![tree.root];
    for (i, c) in chunks.iter().enumerate() {
        if rng.gen_bool(0.3) {
            let p = parents[rng.gen_range(0..parents.len())];
            let g = tree.add_intermediate(p, format!("Group {i}")).unwrap();
            parents.push(g);
        }
        let p = parents[rng.gen_range(0..parents.len())];
        tree.add_leaf(p, format!("Leaf {i}"), vec![Passage::new(c.text.trim(), [i])]).unwrap();
    }
    loop {
        let empty: Vec<NodeId> =
            tree.preorder().into_iter().filter(|id| *id != tree.root && !tree.node(*id).unwrap().is_leaf() && tree.children(*id).is_empty()).collect();
        if empty.is_empty() {
            break;
        }
        for id in empty {
            tree.add_leaf(id, format!("Pad {id}"), vec![Passage::new("cargo", [0])]).unwrap();
        }
    }
    for id in tree.preorder() {
        let n = rng.gen_range(1..=max_summary_words);
        tree.set_summary(id, words(rng, n)).unwrap();
    }
    tree.refresh_paths(tree.root);
    assert_eq!(tree.validate(None), vec![]);
    let index = ChunkIndex::build(&chunks, |t| gw.embed(t).map(|(v, _)| v).map_err(|e| e.to_string())).unwrap();
    KnowledgeBase {
        document: Document::new("rand", text),
        chunks,
        tree,
        index,
    }
}

fn planted_kbs(n: usize) -> (treenav::synthetic::PlantedCorpus, BTreeMap<String, KnowledgeBase>, Gateway) {
    let corpus = planted_corpus(n);
    let gw = corpus.world.gateway();
    let kbs = corpus
        .docs
        .iter()
        .map(|d| {
            let (kb, _) = KnowledgeBase::build(&gw, d.document.clone(), &corpus.chunking, &corpus.build).unwrap();
            (d.document.doc_id.clone(), kb)
        })
        .collect();
    (corpus, kbs, gw)
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (corpus, kbs, _) = planted_kbs(2);
    for d in &corpus.docs {
        let kb = &kbs[&d.document.doc_id];
        for memory in [false, true] {
            let q = Query::new(&d.record.query_id, &d.record.question).with_memory(memory);
            let runs: Vec<(String, String)> = (0..3)
                .map(|_| {
                    let gw = corpus.world.gateway();
                    let out = Navigator::new(&gw, kb, NavConfig::default()).run(&q).unwrap();
                    (serde_json::to_string(&out.context).unwrap(), out.trace.to_jsonl())
                })
                .collect();
            assert_eq!(runs[0], runs[1]);
            assert_eq!(runs[1], runs[2]);
        }
    }
}

#[test]
fn all_explore_terminates_without_revisits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gw = all_explore();
    for _ in 0..50 {
        let kb = random_kb(&mut rng, &gw, 8);
        let out = Navigator::new(&gw, &kb, NavConfig::default()).run(&Query::new("q", "harbor cargo")).unwrap();
        assert!(out.navigate_calls <= kb.tree.len(), "{} calls over {} nodes", out.navigate_calls, kb.tree.len());
        let mut offered = std::collections::BTreeSet::new();
        for e in &out.trace.events {
            if let TraceEvent::Offered { entries, .. } = e {
                for n in entries {
                    assert!(offered.insert(*n), "node {n} offered twice");
                }
            }
        }
        let extracted: Vec<NodeId> =
            out.trace.events.iter().filter_map(|e| if let TraceEvent::Extracted { node_id, .. } = e { Some(*node_id) } else { None }).collect();
        let unique: std::collections::BTreeSet<NodeId> = extracted.iter().copied().collect();
        assert_eq!(unique.len(), extracted.len());
    }
}

#[test]
fn budget_holds_under_oversized_summaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let choices = Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(6)));
    let c = choices.clone();
    let gw = Gateway::new(Arc::new(
        MockBackend::from_fn(move |req, _| match req.template {
            TemplateId::Navigate => {
                let mut r = c.lock().unwrap();
                let d: Vec<NavDecision> = numbered_lines(req.get("entries"))
                    .into_iter()
                    .filter_map(|(index, _)| {
                        r.gen_bool(0.8).then(|| NavDecision {
                            index,
                            title: "t".into(),
                            category: if r.gen_bool(0.6) { Category::Info } else { Category::Explore },
                        })
                    })
                    .collect();
                Some(navigation_to_raw(&d))
            }
            TemplateId::LeafSelect => Some(numbered_lines(req.get("texts")).iter().map(|(i, _)| format!("{i}//")).collect()),
            _ => None,
        })
        .lenient(),
    ));
    let tok = WordPieceTokenizer;
    let mut hit_limit = 0;
    for trial in 0..1000 {
        let kb = random_kb(&mut rng, &gw, 3000);
        let budget = [8192, 8192, 2000, 300][trial % 4];
        let cfg = NavConfig {
            max_context_tokens: budget,
            ..NavConfig::default()
        };
        let out = Navigator::new(&gw, &kb, cfg).run(&Query::new("q", "harbor cargo tide")).unwrap();
        let ctx = &out.context;
        let counted: usize = ctx.c_vec.iter().map(|v| tok.count(&v.text)).sum::<usize>()
            + ctx.c_raw.iter().map(|r| tok.count(&r.text)).sum::<usize>()
            + ctx.c_sum.iter().map(|s| tok.count(&s.summary)).sum::<usize>();
        assert_eq!(counted, ctx.token_total);
        assert!(ctx.token_total <= budget, "trial {trial}: {} > {budget}", ctx.token_total);
        let rank = |p: Part| match p {
            Part::Vec => 0,
            Part::Raw => 1,
            Part::Sum => 2,
        };
        if out.trace.events.iter().any(|e| matches!(e, TraceEvent::BudgetExhausted { .. })) {
            hit_limit += 1;
        }
        if let Some(first) = ctx.dropped.first() {
            let kept_after = match first.part {
                Part::Vec => ctx.c_raw.len() + ctx.c_sum.len(),
                Part::Raw => ctx.c_sum.len(),
                Part::Sum => 0,
            };
            assert_eq!(kept_after, 0, "an item of lower priority survived a drop");
            assert!(ctx.dropped.windows(2).all(|w| rank(w[0].part) <= rank(w[1].part)));
        }
    }
    assert!(hit_limit > 100, "only {hit_limit} trials reached the budget");
}

#[test]
fn memory_does_not_leak_between_queries() {
    let (corpus, kbs, _) = planted_kbs(2);
    let gw = corpus.world.gateway();
    let d = &corpus.docs[0];
    let kb = &kbs[&d.document.doc_id];
    let nav = Navigator::new(&gw, kb, NavConfig::default());
    let q = Query::new("a", &d.record.question).with_memory(true);
    let first = nav.run(&q).unwrap();
    let other = Query::new("b", "What drills do the crews practise?").with_memory(true);
    nav.run(&other).unwrap();
    let again = nav.run(&q).unwrap();
    assert_eq!(first.context, again.context);
    assert_eq!(first.memory, again.memory);
    assert_eq!(first.trace.to_jsonl(), again.trace.to_jsonl());
    let fresh_gw = corpus.world.gateway();
    let fresh = Navigator::new(&fresh_gw, kb, NavConfig::default()).run(&q).unwrap();
    assert_eq!(fresh.memory, first.memory);
}

#[test]
fn memory_avoids_the_redundant_recap() {
    let probe = treenav::synthetic::memory_world().gateway();
    let s = memory_scenario(&probe).unwrap();
    let gw = s.world.gateway();
    let nav = Navigator::new(&gw, &s.kb, NavConfig::default());
    let mut visited = Vec::new();
    for memory in [false, true] {
        let mut trace = treenav::nav::NavigationTrace::default();
        let m = memory.then(treenav::nav::Memory::default);
        let n = nav.navigate(&gw, &s.question, &s.candidates, 8192, m, &mut trace).unwrap();
        visited.push(n.state.visited);
    }
    assert!(visited[0].contains(&s.recap));
    assert!(!visited[1].contains(&s.recap));
    assert!(visited[1].len() < visited[0].len());
}

#[test]
fn planted_evidence_is_found_only_by_navigation() {
    let (corpus, kbs, _) = planted_kbs(6);
    let mut hits: BTreeMap<&str, usize> = BTreeMap::new();
    for d in &corpus.docs {
        let kb = &kbs[&d.document.doc_id];
        for mode in Mode::ALL {
            let gw = corpus.world.gateway();
            let out = Navigator::new(&gw, kb, NavConfig::default())
                .run(&Query::new(&d.record.query_id, &d.record.question).with_mode(mode))
                .unwrap();
            if mode == Mode::NoNavigation {
                assert_eq!(out.navigate_calls, 0);
                assert_eq!(gw.log().count_template(TemplateId::Navigate), 0);
            }
            if mode != Mode::Full {
                assert!(out.decisions.is_empty());
            }
            *hits.entry(mode.as_str()).or_default() += usize::from(recall_at_1(&out.context, &d.record));
        }
    }
    assert_eq!(hits[Mode::Full.as_str()], corpus.docs.len());
    assert_eq!(hits[Mode::NoTree.as_str()], 0);
    assert!(hits[Mode::Full.as_str()] >= hits[Mode::NoNavigation.as_str()]);
}

#[test]
fn query_usage_matches_the_call_log() {
    let (corpus, kbs, gw) = planted_kbs(1);
    let d = &corpus.docs[0];
    let before = (gw.log().len(), gw.log().usage());
    let out = Navigator::new(&gw, &kbs[&d.document.doc_id], NavConfig::default())
        .run(&Query::new("q", &d.record.question).with_memory(true))
        .unwrap();
    let records = gw.log().records();
    let mut delta = treenav::llm::Usage::default();
    for r in &records[before.0..] {
        delta += r.usage;
    }
    assert_eq!(out.llm_calls, records.len() - before.0);
    assert_eq!(out.usage, delta);
    assert_eq!(gw.log().usage(), {
        let mut u = before.1;
        u += out.usage;
        u
    });
}

#[test]
fn empty_query_is_rejected() {
    let (corpus, kbs, gw) = planted_kbs(1);
    let kb = &kbs[&corpus.docs[0].document.doc_id];
    assert!(Navigator::new(&gw, kb, NavConfig::default()).run(&Query::new("q", "  ")).is_err());
}

proptest::proptest! {
    #[test]
    fn assembly_keeps_a_priority_prefix(
        sizes in proptest::collection::vec((0u8..3, 1usize..400), 0..30),
        budget in 1usize..3000,
    ) {
        use treenav::nav::{assemble_context, RawItem, SumItem, VecItem};
        let text = |n: usize| vec!["tide"; n].join(" ");
        let (mut v, mut r, mut s) = (Vec::new(), Vec::new(), Vec::new());
        for (i, (part, n)) in sizes.iter().enumerate() {
            match part {
                0 => v.push(VecItem { chunk_id: i, text: text(*n), score: 0.0 }),
                1 => r.push(RawItem { node_id: NodeId(i as u32), path: String::new(), text: text(*n), cited_chunk_ids: [i].into() }),
                _ => s.push(SumItem { node_id: NodeId(i as u32), path: String::new(), summary: text(*n) }),
            }
        }
        let tok = WordPieceTokenizer;
        let order: Vec<usize> = v.iter().map(|x| tok.count(&x.text)).chain(r.iter().map(|x| tok.count(&x.text))).chain(s.iter().map(|x| tok.count(&x.summary))).collect();
        let ctx = assemble_context(v, s, r, budget, &tok);
        proptest::prop_assert!(ctx.token_total <= budget);
        let mut acc = 0;
        let mut keep = 0;
        for t in &order {
            if acc + t > budget {
                break;
            }
            acc += t;
            keep += 1;
        }
        proptest::prop_assert_eq!(ctx.c_vec.len() + ctx.c_raw.len() + ctx.c_sum.len(), keep);
        proptest::prop_assert_eq!(ctx.token_total, acc);
        proptest::prop_assert_eq!(ctx.dropped.len(), order.len() - keep);
    }
}
