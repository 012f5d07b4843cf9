use treenav::corpus::chunk_document;
use treenav::llm::mock::MockBackend;
use treenav::llm::Gateway;
use treenav::nav::{KnowledgeBase, NavConfig, Navigator, Query};
use treenav::store::{self, CorpusDir, Sidecar, StoreError};
use treenav::synthetic::{planted_corpus, three_topic_corpus};
use treenav::tree::{build_tree, build_tree_batched, BuildConfig, KnowledgeTree, Organizer, Passage};

fn lenient() -> Gateway {
    Gateway::new(std::sync::Arc::new(MockBackend::from_fn(|_, _| None).lenient()))
}

fn sample_trees() -> Vec<KnowledgeTree> {
    let c = three_topic_corpus();
    let gw = c.world.gateway();
    let chunks = chunk_document(&c.document, &c.chunking, gw.tokenizer()).unwrap();
    let mut trees = vec![
        build_tree(&gw, &c.document, &chunks, &BuildConfig::default()).unwrap().tree,
        build_tree_batched(&gw, &c.document, &chunks, &BuildConfig { batch_size: 3, ..BuildConfig::default() }).unwrap().tree,
    ];
    let cfg = BuildConfig { max_content_tokens: 12, max_children: 3, ..BuildConfig::default() };
    let mut t = KnowledgeTree::new("constructed", "Constructed", 6);
    let leaf = t.add_leaf(t.root, "Long", (0..4).map(|i| Passage::new(format!("tide quay berth hull {i}"), [i])).collect()).unwrap();
    let group = t.add_intermediate(t.root, "Wide").unwrap();
    for i in 0..6 {
        t.add_leaf(group, format!("Item {i}"), vec![Passage::new(format!("entry {i}"), [i])]).unwrap();
    }
    let gw = lenient();
    let mut org = Organizer::new(&gw, cfg).unwrap();
    assert!(org.split_node(&mut t, leaf).unwrap());
    assert!(org.soft_group(&mut t, group).unwrap());
    org.refuse_and_summarize(&mut t);
    trees.push(t);
    trees
}

#[test]
fn trees_round_trip_and_resave_identically() {
    let dir = tempfile::tempdir().unwrap();
    for (i, tree) in sample_trees().iter().enumerate() {
        let path = dir.path().join(format!("tree.{i}.json"));
        let sidecar = Sidecar { backend: Some("synthetic".into()), ..Sidecar::default() };
        store::save_tree(&path, tree, Some(&sidecar)).unwrap();
        let (loaded, side) = store::load_tree_with_sidecar(&path).unwrap();
        assert_eq!(&loaded, tree);
        assert_eq!(side, Some(sidecar.clone()));
        let again = dir.path().join(format!("tree.{i}.again.json"));
        store::save_tree(&again, &loaded, Some(&sidecar)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        assert_eq!(store::canonical_tree_bytes(&loaded), store::canonical_tree_bytes(tree));
    }
}

#[test]
fn tampered_tree_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let tree = &sample_trees()[0];
    let path = dir.path().join("tree.json");
    store::save_tree(&path, tree, None).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let changed = text.replacen("Harbor Trade", "Harbour Trade", 1);
    assert_ne!(changed, text);
    std::fs::write(&path, changed).unwrap();
    assert!(matches!(store::load_tree(&path), Err(StoreError::Corruption { .. })));
}

#[test]
fn corpus_dir_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = planted_corpus(3);
    let gw = corpus.world.gateway();
    let built: Vec<(KnowledgeBase, Sidecar)> = corpus
        .docs
        .iter()
        .map(|d| {
            let (kb, out) = KnowledgeBase::build(&gw, d.document.clone(), &corpus.chunking, &corpus.build).unwrap();
            (kb, Sidecar { report: Some(out.report), timing: Some(out.timing), backend: Some(gw.backend_id().into()) })
        })
        .collect();
    let store = CorpusDir::new(dir.path());
    let refs: Vec<(&KnowledgeBase, Option<Sidecar>)> = built.iter().map(|(kb, s)| (kb, Some(s.clone()))).collect();
    store.save(&refs).unwrap();
    let loaded = store.load_all().unwrap();
    assert_eq!(loaded.len(), built.len());
    for (kb, _) in &built {
        let l = &loaded[&kb.document.doc_id];
        assert_eq!(l.document, kb.document);
        assert_eq!(l.chunks, kb.chunks);
        assert_eq!(l.tree, kb.tree);
        assert_eq!(l.index, kb.index);
        let q = Query::new("q", &corpus.docs[0].record.question);
        let a = Navigator::new(&corpus.world.gateway(), kb, NavConfig::default()).run(&q).unwrap();
        let b = Navigator::new(&corpus.world.gateway(), l, NavConfig::default()).run(&q).unwrap();
        assert_eq!(a.context, b.context);
    }
    let first = &built[0].0.document.doc_id;
    std::fs::remove_file(store.index_path(first)).unwrap();
    assert!(store.load_all().is_err());
}
