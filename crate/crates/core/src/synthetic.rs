//! A deterministic stand-in for an LLM over small generated corpora.
//!
//! A [`World`] knows a topic catalog (titles, keywords, parents) and a
//! synonym table. Its responder answers every prompt template by keyword
//! overlap, which is enough to drive tree construction and navigation end
//! to end on the mock backend. Selection during construction matches the
//! literal catalog keywords; navigation matches canonical (synonym-folded)
//! terms, so a question can reach a section that shares no surface words
//! with it.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::corpus::{chunk_document, ChunkConfig, Document};
use crate::eval::QARecord;
use crate::index::ChunkIndex;
use crate::llm::mock::MockBackend;
use crate::llm::{CompletionRequest, Gateway, TemplateId};
use crate::nav::{KnowledgeBase, NavError};
use crate::tokenizer::{Tokenizer, WordPieceTokenizer};
use crate::tree::{BuildConfig, KnowledgeTree, NodeId, Passage};

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "what", "did", "was", "were", "with", "that", "this", "from", "into", "each", "its", "are", "has",
    "had", "how", "many", "times", "which", "who", "when", "where", "why", "does", "his", "her", "their", "they", "them",
    "been", "before", "after", "about", "over", "all", "any", "per", "not", "but", "than", "then", "also", "our", "you",
    "your", "covers", "group", "part", "details", "none", "title", "subtopics", "may", "must", "will", "can", "every",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub title: String,
    pub keywords: Vec<String>,
    pub parent: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct World {
    pub entries: Vec<Entry>,
    pub synonyms: BTreeMap<String, String>,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        cur.push(c);
        if matches!(c, '.' | '?' | '!') && chars.get(i + 1).is_none_or(|n| n.is_whitespace()) {
            let s = one_line(&cur);
            if !s.is_empty() {
                out.push(s);
            }
            cur.clear();
        }
    }
    let s = one_line(&cur);
    if !s.is_empty() {
        out.push(s);
    }
    out
}

/// Lines of the form `<index><sep><rest>`, e.g. `0. Title` or `[3] text`.
fn indexed_lines(block: &str) -> Vec<(usize, String)> {
    block
        .lines()
        .filter_map(|l| {
            let l = l.trim();
            let (idx, rest) = if let Some(r) = l.strip_prefix('[') {
                r.split_once(']')?
            } else {
                l.split_once(". ")?
            };
            Some((idx.trim().parse().ok()?, rest.trim().to_string()))
        })
        .collect()
}

/// Strip suffixes added by title deduplication, splitting and grouping.
fn base_title(title: &str) -> &str {
    let mut t = title.trim();
    if let Some(r) = t.strip_prefix("Group ") {
        if let (Some(a), true) = (r.find(" ("), r.ends_with(')')) {
            t = &r[a + 2..r.len() - 1];
        }
    }
    while let (Some(a), true) = (t.rfind(" ("), t.ends_with(')')) {
        t = t[..a].trim_end();
    }
    t
}

impl World {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entry(mut self, title: &str, keywords: &[&str], parent: Option<&str>) -> Self {
        self.entries.push(Entry {
            title: title.to_string(),
            keywords: keywords.iter().map(|k| k.to_lowercase()).collect(),
            parent: parent.map(str::to_string),
        });
        self
    }

    pub fn synonym(mut self, word: &str, canonical: &str) -> Self {
        self.synonyms.insert(word.to_lowercase(), canonical.to_lowercase());
        self
    }

    fn significant(w: &str) -> bool {
        w.len() >= 3 && !STOPWORDS.contains(&w)
    }

    /// Significant literal words.
    pub fn raw_terms(&self, text: &str) -> BTreeSet<String> {
        words(text).filter(|w| Self::significant(w)).collect()
    }

    /// Significant words with synonyms folded to their canonical form.
    pub fn terms(&self, text: &str) -> BTreeSet<String> {
        words(text)
            .filter(|w| Self::significant(w))
            .map(|w| self.synonyms.get(&w).cloned().unwrap_or(w))
            .collect()
    }

    fn lookup(&self, title: &str) -> Option<&Entry> {
        let b = base_title(title);
        self.entries.iter().find(|e| e.title.eq_ignore_ascii_case(b))
    }

    fn is_descendant(&self, e: &Entry, ancestor: &str) -> bool {
        let mut cur = e.parent.as_deref();
        while let Some(p) = cur {
            if p.eq_ignore_ascii_case(ancestor) {
                return true;
            }
            cur = self.lookup(p).and_then(|x| x.parent.as_deref());
        }
        false
    }

    fn has_children(&self, title: &str) -> bool {
        self.entries.iter().any(|e| e.parent.as_deref() == Some(title))
    }

    /// Literal keywords of a title: its own plus those of its catalog
    /// descendants, or its words when it is not in the catalog.
    pub fn select_keywords(&self, title: &str) -> BTreeSet<String> {
        match self.lookup(title) {
            Some(e) => {
                let mut k: BTreeSet<String> = e.keywords.iter().cloned().collect();
                for d in self.entries.iter().filter(|d| self.is_descendant(d, &e.title)) {
                    k.extend(d.keywords.iter().cloned());
                }
                k
            }
            None => self.raw_terms(title),
        }
    }

    /// Canonical terms a navigator associates with a title.
    pub fn title_terms(&self, title: &str) -> BTreeSet<String> {
        let mut t = self.terms(base_title(title));
        for k in self.select_keywords(title) {
            t.extend(self.terms(&k));
        }
        t
    }

    pub fn backend(&self) -> MockBackend {
        let w = self.clone();
        MockBackend::from_fn(move |req, prompt| w.respond(req, prompt)).with_id("synthetic")
    }

    pub fn gateway(&self) -> Gateway {
        Gateway::new(Arc::new(self.backend()))
    }

    pub fn respond(&self, req: &CompletionRequest, _prompt: &str) -> Option<String> {
        let out = match req.template {
            TemplateId::Outline => self.outline(req.get("document"), req.get("max_titles").parse().unwrap_or(10)),
            TemplateId::SelectTitles => self.select(req.get("outlines"), req.get("text"), req.get("select_num").parse().unwrap_or(2)),
            TemplateId::CreateNode => self.create(req.get("outlines"), req.get("text"), req.get("parent_title")),
            TemplateId::MergeContent => format!("<<{}>>", one_line(req.get("supply_content"))),
            TemplateId::Refusion => indexed_lines(req.get("text"))
                .into_iter()
                .map(|(k, s)| format!("{s} <{k}>"))
                .collect::<Vec<_>>()
                .join("\n"),
            TemplateId::NodeSummary => self.summary(req.get("text")),
            TemplateId::GroupTitles => self.group(req.get("titles"), req.get("parent_title")),
            TemplateId::SplitNode => self.split(req.get("title"), req.get("paragraphs"), req.get("max_tokens").parse().unwrap_or(1536)),
            TemplateId::Navigate => self.navigate(req.get("entries"), req.get("question"), None),
            TemplateId::NavigateMemory => self.navigate(req.get("entries"), req.get("question"), Some(req.get("memory"))),
            TemplateId::LeafSelect => self.leaf_select(req.get("texts"), req.get("query")),
            TemplateId::MemoryUpdate => self.memory_update(req.get("memory"), req.get("context"), req.get("question")),
            TemplateId::Answer => self.answer(req),
        };
        Some(out)
    }

    fn outline(&self, document: &str, max_titles: usize) -> String {
        let doc = self.raw_terms(document);
        let lines: Vec<String> = self
            .entries
            .iter()
            .filter(|e| e.parent.is_none())
            .filter(|e| self.select_keywords(&e.title).iter().any(|k| doc.contains(k)))
            .take(max_titles)
            .map(|e| format!("{}//{}", e.title, e.keywords.join(", ")))
            .collect();
        lines.join("\n")
    }

    fn select(&self, outlines: &str, text: &str, select_num: usize) -> String {
        let w = self.raw_terms(text);
        let mut scored: Vec<(usize, usize, String)> = indexed_lines(outlines)
            .into_iter()
            .map(|(i, t)| (self.select_keywords(&t).intersection(&w).count(), i, t))
            .filter(|(s, _, _)| *s > 0)
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.truncate(select_num);
        if scored.is_empty() {
            return "None".into();
        }
        scored.sort_by_key(|s| s.1);
        scored
            .into_iter()
            .map(|(_, i, t)| format!("{i}//{t}//{}", one_line(text)))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn create(&self, outlines: &str, text: &str, parent_title: &str) -> String {
        let siblings: Vec<String> = indexed_lines(outlines).into_iter().map(|(_, t)| t).collect();
        let w = self.raw_terms(text);
        let parent = self.lookup(parent_title).map(|e| e.title.clone());
        let best = self
            .entries
            .iter()
            .filter(|e| !self.has_children(&e.title))
            .filter(|e| parent.as_deref().is_none_or(|p| self.is_descendant(e, p)))
            .filter(|e| !siblings.iter().any(|s| base_title(s).eq_ignore_ascii_case(&e.title)))
            .map(|e| (e.keywords.iter().filter(|k| w.contains(*k)).count(), e))
            .filter(|(s, _)| *s > 0)
            .fold(None::<(usize, &Entry)>, |acc, x| match acc {
                Some(a) if a.0 >= x.0 => Some(a),
                _ => Some(x),
            });
        let title = match best {
            Some((_, e)) => e.title.clone(),
            None => {
                let head: Vec<String> = self.raw_terms(text).into_iter().take(3).collect();
                format!("Notes on {}", head.join(" "))
            }
        };
        format!("-1//{title}//{}", one_line(text))
    }

    fn summary(&self, text: &str) -> String {
        if let Some(rest) = text.strip_prefix("Title: ") {
            let mut lines = rest.lines();
            let title = lines.next().unwrap_or_default().trim();
            let subs = lines
                .next()
                .and_then(|l| l.strip_prefix("Subtopics: "))
                .unwrap_or_default()
                .replace("; ", ", ");
            let mut out = format!("{title} covers {subs}.");
            for l in lines.filter_map(|l| l.strip_prefix("- ")) {
                let body = l.split_once(": ").map_or(l, |(_, s)| s);
                if let Some(first) = sentences(body).into_iter().next() {
                    out.push(' ');
                    out.push_str(&first);
                }
            }
            return out;
        }
        let ws: Vec<&str> = text.split_whitespace().take(60).collect();
        ws.join(" ")
    }

    fn group(&self, titles: &str, parent_title: &str) -> String {
        let parent = self.lookup(parent_title).map(|e| e.title.clone());
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, t) in indexed_lines(titles) {
            let key = self
                .lookup(&t)
                .and_then(|e| {
                    let p = parent.as_deref()?;
                    let mut cur = e;
                    loop {
                        if cur.parent.as_deref() == Some(p) {
                            return Some(cur.title.clone());
                        }
                        cur = self.lookup(cur.parent.as_deref()?)?;
                    }
                })
                .unwrap_or(t);
            match groups.iter_mut().find(|g| g.0 == key) {
                Some(g) => g.1.push(i),
                None => groups.push((key, vec![i])),
            }
        }
        groups
            .into_iter()
            .map(|(k, m)| format!("{k}//{}", m.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn split(&self, title: &str, paragraphs: &str, max_tokens: usize) -> String {
        let tok = WordPieceTokenizer;
        let paras = indexed_lines(paragraphs);
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut used = 0;
        for (i, p) in &paras {
            let t = tok.count(p);
            match groups.last_mut() {
                Some(g) if used + t <= max_tokens => {
                    g.push(*i);
                    used += t;
                }
                _ => {
                    groups.push(vec![*i]);
                    used = t;
                }
            }
        }
        if groups.len() == 1 && groups[0].len() > 1 {
            let g = groups.pop().unwrap_or_default();
            let (a, b) = g.split_at(g.len() / 2);
            groups = vec![a.to_vec(), b.to_vec()];
        }
        groups
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let idx: Vec<String> = g.iter().map(|i| i.to_string()).collect();
                format!("{} Details {}//{}", base_title(title), k + 1, idx.join(","))
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn memory_terms(&self, memory: Option<&str>) -> BTreeSet<String> {
        match memory.map(str::trim) {
            Some(m) if !m.is_empty() && m != "(none)" => self.terms(m),
            _ => BTreeSet::new(),
        }
    }

    fn navigate(&self, entries: &str, question: &str, memory: Option<&str>) -> String {
        let q = self.terms(question);
        let mem = self.memory_terms(memory);
        let mut out = Vec::new();
        for (i, rest) in indexed_lines(entries) {
            let (title, summary) = rest.split_once(": ").unwrap_or((rest.as_str(), ""));
            let st = self.terms(summary);
            if !mem.is_empty() && !st.is_empty() && st.is_subset(&mem) {
                continue;
            }
            if !self.title_terms(title).is_disjoint(&q) {
                out.push(format!("{i}//{title}//EXPLORE"));
            } else if st.intersection(&q).count() >= 2 {
                out.push(format!("{i}//{title}//INFO"));
            }
        }
        if out.is_empty() {
            "None".into()
        } else {
            out.join("\n")
        }
    }

    fn leaf_select(&self, texts: &str, query: &str) -> String {
        let q = self.terms(query);
        let picked: String = indexed_lines(texts)
            .into_iter()
            .filter(|(_, t)| self.terms(t).intersection(&q).count() >= 2)
            .map(|(i, _)| format!("{i}//"))
            .collect();
        if picked.is_empty() {
            "None".into()
        } else {
            picked
        }
    }

    fn memory_update(&self, memory: &str, context: &str, question: &str) -> String {
        let q = self.terms(question);
        let mut notes: Vec<String> = match memory.trim() {
            "" | "(none)" => Vec::new(),
            m => m.lines().map(str::to_string).collect(),
        };
        for s in sentences(context) {
            if !self.terms(&s).is_disjoint(&q) && !notes.contains(&s) {
                notes.push(s);
            }
        }
        notes.join("\n")
    }

    fn answer(&self, req: &CompletionRequest) -> String {
        let q = self.terms(req.get("question"));
        let mut best: Option<(usize, String)> = None;
        for part in ["evidence", "retrieved", "summaries"] {
            for line in req.get(part).lines() {
                let body = match line.strip_prefix('[') {
                    Some(r) => r.split_once("] ").map_or(r, |(_, b)| b),
                    None => line,
                };
                for s in sentences(body) {
                    let score = self.terms(&s).intersection(&q).count();
                    if score > 0 && best.as_ref().is_none_or(|b| score > b.0) {
                        best = Some((score, s));
                    }
                }
            }
        }
        best.map(|b| b.1).unwrap_or_else(|| "unknown".into())
    }
}

/// A document whose sections line up with chunk boundaries exactly.
#[derive(Debug, Clone)]
pub struct ThreeTopic {
    pub document: Document,
    pub chunking: ChunkConfig,
    pub world: World,
    /// Catalog title of the section each chunk came from.
    pub section_titles: Vec<String>,
}

const SECTION_TOKENS: usize = 40;
const FILLER: &[&str] = &["records", "from", "several", "seasons", "show", "steady", "local", "patterns", "across", "districts", "noted", "by", "archivists"];

fn pad_section(base: &str, tokens: usize) -> String {
    let mut ws: Vec<String> = base.split_whitespace().map(str::to_string).collect();
    let mut k = 0;
    while ws.len() + 1 < tokens {
        ws.push(FILLER[k % FILLER.len()].to_string());
        k += 1;
    }
    ws.truncate(tokens - 1);
    format!("{}.", ws.join(" "))
}

/// Title, keywords and opening sentence of one section.
type SectionSpec = (&'static str, &'static [&'static str], &'static str);

/// Three topics with three subtopics each, one section per subtopic, each
/// section exactly one chunk long.
pub fn three_topic_corpus() -> ThreeTopic {
    let spec: [(&str, &[&str], [SectionSpec; 3]); 3] = [
        (
            "Harbor Trade",
            &["harbor", "trade"],
            [
                ("Spice Imports", &["spice", "imports", "pepper"], "Harbor trade in spice imports grew as pepper and clove cargoes arrived from southern islands"),
                ("Dock Wages", &["dock", "wages", "stevedores"], "Harbor trade depended on dock labor and the wages paid to stevedores rose twice during the decade"),
                ("Shipping Tariffs", &["tariffs", "duties", "levy"], "Harbor trade was shaped by tariffs and import duties with a new levy on foreign hulls"),
            ],
        ),
        (
            "Volcanic Soil",
            &["volcanic", "soil"],
            [
                ("Ash Fertility", &["ash", "fertility", "nutrients"], "Volcanic soil owes its fertility to ash layers rich in mineral nutrients"),
                ("Vineyard Terraces", &["vineyard", "terraces", "grapes"], "Volcanic soil supports vineyard terraces where grapes ripen on dark slopes of basalt"),
                ("Lava Erosion", &["lava", "erosion", "gullies"], "Volcanic soil over old lava flows suffers erosion that cuts deep gullies after storms"),
            ],
        ),
        (
            "River Delta",
            &["river", "delta"],
            [
                ("Flood Cycles", &["flood", "silt", "monsoon"], "River delta flood cycles spread fresh silt across the plain during each monsoon"),
                ("Rice Paddies", &["rice", "paddies", "irrigation"], "River delta farmers plant rice paddies fed by irrigation canals dug by hand"),
                ("Delta Fisheries", &["fisheries", "catfish", "nets"], "River delta fisheries catch catfish with woven nets in shallow channels"),
            ],
        ),
    ];
    let mut world = World::new();
    let mut sections = Vec::new();
    let mut section_titles = Vec::new();
    for (topic, tk, subs) in spec {
        world = world.entry(topic, tk, None);
        for (title, kw, text) in subs {
            world = world.entry(title, kw, Some(topic));
            sections.push(pad_section(text, SECTION_TOKENS));
            section_titles.push(title.to_string());
        }
    }
    ThreeTopic {
        document: Document::new("synthetic-3x3", sections.join(" ")).with_meta("title", "Regional Economies"),
        chunking: ChunkConfig {
            chunk_token_size: SECTION_TOKENS,
            overlap_rate: 0.0,
        },
        world,
        section_titles,
    }
}

/// One generated document with a planted question.
#[derive(Debug, Clone)]
pub struct PlantedDoc {
    pub document: Document,
    pub record: QARecord,
    pub evidence: String,
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub docs: Vec<PlantedDoc>,
    pub world: World,
    pub chunking: ChunkConfig,
    pub build: BuildConfig,
}

const SYLLABLES_A: &[&str] = &["Ka", "Lo", "Mi", "Re", "Su", "Ta", "Vo", "Ne"];
const SYLLABLES_B: &[&str] = &["bar", "den", "fel", "gor", "hal"];

fn vessel_name(i: usize) -> String {
    let n = SYLLABLES_A.len() * SYLLABLES_B.len();
    let base = format!("{}{}", SYLLABLES_A[i % SYLLABLES_A.len()], SYLLABLES_B[(i / SYLLABLES_A.len()) % SYLLABLES_B.len()]);
    if i < n {
        format!("{base}ven")
    } else {
        format!("{base}ven{}", i / n)
    }
}

pub fn planted_world() -> World {
    World::new()
        .entry("Harbor Commerce", &["harbor", "commerce"], None)
        .entry("Fleet Operations", &["fleet"], Some("Harbor Commerce"))
        .entry("Freighter Voyages", &["freighter", "voyages"], Some("Fleet Operations"))
        .entry("Crew Training", &["crew", "training", "drills"], Some("Fleet Operations"))
        .entry("Drydock Repairs", &["drydock", "hull", "welding"], Some("Fleet Operations"))
        .entry("Port Administration", &["port", "administration"], Some("Harbor Commerce"))
        .entry("Port Regulations", &["regulations", "declare"], Some("Port Administration"))
        .entry("Customs Inspections", &["customs", "inspections", "inspectors"], Some("Port Administration"))
        .entry("Berth Scheduling", &["berth", "scheduling", "berths"], Some("Port Administration"))
        .entry("Mountain Mining", &["mining", "mountain"], None)
        .entry("Copper Veins", &["copper", "veins"], Some("Mountain Mining"))
        .entry("Mine Safety", &["safety", "ventilation"], Some("Mountain Mining"))
        .entry("Spring Festival", &["festival", "spring"], None)
        .entry("Lantern Parade", &["lantern", "parade"], Some("Spring Festival"))
        .entry("Harvest Market", &["market", "stalls"], Some("Spring Festival"))
        .synonym("freighter", "vessel")
        .synonym("ship", "vessel")
        .synonym("ships", "vessel")
        .synonym("freight", "cargo")
        .synonym("tonnes", "tonnage")
        .synonym("hauled", "transport")
        .synonym("carried", "transport")
}

const LOG_FILLER: &[&str] = &["Logbook", "entries", "were", "copied", "by", "clerks", "in", "neat", "columns", "on", "blue", "ledger", "paper", "at", "dusk"];

fn planted_text(name: &str, tonnes: usize, shift: usize) -> (String, String) {
    let evidence = format!("The freighter {name} hauled {tonnes} tonnes of freight.");
    let lead = if shift == 0 {
        String::new()
    } else {
        format!("{}. ", LOG_FILLER[..shift.min(LOG_FILLER.len())].join(" "))
    };
    let sections = [
        format!("{lead}Harbor freighter voyages crossed the northern strait every summer under fair winds. Captains logged currents and weather in thick voyage journals. {evidence} Longer voyages in winter needed careful routing along the coast."),
        "Harbor crew training began with rope drills on the quay. Each new crew member practised knots, signals and fire drills for six weeks.".to_string(),
        "The harbor drydock handled hull repairs throughout the year. Welding teams patched hull plates and replaced rusted rivets.".to_string(),
        "Harbor port regulations require every vessel to declare its cargo tonnage on arrival. What cargo a vessel may transport depends on the declared tonnage. Regulations fix the cargo tonnage that each vessel did transport through the harbor.".to_string(),
        "Harbor customs inspections verify the cargo tonnage of each vessel. Inspectors check what cargo the vessel did transport against the tonnage in its papers. A vessel that did not transport the declared cargo tonnage is held.".to_string(),
        "Harbor berth scheduling assigns each vessel a berth by its cargo tonnage. What cargo tonnage a vessel did transport decides the berth. Large vessel classes transport bulk cargo and need deep berths.".to_string(),
        "Mountain mining crews followed copper veins deep into the ridge. The richest copper veins ran beneath the old quarry.".to_string(),
        "Mountain mining safety rules required ventilation shafts in every gallery. Wardens tested ventilation fans before each shift.".to_string(),
        "The spring festival opened with a lantern parade through the old town. Children carried paper lantern boats along the parade route.".to_string(),
        "During the spring festival the harvest market filled the square with stalls. Farmers sold honey and apples from wooden market stalls.".to_string(),
    ];
    (sections.join("\n\n"), evidence)
}

/// Documents that each plant one evidence sentence in a deep section whose
/// surface words differ from the question, next to sibling sections dense
/// in the question's words.
pub fn planted_corpus(n_docs: usize) -> PlantedCorpus {
    let chunking = ChunkConfig {
        chunk_token_size: 32,
        overlap_rate: 0.2,
    };
    let tok = WordPieceTokenizer;
    let docs = (0..n_docs)
        .map(|i| {
            let name = vessel_name(i);
            let tonnes = 1200 + 37 * i;
            let doc_id = format!("planted-{i:02}");
            let (document, evidence) = (0..=LOG_FILLER.len())
                .map(|shift| {
                    let (text, ev) = planted_text(&name, tonnes, shift);
                    (Document::new(doc_id.clone(), text).with_meta("title", format!("Harbor Almanac {i}")), ev)
                })
                .find(|(d, ev)| {
                    chunk_document(d, &chunking, &tok).is_ok_and(|cs| cs.iter().any(|c| one_line(&c.text).contains(ev.as_str())))
                })
                .unwrap_or_else(|| {
                    let (text, ev) = planted_text(&name, tonnes, 0);
                    (Document::new(doc_id.clone(), text), ev)
                });
            let record = QARecord {
                query_id: format!("q-{i:02}"),
                doc_id,
                question: format!("What cargo tonnage did the vessel {name} transport?"),
                gold_answers: vec![format!("{tonnes} tonnes")],
                gold_evidence: Some(vec![evidence.clone()]),
            };
            PlantedDoc { document, record, evidence }
        })
        .collect();
    PlantedCorpus {
        docs,
        world: planted_world(),
        chunking,
        build: BuildConfig {
            max_children: 3,
            ..BuildConfig::default()
        },
    }
}

/// A hand-built tree in which the same facts are reachable twice: once as
/// a top-level leaf and again as a recap one level further down.
#[derive(Debug, Clone)]
pub struct MemoryScenario {
    pub kb: KnowledgeBase,
    pub world: World,
    pub question: String,
    /// Navigation start points, in the order they are offered.
    pub candidates: Vec<NodeId>,
    pub recap: NodeId,
}

pub fn memory_world() -> World {
    World::new()
        .entry("Early Policies", &["early"], None)
        .entry("Policies in Regional Relations", &["regional", "relations"], None)
        .entry("Policy Recap", &["recap"], Some("Policies in Regional Relations"))
        .entry("Trade Links", &["trade", "links"], Some("Policies in Regional Relations"))
        .synonym("adopted", "adopt")
}

pub fn memory_scenario(gateway: &Gateway) -> Result<MemoryScenario, NavError> {
    let world = memory_world();
    let texts = [
        "In 1905 Chile adopted restrictive policies toward Peru. In 1927 Chile adopted restrictive policies toward Peru again. ",
        "Chile adopted restrictive policies toward Peru in 1905 and 1927, as later reviews recall. ",
        "Copper exports moved north by rail to the coast. ",
    ];
    let text: String = texts.concat();
    let document = Document::new("chile-relations", text.clone()).with_meta("title", "Chile and Peru");
    let tok = WordPieceTokenizer;
    let mut chunks = Vec::new();
    let mut start = 0;
    for (i, t) in texts.iter().enumerate() {
        chunks.push(crate::corpus::Chunk {
            chunk_id: i,
            doc_id: document.doc_id.clone(),
            text: t.to_string(),
            token_count: tok.count(t),
            char_span: (start, start + t.len()),
        });
        start += t.len();
    }
    let mut tree = KnowledgeTree::new(&document.doc_id, document.title(), chunks.len());
    let root = tree.root;
    let early = tree.add_leaf(root, "Early Policies", vec![Passage::new(texts[0].trim(), [0])])?;
    let regional = tree.add_intermediate(root, "Policies in Regional Relations")?;
    let recap = tree.add_leaf(regional, "Policy Recap", vec![Passage::new(texts[1].trim(), [1])])?;
    let trade = tree.add_leaf(regional, "Trade Links", vec![Passage::new(texts[2].trim(), [2])])?;
    tree.set_summary(root, "Relations between Chile and Peru, from early policies to trade.")?;
    tree.set_summary(early, "Chile adopted restrictive policies toward Peru in 1905 and 1927.")?;
    tree.set_summary(regional, "Regional relations of Chile and Peru, with a policy recap and trade links.")?;
    tree.set_summary(recap, "Chile adopted restrictive policies toward Peru in 1905 and 1927.")?;
    tree.set_summary(trade, "Copper exports moved north by rail.")?;
    tree.refresh_paths(root);
    let index = ChunkIndex::build(&chunks, |t| gateway.embed(t).map(|(v, _)| v).map_err(|e| e.to_string()))?;
    let kb = KnowledgeBase { document, chunks, tree, index };
    kb.check()?;
    Ok(MemoryScenario {
        kb,
        world,
        question: "How many times did Chile adopt restrictive policies toward Peru?".into(),
        candidates: vec![early, regional],
        recap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::placeholders;

    #[test]
    fn base_titles() {
        assert_eq!(base_title("Fleet Operations (2)"), "Fleet Operations");
        assert_eq!(base_title("Group 3 (Crew Training)"), "Crew Training");
        assert_eq!(base_title("Spice Imports (Part 1/2)"), "Spice Imports");
        assert_eq!(base_title("Plain"), "Plain");
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(sentences("A b. C 3.5 d? e"), vec!["A b.", "C 3.5 d?", "e"]);
    }

    #[test]
    fn synonyms_fold() {
        let w = planted_world();
        let ev = w.terms("The freighter Kaven hauled 1200 tonnes of freight.");
        let q = w.terms("What cargo tonnage did the vessel Kaven transport?");
        assert!(q.is_subset(&ev), "{q:?} vs {ev:?}");
        assert!(w.raw_terms("The freighter hauled freight").is_disjoint(&w.raw_terms("cargo vessel tonnage transport")));
    }

    #[test]
    fn select_uses_literal_keywords() {
        let w = planted_world();
        let req = CompletionRequest::new(
            TemplateId::SelectTitles,
            placeholders([
                ("select_num", "2"),
                ("outlines", "\n0. Freighter Voyages\n1. Port Regulations"),
                ("text", "Every vessel must declare cargo tonnage."),
            ]),
        );
        assert_eq!(w.respond(&req, "").unwrap(), "1//Port Regulations//Every vessel must declare cargo tonnage.");
    }

    #[test]
    fn navigation_folds_synonyms() {
        let w = planted_world();
        let req = CompletionRequest::new(
            TemplateId::Navigate,
            placeholders([
                ("path", "Root"),
                ("entries", "\n0. Fleet Operations: ships\n1. Crew Training: drills\n2. Port Administration: vessel cargo tonnage rules"),
                ("question", "What cargo tonnage did the vessel Kaven transport?"),
            ]),
        );
        assert_eq!(w.respond(&req, "").unwrap(), "0//Fleet Operations//EXPLORE\n2//Port Administration//INFO");
    }

    #[test]
    fn names_are_distinct() {
        let names: BTreeSet<String> = (0..120).map(vessel_name).collect();
        assert_eq!(names.len(), 120);
    }

    #[test]
    fn three_topic_sections_are_chunks() {
        let t = three_topic_corpus();
        let chunks = chunk_document(&t.document, &t.chunking, &WordPieceTokenizer).unwrap();
        assert_eq!(chunks.len(), 9);
        for c in &chunks {
            assert_eq!(c.token_count, SECTION_TOKENS);
        }
    }

    #[test]
    fn planted_evidence_sits_in_one_chunk() {
        let c = planted_corpus(6);
        for d in &c.docs {
            let chunks = chunk_document(&d.document, &c.chunking, &WordPieceTokenizer).unwrap();
            assert!(chunks.iter().any(|ch| one_line(&ch.text).contains(&d.evidence)), "{}", d.document.doc_id);
        }
    }
}
