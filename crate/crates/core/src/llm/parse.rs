//! Strict parsers for every structured model output.
//!
//! Each parser is total: it returns a value or a [`ParseError`], never
//! panics. Each grammar also has a serializer so values can be re-emitted
//! (used by mock scripts and round-trip tests).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed line {line_no}: `{line}`")]
    MalformedLine { line_no: usize, line: String },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: i64, bound: usize },
    #[error("unknown category `{token}` on line {line_no}")]
    UnknownCategory { line_no: usize, token: String },
    #[error("missing << >> wrapper")]
    MissingWrapper,
    #[error("paragraph on line {line_no} carries no citation")]
    UncitedParagraph { line_no: usize },
    #[error("snippets never cited: {missing:?}")]
    CoverageGap { missing: Vec<usize> },
    #[error("assignment does not partition the items (missing {missing:?}, repeated {repeated:?})")]
    InvalidPartition { missing: Vec<usize>, repeated: Vec<usize> },
    #[error("{got} groups exceed the limit of {max}")]
    TooManyGroups { got: usize, max: usize },
    #[error("{0}")]
    Constraint(String),
}

fn is_none_token(raw: &str) -> bool {
    let t = raw.trim().trim_matches(|c| c == '"' || c == '\'' || c == '`').trim_end_matches('.');
    t.eq_ignore_ascii_case("none")
}

fn content_lines(raw: &str) -> impl Iterator<Item = (usize, &str)> {
    raw.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// `index//title//payload`, where the first two `//` delimit and the
/// remainder (which may itself contain `//`) is the payload.
fn split_three(line: &str) -> Option<(&str, &str, &str)> {
    let (idx, rest) = line.split_once("//")?;
    let (title, payload) = rest.split_once("//")?;
    Some((idx.trim(), title.trim(), payload.trim()))
}

fn malformed(line_no: usize, line: &str) -> ParseError {
    ParseError::MalformedLine {
        line_no,
        line: line.to_string(),
    }
}

// ---------------------------------------------------------------------------
// select_titles / create_node: Index//Title//Summary

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TitleEntry {
    /// Offered-title index, or -1 for a new-node proposal.
    pub index: i64,
    pub title: String,
    pub payload: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TitleSelection {
    pub entries: Vec<TitleEntry>,
}

impl TitleSelection {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_raw(&self) -> String {
        if self.entries.is_empty() {
            return "None".to_string();
        }
        self.entries
            .iter()
            .map(|e| format!("{}//{}//{}", e.index, e.title, e.payload))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub fn parse_title_selection(
    raw: &str,
    offered_count: usize,
    select_num: usize,
) -> Result<TitleSelection, ParseError> {
    if is_none_token(raw) {
        return Ok(TitleSelection::default());
    }
    let mut entries = Vec::new();
    for (line_no, line) in content_lines(raw) {
        if is_none_token(line) {
            continue;
        }
        let (idx, title, payload) = split_three(line).ok_or_else(|| malformed(line_no, line))?;
        let index: i64 = idx.parse().map_err(|_| malformed(line_no, line))?;
        if title.is_empty() {
            return Err(malformed(line_no, line));
        }
        if index != -1 && (index < 0 || index as u64 >= offered_count as u64) {
            return Err(ParseError::IndexOutOfRange {
                index,
                bound: offered_count,
            });
        }
        entries.push(TitleEntry {
            index,
            title: title.to_string(),
            payload: payload.to_string(),
        });
    }
    if entries.is_empty() {
        return Err(malformed(0, raw.trim()));
    }
    entries.truncate(select_num);
    Ok(TitleSelection { entries })
}

// ---------------------------------------------------------------------------
// navigate: Index//Title//Category

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Category {
    Info,
    Explore,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Info => "INFO",
            Category::Explore => "EXPLORE",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NavDecision {
    pub index: usize,
    pub title: String,
    pub category: Category,
}

pub fn parse_navigation(raw: &str) -> Result<Vec<NavDecision>, ParseError> {
    if is_none_token(raw) {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (line_no, line) in content_lines(raw) {
        if is_none_token(line) {
            continue;
        }
        let (idx, title, cat) = split_three(line).ok_or_else(|| malformed(line_no, line))?;
        let index: usize = idx.parse().map_err(|_| malformed(line_no, line))?;
        if title.is_empty() {
            return Err(malformed(line_no, line));
        }
        let category = match cat {
            "INFO" => Category::Info,
            "EXPLORE" => Category::Explore,
            other => {
                return Err(ParseError::UnknownCategory {
                    line_no,
                    token: other.to_string(),
                })
            }
        };
        out.push(NavDecision {
            index,
            title: title.to_string(),
            category,
        });
    }
    if out.is_empty() {
        return Err(malformed(0, raw.trim()));
    }
    Ok(out)
}

pub fn navigation_to_raw(decisions: &[NavDecision]) -> String {
    if decisions.is_empty() {
        return "None".to_string();
    }
    decisions
        .iter()
        .map(|d| format!("{}//{}//{}", d.index, d.title, d.category))
        .collect::<Vec<_>>()
        .join("\n")
}

// ---------------------------------------------------------------------------
// leaf_select: 0//2//5//

/// Parse the raw index list without range checks.
pub fn parse_leaf_indices(raw: &str) -> Result<Vec<usize>, ParseError> {
    if is_none_token(raw) {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (line_no, line) in content_lines(raw) {
        for piece in line.split("//") {
            let piece = piece.trim();
            if piece.is_empty() {
                continue;
            }
            let index: usize = piece.parse().map_err(|_| malformed(line_no, line))?;
            out.push(index);
        }
    }
    if out.is_empty() {
        return Err(malformed(0, raw.trim()));
    }
    Ok(out)
}

pub fn parse_leaf_selection(raw: &str, passage_count: usize) -> Result<BTreeSet<usize>, ParseError> {
    let indices = parse_leaf_indices(raw)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= passage_count) {
        return Err(ParseError::IndexOutOfRange {
            index: bad as i64,
            bound: passage_count,
        });
    }
    Ok(indices.into_iter().collect())
}

pub fn leaf_selection_to_raw(selected: &BTreeSet<usize>) -> String {
    if selected.is_empty() {
        return "None".to_string();
    }
    selected.iter().map(|i| format!("{i}//")).collect()
}

// ---------------------------------------------------------------------------
// merge_content: <<paragraph>>

pub fn parse_merged_content(raw: &str) -> Result<String, ParseError> {
    let (_, after) = raw.split_once("<<").ok_or(ParseError::MissingWrapper)?;
    let (inner, _) = after.split_once(">>").ok_or(ParseError::MissingWrapper)?;
    Ok(inner.to_string())
}

pub fn merged_content_to_raw(paragraph: &str) -> String {
    format!("<<{paragraph}>>")
}

// ---------------------------------------------------------------------------
// refusion: paragraph text followed by <1><3><5>

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefusedParagraph {
    pub paragraph: String,
    /// 1-based snippet labels as rendered in the prompt.
    pub cited: BTreeSet<usize>,
}

/// Strip trailing `<n>` markers from a line. Returns the remaining text and
/// the labels found, or `None` when a marker is not a plain integer.
fn split_trailing_citations(line: &str) -> (&str, Vec<Result<usize, String>>) {
    let mut text = line.trim_end();
    let mut labels = Vec::new();
    while text.ends_with('>') {
        let Some(open) = text.rfind('<') else { break };
        let inner = &text[open + 1..text.len() - 1];
        if inner.is_empty() || !inner.chars().all(|c| c.is_ascii_digit()) {
            break;
        }
        labels.push(inner.parse::<usize>().map_err(|_| inner.to_string()));
        text = text[..open].trim_end();
    }
    labels.reverse();
    (text, labels)
}

pub fn parse_refusion(raw: &str, snippet_count: usize) -> Result<Vec<RefusedParagraph>, ParseError> {
    let mut out: Vec<RefusedParagraph> = Vec::new();
    for (line_no, line) in content_lines(raw) {
        let (text, labels) = split_trailing_citations(line);
        let mut cited = BTreeSet::new();
        for label in labels {
            let n = label.map_err(|_| malformed(line_no, line))?;
            if n == 0 || n > snippet_count {
                return Err(ParseError::IndexOutOfRange {
                    index: i64::try_from(n).unwrap_or(i64::MAX),
                    bound: snippet_count,
                });
            }
            cited.insert(n);
        }
        if text.is_empty() {
            // A citation-only line continues the previous paragraph.
            match out.last_mut() {
                Some(prev) if !cited.is_empty() => prev.cited.extend(cited),
                _ => return Err(ParseError::UncitedParagraph { line_no }),
            }
            continue;
        }
        if cited.is_empty() {
            return Err(ParseError::UncitedParagraph { line_no });
        }
        out.push(RefusedParagraph {
            paragraph: text.to_string(),
            cited,
        });
    }
    if out.is_empty() {
        return Err(malformed(0, raw.trim()));
    }
    let covered: BTreeSet<usize> = out.iter().flat_map(|p| p.cited.iter().copied()).collect();
    let missing: Vec<usize> = (1..=snippet_count).filter(|i| !covered.contains(i)).collect();
    if !missing.is_empty() {
        return Err(ParseError::CoverageGap { missing });
    }
    Ok(out)
}

pub fn refusion_to_raw(paragraphs: &[RefusedParagraph]) -> String {
    paragraphs
        .iter()
        .map(|p| {
            let cites: String = p.cited.iter().map(|c| format!("<{c}>")).collect();
            format!("{} {cites}", p.paragraph)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

// ---------------------------------------------------------------------------
// outline: Title//Scope

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlineEntry {
    pub title: String,
    pub scope: String,
}

fn strip_list_marker(line: &str) -> &str {
    let l = line.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = l.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &l[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim_start();
        }
    }
    l
}

/// Parse outline lines, dropping duplicate titles (case-insensitive) and
/// keeping at most `max_titles`.
pub fn parse_outline(raw: &str, max_titles: usize) -> Result<Vec<OutlineEntry>, ParseError> {
    let mut out: Vec<OutlineEntry> = Vec::new();
    let mut seen = BTreeSet::new();
    for (line_no, line) in content_lines(raw) {
        let body = strip_list_marker(line);
        let (title, scope) = match body.split_once("//") {
            Some((t, s)) => (t.trim(), s.trim()),
            None => (body.trim(), ""),
        };
        if title.is_empty() {
            return Err(malformed(line_no, line));
        }
        if seen.insert(title.to_lowercase()) {
            out.push(OutlineEntry {
                title: title.to_string(),
                scope: scope.to_string(),
            });
        }
    }
    if out.is_empty() {
        return Err(malformed(0, raw.trim()));
    }
    out.truncate(max_titles);
    Ok(out)
}

pub fn outline_to_raw(entries: &[OutlineEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}//{}", e.title, e.scope))
        .collect::<Vec<_>>()
        .join("\n")
}

// ---------------------------------------------------------------------------
// split_node / group_titles: Title//i,j,k

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub title: String,
    pub members: Vec<usize>,
}

/// Parse a partition of `item_count` items into at most `max_groups`
/// titled groups. Every item must appear exactly once.
pub fn parse_assignment(
    raw: &str,
    item_count: usize,
    max_groups: usize,
) -> Result<Vec<Assignment>, ParseError> {
    let mut groups = Vec::new();
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for (line_no, line) in content_lines(raw) {
        let body = strip_list_marker(line);
        let (title, list) = body.rsplit_once("//").ok_or_else(|| malformed(line_no, line))?;
        let title = title.trim();
        if title.is_empty() {
            return Err(malformed(line_no, line));
        }
        let mut members = Vec::new();
        for piece in list.split(',') {
            let piece = piece.trim();
            if piece.is_empty() {
                continue;
            }
            let i: usize = piece.parse().map_err(|_| malformed(line_no, line))?;
            if i >= item_count {
                return Err(ParseError::IndexOutOfRange {
                    index: i as i64,
                    bound: item_count,
                });
            }
            *seen.entry(i).or_default() += 1;
            members.push(i);
        }
        if members.is_empty() {
            return Err(malformed(line_no, line));
        }
        groups.push(Assignment {
            title: title.to_string(),
            members,
        });
    }
    if groups.is_empty() {
        return Err(malformed(0, raw.trim()));
    }
    let missing: Vec<usize> = (0..item_count).filter(|i| !seen.contains_key(i)).collect();
    let repeated: Vec<usize> = seen.iter().filter(|(_, &n)| n > 1).map(|(&i, _)| i).collect();
    if !missing.is_empty() || !repeated.is_empty() {
        return Err(ParseError::InvalidPartition { missing, repeated });
    }
    if groups.len() > max_groups {
        return Err(ParseError::TooManyGroups {
            got: groups.len(),
            max: max_groups,
        });
    }
    Ok(groups)
}

pub fn assignment_to_raw(groups: &[Assignment]) -> String {
    groups
        .iter()
        .map(|g| {
            let list = g.members.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
            format!("{}//{list}", g.title)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn title_selection_example() {
        let raw = "2//Production Growth//The city achieved an agricultural product processing industry output value of 4.41 billion yuan, an increase of 11.7";
        let sel = parse_title_selection(raw, 6, 2).unwrap();
        assert_eq!(sel.entries.len(), 1);
        assert_eq!(sel.entries[0].index, 2);
        assert_eq!(sel.entries[0].title, "Production Growth");
        assert!(sel.entries[0].payload.ends_with("an increase of 11.7"));
    }

    #[test]
    fn title_selection_none_and_new_node() {
        assert!(parse_title_selection("None", 3, 2).unwrap().is_empty());
        assert!(parse_title_selection("  None\n", 3, 2).unwrap().is_empty());
        let sel = parse_title_selection("-1//New Title//Summarized Content", 0, 1).unwrap();
        assert_eq!(sel.entries[0].index, -1);
        assert_eq!(sel.entries[0].title, "New Title");
        assert_eq!(sel.entries[0].payload, "Summarized Content");
    }

    #[test]
    fn title_selection_caps_and_greedy_payload() {
        let raw = "0//A//x\n1//B//see a//b path\n2//C//z";
        let sel = parse_title_selection(raw, 3, 2).unwrap();
        assert_eq!(sel.entries.len(), 2);
        assert_eq!(sel.entries[1].payload, "see a//b path");
    }

    #[test]
    fn title_selection_errors() {
        assert!(matches!(
            parse_title_selection("0//only two", 3, 2),
            Err(ParseError::MalformedLine { line_no: 1, .. })
        ));
        assert!(matches!(
            parse_title_selection("x//A//b", 3, 2),
            Err(ParseError::MalformedLine { .. })
        ));
        assert_eq!(
            parse_title_selection("3//A//b", 3, 2),
            Err(ParseError::IndexOutOfRange { index: 3, bound: 3 })
        );
        assert_eq!(
            parse_title_selection("-2//A//b", 3, 2),
            Err(ParseError::IndexOutOfRange { index: -2, bound: 3 })
        );
        assert!(parse_title_selection("", 3, 2).is_err());
    }

    #[test]
    fn navigation_examples() {
        let d = parse_navigation("1//Climate Policy//EXPLORE\n3//Carbon Emissions Statistics//INFO").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].category, Category::Explore);
        assert_eq!(d[1].index, 3);
        assert_eq!(d[1].category, Category::Info);
        assert!(parse_navigation("None").unwrap().is_empty());
        assert_eq!(
            parse_navigation("5//X//MAYBE"),
            Err(ParseError::UnknownCategory { line_no: 1, token: "MAYBE".into() })
        );
    }

    #[test]
    fn navigation_rejects_every_other_category_token() {
        for tok in ["info", "Explore", "INFO.", "EXPLORE!", "", "BOTH", "INFO//x", "INFOEXPLORE"] {
            let raw = format!("0//T//{tok}");
            assert!(
                matches!(parse_navigation(&raw), Err(ParseError::UnknownCategory { .. })),
                "{tok}"
            );
        }
    }

    #[test]
    fn leaf_selection_examples() {
        assert_eq!(parse_leaf_selection("0//2//", 3).unwrap(), BTreeSet::from([0, 2]));
        assert!(parse_leaf_selection("None", 3).unwrap().is_empty());
        assert_eq!(parse_leaf_selection("0//0//1//", 3).unwrap(), BTreeSet::from([0, 1]));
        assert_eq!(parse_leaf_selection("0//2", 3).unwrap(), BTreeSet::from([0, 2]));
        assert_eq!(
            parse_leaf_selection("0//7//", 3),
            Err(ParseError::IndexOutOfRange { index: 7, bound: 3 })
        );
        assert!(matches!(parse_leaf_selection("zero//", 3), Err(ParseError::MalformedLine { .. })));
    }

    #[test]
    fn merged_content_examples() {
        assert_eq!(parse_merged_content("<<This is the new paragraph>>").unwrap(), "This is the new paragraph");
        assert_eq!(parse_merged_content("noise <<X>> trailing").unwrap(), "X");
        assert_eq!(parse_merged_content("<<>>").unwrap(), "");
        assert_eq!(parse_merged_content("<<a>> <<b>>").unwrap(), "a");
        assert_eq!(parse_merged_content("no wrapper"), Err(ParseError::MissingWrapper));
        assert_eq!(parse_merged_content("<<unterminated"), Err(ParseError::MissingWrapper));
        assert_eq!(parse_merged_content(">>x<<"), Err(ParseError::MissingWrapper));
    }

    #[test]
    fn refusion_examples() {
        let raw = "Machine learning is a method of artificial intelligence that relies on statistical techniques to enable systems to learn from data. <1><2><3>\nIt is commonly applied in areas such as image recognition and speech processing. <4>";
        let p = parse_refusion(raw, 4).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].cited, BTreeSet::from([1, 2, 3]));
        assert_eq!(p[1].cited, BTreeSet::from([4]));
        assert!(p[1].paragraph.ends_with("speech processing."));

        let one = parse_refusion("Text. <1>", 1).unwrap();
        assert_eq!(one[0].paragraph, "Text.");

        let gap = parse_refusion("A. <1>\nB. <3><4>", 4);
        assert_eq!(gap, Err(ParseError::CoverageGap { missing: vec![2] }));
    }

    #[test]
    fn refusion_errors() {
        assert_eq!(
            parse_refusion("A. <1>\nNo cite here.", 1),
            Err(ParseError::UncitedParagraph { line_no: 2 })
        );
        assert_eq!(
            parse_refusion("A. <0>", 1),
            Err(ParseError::IndexOutOfRange { index: 0, bound: 1 })
        );
        assert_eq!(
            parse_refusion("A. <5>", 2),
            Err(ParseError::IndexOutOfRange { index: 5, bound: 2 })
        );
        // citations on their own line attach to the previous paragraph
        let p = parse_refusion("A.\n<1>", 1);
        assert_eq!(p, Err(ParseError::UncitedParagraph { line_no: 1 }));
        let p = parse_refusion("A. <1>\n<2>", 2).unwrap();
        assert_eq!(p[0].cited, BTreeSet::from([1, 2]));
    }

    #[test]
    fn outline_parsing() {
        let raw = "1. Economy//growth figures\n- Culture\nEconomy//dup\n\n";
        let o = parse_outline(raw, 12).unwrap();
        assert_eq!(o.len(), 2);
        assert_eq!(o[0].title, "Economy");
        assert_eq!(o[0].scope, "growth figures");
        assert_eq!(o[1].title, "Culture");
        assert_eq!(parse_outline("A\nB\nC", 2).unwrap().len(), 2);
        assert!(parse_outline("  \n", 3).is_err());
    }

    #[test]
    fn assignment_parsing() {
        let g = parse_assignment("Early//0,1\nLate//2", 3, 12).unwrap();
        assert_eq!(g[0].members, vec![0, 1]);
        assert_eq!(
            parse_assignment("Early//0\nLate//0,2", 3, 12),
            Err(ParseError::InvalidPartition { missing: vec![1], repeated: vec![0] })
        );
        assert_eq!(
            parse_assignment("A//0\nB//1\nC//2", 3, 2),
            Err(ParseError::TooManyGroups { got: 3, max: 2 })
        );
        assert!(matches!(parse_assignment("A//9", 3, 2), Err(ParseError::IndexOutOfRange { .. })));
    }
}
