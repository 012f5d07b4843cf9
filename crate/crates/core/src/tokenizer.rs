//! Token counting.
//!
//! Every token budget in the system (chunk size, node content cap, context
//! budget, usage accounting) goes through a [`Tokenizer`]. The default
//! [`WordPieceTokenizer`] is an approximation: maximal alphanumeric runs and
//! single punctuation characters are tokens, whitespace is not. Real runs can
//! plug in a counter matched to the serving model.

use std::fmt;
use std::ops::Range;

/// A deterministic token counter.
pub trait Tokenizer: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Byte spans of every token in `text`, in order.
    fn token_spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }

    /// Largest byte offset `o` such that `text[..o]` holds at most `budget`
    /// tokens, preferring a whitespace boundary at or before the budget.
    ///
    /// Falls back to a token boundary when the first `budget` tokens contain
    /// no whitespace. Returns `text.len()` when the whole text fits.
    fn split_at(&self, text: &str, budget: usize) -> usize {
        let spans = self.token_spans(text);
        if spans.len() <= budget {
            return text.len();
        }
        if budget == 0 {
            return 0;
        }
        // The (budget)-th token starts the remainder.
        let mut cut = budget;
        while cut > 0 {
            let prev_end = spans[cut - 1].end;
            let next_start = spans[cut].start;
            if text[prev_end..next_start].chars().any(char::is_whitespace) {
                return next_start;
            }
            cut -= 1;
        }
        spans[budget].start
    }
}

/// Whitespace + punctuation word-piece tokenizer.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordPieceTokenizer;

impl WordPieceTokenizer {
    pub const NAME: &'static str = "approx-wordpiece";
}

impl Tokenizer for WordPieceTokenizer {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut run_start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_alphanumeric() {
                if run_start.is_none() {
                    run_start = Some(i);
                }
                continue;
            }
            if let Some(s) = run_start.take() {
                spans.push(s..i);
            }
            if !c.is_whitespace() {
                spans.push(i..i + c.len_utf8());
            }
        }
        if let Some(s) = run_start {
            spans.push(s..text.len());
        }
        spans
    }

    fn count(&self, text: &str) -> usize {
        let mut n = 0;
        let mut in_run = false;
        for c in text.chars() {
            if c.is_alphanumeric() {
                if !in_run {
                    n += 1;
                    in_run = true;
                }
            } else {
                in_run = false;
                if !c.is_whitespace() {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Truncate `text` to at most `budget` tokens at a word boundary.
pub fn truncate_to<'a>(tok: &dyn Tokenizer, text: &'a str, budget: usize) -> &'a str {
    let cut = tok.split_at(text, budget);
    text[..cut].trim_end()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_words_and_punctuation() {
        let t = WordPieceTokenizer;
        assert_eq!(t.count(""), 0);
        assert_eq!(t.count("   \n"), 0);
        assert_eq!(t.count("hello world"), 2);
        assert_eq!(t.count("hello, world!"), 4);
        assert_eq!(t.count("4.41 billion"), 4);
        assert_eq!(t.count("naïve café"), 2);
    }

    #[test]
    fn spans_agree_with_count() {
        let t = WordPieceTokenizer;
        let s = "The city's output rose 11.7% -- to 4.41 billion.";
        assert_eq!(t.token_spans(s).len(), t.count(s));
    }

    #[test]
    fn split_prefers_whitespace() {
        let t = WordPieceTokenizer;
        let s = "alpha beta gamma delta";
        let cut = t.split_at(s, 2);
        assert_eq!(&s[..cut], "alpha beta ");
        // "beta," would split between word and comma: snap back.
        let s = "alpha beta, gamma";
        let cut = t.split_at(s, 2);
        assert_eq!(&s[..cut], "alpha ");
        assert_eq!(t.split_at(s, 10), s.len());
        // no whitespace at all: hard token boundary
        let s = "a,b,c,d";
        assert_eq!(&s[..t.split_at(s, 3)], "a,b");
    }

    proptest! {
        #[test]
        fn count_is_monotone_under_concat(a in "\\PC{0,40}", b in "\\PC{0,40}") {
            let t = WordPieceTokenizer;
            let joined = format!("{a}{b}");
            prop_assert!(t.count(&joined) >= t.count(&a).max(t.count(&b)));
        }

        #[test]
        fn split_respects_budget(s in "[a-z ,.]{0,80}", budget in 0usize..20) {
            let t = WordPieceTokenizer;
            let cut = t.split_at(&s, budget);
            prop_assert!(s.is_char_boundary(cut));
            prop_assert!(t.count(&s[..cut]) <= budget);
        }
    }
}
