//! Rule-based target extraction.
//!
//! Numbers follow a fixed grammar: optional currency symbol, digits with
//! optional thousands separators, optional decimal part, optional `%`.
//! Nouns are maximal runs of alphabetic tokens, none of which is in the
//! stopword list or the verb blocklist, split into chunks of at most
//! [`MAX_NOUN_TOKENS`]. Text after the last answer marker is not mined.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;

use crate::distiller::ANSWER_MARKER;
use crate::model::{byte_to_char, Span, SubQuestion, Target, TargetKind};

pub const MAX_TARGETS: usize = 12;
pub const MAX_NOUN_TOKENS: usize = 4;

const STOPWORDS: &str = include_str!("../data/stopwords.txt");
const VERBS: &str = include_str!("../data/verbs.txt");

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[$€£¥]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?%?").unwrap())
}

fn word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{L}+(?:['-]\p{L}+)*").unwrap())
}

/// True when all of `s` matches the numeric grammar.
pub fn is_number_surface(s: &str) -> bool {
    number_re()
        .find(s)
        .is_some_and(|m| m.start() == 0 && m.end() == s.len())
}

pub fn sub_question_prompt(surface: &str) -> String {
    format!("Where is the {surface}?")
}

#[derive(Debug, Clone)]
pub struct TargetExtractor {
    blocked: HashSet<String>,
    max_targets: usize,
}

impl Default for TargetExtractor {
    fn default() -> Self {
        Self::from_lists(STOPWORDS, VERBS)
    }
}

fn word_list(s: &str) -> impl Iterator<Item = String> + '_ {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
}

impl TargetExtractor {
    /// Builds an extractor from newline-separated word lists.
    pub fn from_lists(stopwords: &str, verbs: &str) -> Self {
        let blocked = word_list(stopwords).chain(word_list(verbs)).collect();
        Self {
            blocked,
            max_targets: MAX_TARGETS,
        }
    }

    pub fn with_max_targets(mut self, n: usize) -> Self {
        self.max_targets = n;
        self
    }

    pub fn is_blocked(&self, word: &str) -> bool {
        self.blocked.contains(&word.to_lowercase())
    }

    /// Every target occurrence in `text`, in order, without deduplication.
    pub fn scan(&self, text: &str) -> Vec<Target> {
        let mut found: Vec<(usize, usize, TargetKind)> = Vec::new();

        for m in number_re().find_iter(text) {
            let before = text[..m.start()].chars().next_back();
            let after = text[m.end()..].chars().next();
            if before.is_some_and(|c| c.is_alphanumeric() || c == '.' || c == ',') {
                continue;
            }
            if after.is_some_and(|c| c.is_alphanumeric()) {
                continue;
            }
            found.push((m.start(), m.end(), TargetKind::Number));
        }

        let mut run: Vec<(usize, usize)> = Vec::new();
        let flush = |run: &mut Vec<(usize, usize)>, found: &mut Vec<(usize, usize, TargetKind)>| {
            for chunk in run.chunks(MAX_NOUN_TOKENS) {
                found.push((chunk[0].0, chunk[chunk.len() - 1].1, TargetKind::Noun));
            }
            run.clear();
        };
        for m in word_re().find_iter(text) {
            let before = text[..m.start()].chars().next_back();
            let after = text[m.end()..].chars().next();
            let glued = before.is_some_and(|c| c.is_ascii_digit()) || after.is_some_and(|c| c.is_ascii_digit());
            let keep = !glued && m.as_str().chars().count() >= 2 && !self.is_blocked(m.as_str());
            if !keep {
                flush(&mut run, &mut found);
                continue;
            }
            if let Some(&(_, prev_end)) = run.last() {
                let gap = &text[prev_end..m.start()];
                if gap.is_empty() || !gap.chars().all(|c| c == ' ' || c == '\t') {
                    flush(&mut run, &mut found);
                }
            }
            run.push((m.start(), m.end()));
        }
        flush(&mut run, &mut found);

        found.sort_by_key(|&(s, _, _)| s);
        found
            .into_iter()
            .map(|(s, e, kind)| {
                let start = byte_to_char(text, s);
                Target {
                    surface: text[s..e].to_string(),
                    kind,
                    span: Span::new(start, start + text[s..e].chars().count()),
                }
            })
            .collect()
    }

    /// Deduplicated targets (case-folded surface, first occurrence wins),
    /// capped at the configured maximum.
    pub fn extract(&self, cot_text: &str) -> Vec<Target> {
        let region = match cot_text.rfind(ANSWER_MARKER) {
            Some(i) => &cot_text[..i],
            None => cot_text,
        };
        let mut seen = HashSet::new();
        self.scan(region)
            .into_iter()
            .filter(|t| seen.insert(t.surface.to_lowercase()))
            .take(self.max_targets)
            .collect()
    }
}

/// Extracts targets with the bundled word lists.
pub fn extract_targets(cot_text: &str) -> Vec<Target> {
    static DEFAULT: OnceLock<TargetExtractor> = OnceLock::new();
    DEFAULT.get_or_init(TargetExtractor::default).extract(cot_text)
}

pub fn build_sub_questions(targets: &[Target]) -> Vec<SubQuestion> {
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| SubQuestion {
            target: t.clone(),
            prompt: sub_question_prompt(&t.surface),
            index_t: i + 1,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn surfaces(ts: &[Target]) -> Vec<(&str, TargetKind)> {
        ts.iter().map(|t| (t.surface.as_str(), t.kind)).collect()
    }

    #[test]
    fn price_sentence() {
        let ts = extract_targets("The price of beef sauce is $1.85 per kilogram");
        assert_eq!(
            surfaces(&ts),
            vec![("beef sauce", TargetKind::Noun), ("$1.85", TargetKind::Number)]
        );
        assert_eq!(ts[0].span, Span::new(13, 23));
        assert_eq!(ts[1].span, Span::new(27, 32));
    }

    #[test]
    fn arithmetic_line() {
        let ts = extract_targets("Total = 204 + 274 = 478");
        assert_eq!(
            surfaces(&ts),
            vec![
                ("204", TargetKind::Number),
                ("274", TargetKind::Number),
                ("478", TargetKind::Number)
            ]
        );
    }

    #[test]
    fn blank_text_has_no_targets() {
        assert!(extract_targets("   \n\t ").is_empty());
        assert!(extract_targets("").is_empty());
    }

    #[test]
    fn numeric_grammar_variants() {
        let ts = extract_targets("Sales were 1,234.50 and 12% of €3,000, version v2 and 3kg.");
        let s: Vec<_> = ts
            .iter()
            .filter(|t| t.kind == TargetKind::Number)
            .map(|t| t.surface.as_str())
            .collect();
        assert_eq!(s, vec!["1,234.50", "12%", "€3,000"]);
    }

    #[test]
    fn answer_tail_is_not_mined() {
        let ts = extract_targets("Red kite costs $0.72. *Answer*: 0.72 dollars");
        assert_eq!(
            surfaces(&ts),
            vec![("Red kite", TargetKind::Noun), ("$0.72", TargetKind::Number)]
        );
    }

    #[test]
    fn duplicates_keep_first_span() {
        let ts = extract_targets("Marinara sauce here, marinara sauce there.");
        assert_eq!(ts.len(), 1);
        assert_eq!(ts[0].span.start, 0);
    }

    #[test]
    fn long_runs_are_chunked_and_capped() {
        let ts = extract_targets("alpha beta gamma delta epsilon zeta");
        assert_eq!(surfaces(&ts)[0].0, "alpha beta gamma delta");
        assert_eq!(surfaces(&ts)[1].0, "epsilon zeta");
        let many: String = (1..=20).map(|i| format!("{i} ")).collect();
        assert_eq!(extract_targets(&many).len(), MAX_TARGETS);
    }

    #[test]
    fn runs_break_on_punctuation_and_newlines() {
        let ts = extract_targets("apples, pears\nplums");
        assert_eq!(ts.len(), 3);
    }

    #[test]
    fn sub_questions_are_indexed() {
        let ts = extract_targets("beef sauce costs $1.85 and tea costs $2");
        let qs = build_sub_questions(&ts);
        assert_eq!(qs[0].prompt, "Where is the beef sauce?");
        assert_eq!(qs.iter().map(|q| q.index_t).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert!(build_sub_questions(&[]).is_empty());
    }

    #[test]
    fn word_lists_have_expected_size() {
        assert!(word_list(STOPWORDS).count() >= 150);
        assert!(word_list(VERBS).count() >= 200);
    }

    proptest! {
        #[test]
        fn spans_reconstruct_surfaces(text in "[a-zA-Z0-9 $.,%€\n-]{0,120}") {
            let ts = extract_targets(&text);
            let again = extract_targets(&text);
            prop_assert_eq!(&ts, &again);
            let ex = TargetExtractor::default();
            for t in &ts {
                prop_assert_eq!(t.span.slice(&text), Some(t.surface.as_str()));
                match t.kind {
                    TargetKind::Number => prop_assert!(is_number_surface(&t.surface)),
                    TargetKind::Noun => {
                        for w in t.surface.split_whitespace() {
                            prop_assert!(!ex.is_blocked(w));
                        }
                    }
                }
            }
        }
    }
}
