//! Text normalization shared by the consistency check and answer scoring.

const CURRENCY: &[char] = &['$', '€', '£', '¥'];

/// Parses a numeric string after removing currency symbols, thousands
/// separators, a trailing `%`, and one trailing period.
pub fn parse_decimal(s: &str) -> Option<f64> {
    let mut t: String = s
        .trim()
        .chars()
        .filter(|c| !CURRENCY.contains(c) && *c != ',')
        .collect();
    if t.ends_with('.') {
        t.pop();
    }
    if t.ends_with('%') {
        t.pop();
    }
    let t = t.trim();
    let digits = t.strip_prefix('-').unwrap_or(t);
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit() || c == '.') {
        return None;
    }
    if !digits.chars().any(|c| c.is_ascii_digit()) {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn relative_eq(a: f64, b: f64, rel: f64) -> bool {
    if a == b {
        return true;
    }
    (a - b).abs() <= rel * a.abs().max(b.abs())
}

/// Lowercases and strips punctuation, returning whitespace-separated tokens.
pub fn word_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Normalized edit similarity in `[0, 1]`.
pub fn edit_similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(a, b)
}
