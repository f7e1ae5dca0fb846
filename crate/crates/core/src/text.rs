//! Small text helpers shared by chunking, attribution and parsers.

use alloc::string::String;

/// Collapse every run of whitespace into a single space and trim the ends.
pub fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Number of whitespace-delimited tokens.
pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Case-folded, punctuation-stripped, whitespace-collapsed form used for
/// evidence matching.
pub fn normalize_for_match(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for ch in s.chars() {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
        } else if ch.is_alphanumeric() {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.extend(ch.to_lowercase());
        }
        // punctuation and symbols are dropped without splitting words
    }
    out
}

/// Truncate to the first `max_words` words, whitespace collapsed.
pub fn first_words(s: &str, max_words: usize) -> String {
    let mut out = String::new();
    for word in s.split_whitespace().take(max_words) {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}
