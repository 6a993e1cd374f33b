use std::collections::HashSet;

use serde::Serialize;

/// A sentence with its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Sentence {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

const TERMINATORS: [char; 3] = ['.', '?', '!'];
const CLOSERS: [char; 7] = ['"', '\'', ')', ']', '\u{201d}', '\u{2019}', '}'];
const OPENERS: [char; 6] = ['"', '\'', '(', '[', '\u{201c}', '\u{2018}'];

/// Splits on `.`, `?` or `!` when followed by end of text, or by whitespace
/// and an uppercase letter, possibly behind an opening quote or bracket. A
/// single period after a guarded abbreviation or a one-letter initial does
/// not split. Sentences are trimmed, so spans partition the non-whitespace
/// characters of `text`.
pub(super) fn split(text: &str, abbreviations: &HashSet<String>) -> Vec<Sentence> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_at = |i: usize| if i < n { chars[i].0 } else { text.len() };

    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < n {
        let c = chars[i].1;
        if start.is_none() && !c.is_whitespace() {
            start = Some(i);
        }
        if !TERMINATORS.contains(&c) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < n && TERMINATORS.contains(&chars[j].1) {
            j += 1;
        }
        let single_period = j == i + 1 && c == '.';
        let mut k = j;
        while k < n && CLOSERS.contains(&chars[k].1) {
            k += 1;
        }
        let boundary = if k == n {
            true
        } else if chars[k].1.is_whitespace() {
            let mut m = k;
            while m < n && chars[m].1.is_whitespace() {
                m += 1;
            }
            while m < n && OPENERS.contains(&chars[m].1) {
                m += 1;
            }
            m == n
                || (chars[m].1.is_uppercase()
                    && !(single_period && is_guarded(&chars[..i], abbreviations)))
        } else {
            false
        };
        if boundary {
            if let Some(s) = start.take() {
                push(&mut out, text, byte_at(s), byte_at(k));
            }
        }
        i = k.max(i + 1);
    }
    if let Some(s) = start {
        push(&mut out, text, byte_at(s), text.len());
    }
    out
}

fn push(out: &mut Vec<Sentence>, text: &str, start: usize, end: usize) {
    let trimmed = text[start..end].trim_end();
    if trimmed.is_empty() {
        return;
    }
    out.push(Sentence {
        text: trimmed.to_string(),
        start,
        end: start + trimmed.len(),
    });
}

/// Looks at the word immediately before a period.
fn is_guarded(before: &[(usize, char)], abbreviations: &HashSet<String>) -> bool {
    let word: String = before
        .iter()
        .rev()
        .take_while(|(_, c)| c.is_alphanumeric() || *c == '.')
        .map(|(_, c)| *c)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    let word = word.trim_start_matches('.');
    if word.is_empty() {
        return false;
    }
    let mut it = word.chars();
    if let (Some(first), None) = (it.next(), it.next()) {
        if first.is_uppercase() {
            return true;
        }
    }
    abbreviations.contains(&word.to_lowercase())
}
