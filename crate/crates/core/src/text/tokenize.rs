use serde::Serialize;

use super::sentences::Sentence;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Token {
    pub text: String,
    /// Byte span in the source text.
    pub start: usize,
    pub end: usize,
    pub sentence_initial: bool,
}

impl Token {
    pub fn is_capitalized(&self) -> bool {
        self.text.chars().next().is_some_and(char::is_uppercase)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenizedText {
    pub source: String,
    pub tokens: Vec<Token>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// True when only whitespace separates token `i - 1` from token `i`.
    pub(super) fn space_joined(&self, i: usize) -> bool {
        if i == 0 || i >= self.tokens.len() {
            return false;
        }
        let gap = &self.source[self.tokens[i - 1].end..self.tokens[i].start];
        !gap.is_empty() && gap.chars().all(char::is_whitespace)
    }
}

fn is_connector(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '-')
}

/// Word tokens are maximal alphanumeric runs; an apostrophe or hyphen stays
/// inside a token when it sits between two alphanumeric characters.
pub(super) fn tokenize(text: &str, sentences: &[Sentence]) -> TokenizedText {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < n {
        if !chars[i].1.is_alphanumeric() {
            i += 1;
            continue;
        }
        let begin = i;
        while i < n {
            let c = chars[i].1;
            if c.is_alphanumeric() {
                i += 1;
            } else if is_connector(c) && i + 1 < n && chars[i + 1].1.is_alphanumeric() {
                i += 2;
            } else {
                break;
            }
        }
        let start = chars[begin].0;
        let end = if i < n { chars[i].0 } else { text.len() };
        tokens.push(Token {
            text: text[start..end].to_string(),
            start,
            end,
            sentence_initial: false,
        });
    }

    let mut next = 0;
    for s in sentences {
        while next < tokens.len() && tokens[next].start < s.start {
            next += 1;
        }
        if next < tokens.len() && tokens[next].start < s.end {
            tokens[next].sentence_initial = true;
        }
    }

    TokenizedText {
        source: text.to_string(),
        tokens,
    }
}
