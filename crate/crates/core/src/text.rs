//! Tokenization, sentence segmentation and passage chunking.
//!
//! Tokens are lowercased maximal runs of alphanumeric characters. Sentence
//! boundaries are terminal punctuation (`.`, `?`, `!`) followed by whitespace
//! or end of input. Chunk budgets are counted in these tokens.

use std::borrow::Borrow;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A lowercased, non-empty, whitespace-free term.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(String);

impl Token {
    /// Builds a token from an already-normalized surface form. Returns `None`
    /// if `surface` is empty or is not a single token under [`tokenize`].
    pub fn new(surface: &str) -> Option<Self> {
        let mut toks = tokenize(surface);
        if toks.len() == 1 && toks[0].0 == surface {
            toks.pop()
        } else {
            None
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Borrow<str> for Token {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Byte ranges of each token in `text`.
fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

pub fn tokenize(text: &str) -> Vec<Token> {
    token_spans(text)
        .into_iter()
        .map(|(s, e)| Token(text[s..e].to_lowercase()))
        .collect()
}

/// Joins tokens with single spaces; `tokenize(join_tokens(t)) == t`.
pub fn join_tokens(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_str());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub token_count: usize,
}

impl Sentence {
    fn new(text: &str) -> Self {
        Sentence {
            token_count: token_spans(text).len(),
            text: text.to_string(),
        }
    }

    pub fn tokens(&self) -> Vec<Token> {
        tokenize(&self.text)
    }
}

pub fn split_sentences(text: &str) -> Vec<Sentence> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !matches!(c, '.' | '?' | '!') {
            continue;
        }
        let end = i + c.len_utf8();
        let boundary = match chars.peek() {
            None => true,
            Some((_, next)) => next.is_whitespace(),
        };
        if boundary {
            push_trimmed(&mut out, &text[start..end]);
            start = end;
        }
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<Sentence>, piece: &str) {
    let piece = piece.trim();
    if !piece.is_empty() {
        out.push(Sentence::new(piece));
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub title: String,
    pub text: String,
}

/// Greedily packs consecutive sentences of `body` so that the title plus the
/// chunk stay within `max_tokens`. A sentence that cannot fit on its own is
/// emitted alone, cut at the budget.
pub fn chunk_passage(title: &str, body: &str, max_tokens: usize) -> Result<Vec<Chunk>> {
    let title_len = token_spans(title).len();
    if max_tokens <= title_len {
        return Err(Error::InvalidArgument(format!(
            "max_tokens {max_tokens} leaves no room after a {title_len}-token title"
        )));
    }
    let budget = max_tokens - title_len;

    let mut chunks = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut current_len = 0;
    let mut flush = |current: &mut Vec<String>, current_len: &mut usize| {
        if !current.is_empty() {
            chunks.push(Chunk {
                title: title.to_string(),
                text: current.join(" "),
            });
            current.clear();
            *current_len = 0;
        }
    };

    for sentence in split_sentences(body) {
        if sentence.token_count > budget {
            flush(&mut current, &mut current_len);
            let spans = token_spans(&sentence.text);
            let cut = spans[budget - 1].1;
            current.push(sentence.text[..cut].to_string());
            flush(&mut current, &mut current_len);
        } else {
            if current_len + sentence.token_count > budget {
                flush(&mut current, &mut current_len);
            }
            current_len += sentence.token_count;
            current.push(sentence.text);
        }
    }
    flush(&mut current, &mut current_len);
    Ok(chunks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strs(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(Token::as_str).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(
            strs(&tokenize("Friedreich's ataxia")),
            ["friedreich", "s", "ataxia"]
        );
        assert_eq!(strs(&tokenize("a  B a")), ["a", "b", "a"]);
        assert_eq!(strs(&tokenize("--x1,,Y2--")), ["x1", "y2"]);
    }

    #[test]
    fn token_new_rejects_non_tokens() {
        assert!(Token::new("abc").is_some());
        assert!(Token::new("").is_none());
        assert!(Token::new("a b").is_none());
        assert!(Token::new("ABC").is_none());
    }

    #[test]
    fn sentence_examples() {
        let s = split_sentences("A b. C d?");
        assert_eq!(
            s.iter().map(|s| s.text.as_str()).collect::<Vec<_>>(),
            ["A b.", "C d?"]
        );
        assert_eq!(s[0].token_count, 2);
        let s = split_sentences("no terminal punctuation");
        assert_eq!(s.len(), 1);
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn sentence_punctuation_inside_token_does_not_split() {
        let s = split_sentences("Version 3.14 is out! Really?\nYes");
        let texts: Vec<_> = s.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["Version 3.14 is out!", "Really?", "Yes"]);
    }

    #[test]
    fn chunk_packs_greedily() {
        let chunks = chunk_passage("t", "a b. c d. e f.", 5).unwrap();
        let texts: Vec<_> = chunks.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, ["a b. c d.", "e f."]);
        assert!(chunks.iter().all(|c| c.title == "t"));
    }

    #[test]
    fn chunk_single_sentence() {
        let chunks = chunk_passage("", "just one sentence here.", 200).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, "just one sentence here.");
    }

    #[test]
    fn chunk_truncates_oversized_sentence() {
        let chunks = chunk_passage("t", "w1 w2 w3 w4 w5 w6 w7 w8 w9 w10", 5).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(strs(&tokenize(&chunks[0].text)), ["w1", "w2", "w3", "w4"]);
    }

    #[test]
    fn chunk_rejects_budget_not_above_title() {
        assert!(chunk_passage("two words", "body.", 2).is_err());
        assert!(chunk_passage("two words", "body.", 3).is_ok());
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        let word = prop::sample::select(vec![
            "alpha", "b", "C3", "dé", "x-y", "z's", "...", "q?", "r!",
        ]);
        prop::collection::vec(
            (
                word,
                prop::sample::select(vec![" ", "  ", ". ", "? ", "\n"]),
            ),
            0..40,
        )
        .prop_map(|parts| parts.into_iter().map(|(w, s)| format!("{w}{s}")).collect())
    }

    proptest! {
        #[test]
        fn tokenize_idempotent_on_join(text in text_strategy()) {
            let once = tokenize(&text);
            prop_assert_eq!(tokenize(&join_tokens(&once)), once);
        }

        #[test]
        fn sentences_preserve_non_whitespace(text in text_strategy()) {
            let joined: String = split_sentences(&text).iter().map(|s| s.text.as_str()).collect();
            let strip = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
            prop_assert_eq!(strip(&joined), strip(&text));
            for s in split_sentences(&text) {
                prop_assert_eq!(s.token_count, tokenize(&s.text).len());
            }
        }

        #[test]
        fn chunks_cover_body_tokens(text in text_strategy(), max in 2usize..30) {
            let chunks = chunk_passage("t", &text, max).unwrap();
            let truncated = split_sentences(&text).iter().any(|s| s.token_count > max - 1);
            for c in &chunks {
                let n = tokenize(&c.text).len();
                prop_assert!(n < max);
            }
            if !truncated {
                let got: Vec<Token> = chunks.iter().flat_map(|c| tokenize(&c.text)).collect();
                prop_assert_eq!(got, tokenize(&text));
            }
        }

        #[test]
        fn chunk_count_monotone_in_budget(text in text_strategy(), max in 2usize..30, extra in 0usize..10) {
            let small = chunk_passage("t", &text, max).unwrap().len();
            let large = chunk_passage("t", &text, max + extra).unwrap().len();
            prop_assert!(large <= small);
        }
    }
}
