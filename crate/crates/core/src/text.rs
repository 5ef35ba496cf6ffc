//! Canonical tokenization and the two lexical reward components.
//!
//! A word is a maximal run of alphanumeric characters after NFC normalization
//! and lowercasing. Trigrams are word-level. Everything here is pure.

use std::collections::HashSet;

use unicode_normalization::UnicodeNormalization;

/// A text together with its canonical word and trigram decomposition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub original: String,
    pub words: Vec<String>,
}

impl TokenizedText {
    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    /// Consecutive word 3-tuples; `max(0, words - 2)` of them.
    pub fn trigrams(&self) -> impl Iterator<Item = [&str; 3]> + '_ {
        self.words
            .windows(3)
            .map(|w| [w[0].as_str(), w[1].as_str(), w[2].as_str()])
    }

    pub fn trigram_count(&self) -> usize {
        self.words.len().saturating_sub(2)
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Splits `text` into canonical words.
pub fn words(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in normalized.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

pub fn tokenize(text: &str) -> TokenizedText {
    TokenizedText {
        original: text.to_owned(),
        words: words(text),
    }
}

/// Number of words divided by 100. Deliberately not normalized by any target
/// length and uncapped.
pub fn length_incentive(response: &TokenizedText) -> f64 {
    response.word_count() as f64 / 100.0
}

/// Length incentive with an optional upper clamp, used by the sandbox.
pub fn length_incentive_capped(response: &TokenizedText, cap: Option<f64>) -> f64 {
    let li = length_incentive(response);
    match cap {
        Some(c) => li.min(c),
        None => li,
    }
}

/// Unique-trigram ratio. Responses with fewer than three words have no
/// trigrams and score 1.0.
pub fn repetition_penalty(response: &TokenizedText) -> f64 {
    let total = response.trigram_count();
    if total == 0 {
        return 1.0;
    }
    let unique: HashSet<[&str; 3]> = response.trigrams().collect();
    unique.len() as f64 / total as f64
}

/// Splits on `.`, `?` or `!` when followed by whitespace or end of text.
///
/// There is no abbreviation list, so "e.g. foo" becomes two sentences.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((idx, ch)) = iter.next() {
        if matches!(ch, '.' | '?' | '!') {
            let boundary = match iter.peek() {
                None => true,
                Some((_, next)) => next.is_whitespace(),
            };
            if boundary {
                let end = idx + ch.len_utf8();
                push_trimmed(&mut sentences, &text[start..end]);
                start = end;
            }
        }
    }
    push_trimmed(&mut sentences, &text[start..]);
    sentences
}

fn push_trimmed(out: &mut Vec<String>, piece: &str) {
    let trimmed = piece.trim();
    if !trimmed.is_empty() {
        out.push(trimmed.to_owned());
    }
}

const USER_MARKERS: &[&str] = &["user:", "human:"];
const ASSISTANT_MARKERS: &[&str] = &["assistant:", "gpt:", "ai:"];

/// Returns the last user turn of a conversation transcript.
///
/// Turns are recognized by a line starting with `User:`/`Human:` or
/// `Assistant:`/`GPT:`/`AI:` (case-insensitive). Text without any user marker
/// is treated as a single-turn query and returned trimmed.
pub fn last_user_turn(conversation: &str) -> &str {
    let mut last_user: Option<(usize, usize)> = None;
    let mut open: Option<usize> = None;
    let mut offset = 0;
    for line in conversation.split_inclusive('\n') {
        let trimmed = line.trim_start();
        let lead = line.len() - trimmed.len();
        let lower = trimmed.to_lowercase();
        if let Some(m) = USER_MARKERS.iter().find(|m| lower.starts_with(**m)) {
            if let Some(s) = open.take() {
                last_user = Some((s, offset));
            }
            open = Some(offset + lead + m.len());
        } else if ASSISTANT_MARKERS.iter().any(|m| lower.starts_with(m)) {
            if let Some(s) = open.take() {
                last_user = Some((s, offset));
            }
        }
        offset += line.len();
    }
    if let Some(s) = open {
        last_user = Some((s, conversation.len()));
    }
    match last_user {
        Some((s, e)) => conversation[s..e].trim(),
        None => conversation.trim(),
    }
}
