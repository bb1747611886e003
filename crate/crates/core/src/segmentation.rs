//! Sentence splitting and token-to-sentence assignment.
//!
//! A sentence ends at '.', '!' or '?' when the terminator is followed by
//! whitespace or the end of the text. There is no abbreviation handling, so
//! "Mr. X" splits after "Mr.". Offsets are byte offsets into the UTF-8 text;
//! for ASCII text these coincide with character offsets.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One token of a response: a vocabulary id and its half-open byte range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub char_start: usize,
    pub char_end: usize,
}

/// Response text together with its token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub text: String,
    pub tokens: Vec<Token>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    /// Checks ordering, non-overlap and bounds of the token ranges.
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0usize;
        for (i, t) in self.tokens.iter().enumerate() {
            if t.char_start >= t.char_end {
                return invalid(format!("token {i} has empty range"));
            }
            if t.char_start < prev_end {
                return invalid(format!("token {i} overlaps its predecessor"));
            }
            if t.char_end > self.text.len() {
                return invalid(format!("token {i} runs past the end of the text"));
            }
            prev_end = t.char_end;
        }
        Ok(())
    }

    /// Sentence spans over this response's tokens.
    pub fn sentence_spans(&self) -> Result<Vec<SentenceSpan>> {
        let sentences = split_sentences(&self.text);
        map_tokens_to_sentences(&self.tokens, &sentences)
    }
}

/// A sentence's byte range and its half-open token-index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub index: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub token_start: usize,
    pub token_end: usize,
}

impl SentenceSpan {
    pub fn token_range(&self) -> std::ops::Range<usize> {
        self.token_start..self.token_end
    }

    pub fn num_tokens(&self) -> usize {
        self.token_end - self.token_start
    }

    /// A single span covering tokens `0..n`, for response-level treatment.
    pub fn whole(n: usize, char_end: usize) -> Self {
        SentenceSpan {
            index: 0,
            char_start: 0,
            char_end,
            token_start: 0,
            token_end: n,
        }
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Split `text` into sentence byte ranges. Leading and trailing whitespace
/// is excluded from every range; terminators stay with their sentence.
pub fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut chars = text.char_indices().peekable();

    while let Some((i, c)) = chars.next() {
        if start.is_none() {
            if c.is_whitespace() {
                continue;
            }
            start = Some(i);
        }
        if is_terminator(c) {
            let at_boundary = match chars.peek() {
                None => true,
                Some(&(_, next)) => next.is_whitespace(),
            };
            if at_boundary {
                out.push((start.take().unwrap(), i + c.len_utf8()));
            }
        }
    }

    if let Some(s) = start {
        let end = s + text[s..].trim_end().len();
        if end > s {
            out.push((s, end));
        }
    }
    out
}

/// Assign every token to the sentence containing its start offset.
///
/// Tokens starting inside a gap between two sentences go to the preceding
/// sentence, and tokens past the last sentence go to the last one. Sentences
/// that receive no token are dropped and the remaining spans re-indexed, so
/// the result always partitions `0..tokens.len()` into non-empty ranges.
pub fn map_tokens_to_sentences(
    tokens: &[Token],
    sentences: &[(usize, usize)],
) -> Result<Vec<SentenceSpan>> {
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    if sentences.is_empty() {
        return invalid("tokens present but the text has no sentences");
    }
    for w in sentences.windows(2) {
        if w[0].1 > w[1].0 {
            return invalid("sentence ranges overlap or are unordered");
        }
    }

    let mut owner = Vec::with_capacity(tokens.len());
    let mut cursor = 0usize;
    for (j, tok) in tokens.iter().enumerate() {
        if tok.char_start < sentences[0].0 {
            return invalid(format!(
                "token {j} starts at {} before the first sentence at {}",
                tok.char_start, sentences[0].0
            ));
        }
        // Advance to the last sentence whose start is <= the token start.
        while cursor + 1 < sentences.len() && sentences[cursor + 1].0 <= tok.char_start {
            cursor += 1;
        }
        if let Some(&prev) = owner.last() {
            if cursor < prev {
                return invalid("tokens are not ordered by offset");
            }
        }
        owner.push(cursor);
    }

    let mut spans: Vec<SentenceSpan> = Vec::new();
    let mut j = 0;
    while j < owner.len() {
        let s = owner[j];
        let mut k = j;
        while k < owner.len() && owner[k] == s {
            k += 1;
        }
        spans.push(SentenceSpan {
            index: spans.len(),
            char_start: sentences[s].0,
            char_end: sentences[s].1,
            token_start: j,
            token_end: k,
        });
        j = k;
    }
    Ok(spans)
}

/// Checks that `spans` partition `0..num_tokens` in order with no empty span.
pub fn check_partition(spans: &[SentenceSpan], num_tokens: usize) -> Result<()> {
    let mut next = 0usize;
    for (i, s) in spans.iter().enumerate() {
        if s.token_start != next || s.token_end <= s.token_start {
            return invalid(format!("span {i} breaks the token partition"));
        }
        next = s.token_end;
    }
    if next != num_tokens {
        return invalid(format!(
            "spans cover {next} tokens but the sequence has {num_tokens}"
        ));
    }
    Ok(())
}
