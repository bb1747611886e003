//! Word-level vocabulary and tokenizer for the toy language model.
//!
//! Text is split on whitespace; trailing '.', '!', '?' and ',' characters of
//! each chunk become their own tokens. Id 0 is the end-of-sequence marker and
//! id 1 stands for any out-of-vocabulary word.

use std::collections::HashMap;

use crate::error::{invalid, Result};
use crate::segmentation::{Token, TokenizedText};

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const EOS_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

fn is_punct(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | ',')
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build a vocabulary from `words`, after the two reserved entries.
    /// Duplicates are ignored.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        v.push(EOS.to_string());
        v.push(UNK.to_string());
        for w in words {
            v.push(w.into());
        }
        v
    }

    fn push(&mut self, w: String) {
        if !self.index.contains_key(&w) {
            self.index.insert(w.clone(), self.words.len() as u32);
            self.words.push(w);
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize(&self, text: &str) -> TokenizedText {
        let mut tokens = Vec::new();
        let mut chunk_start: Option<usize> = None;
        let bounded = text
            .char_indices()
            .chain(std::iter::once((text.len(), ' ')));
        for (i, c) in bounded {
            match (chunk_start, c.is_whitespace()) {
                (None, false) => chunk_start = Some(i),
                (Some(s), true) => {
                    self.push_chunk(text, s, i, &mut tokens);
                    chunk_start = None;
                }
                _ => {}
            }
        }
        TokenizedText {
            text: text.to_string(),
            tokens,
        }
    }

    fn push_chunk(&self, text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
        let chunk = &text[start..end];
        let word_len = chunk.trim_end_matches(is_punct).len();
        if word_len > 0 {
            out.push(Token {
                id: self.id(&chunk[..word_len]),
                char_start: start,
                char_end: start + word_len,
            });
        }
        for (k, c) in chunk[word_len..].char_indices() {
            let s = start + word_len + k;
            out.push(Token {
                id: self.id(&text[s..s + c.len_utf8()]),
                char_start: s,
                char_end: s + c.len_utf8(),
            });
        }
    }

    /// Render token ids as text: words separated by single spaces, with
    /// punctuation attached to the preceding word. The end marker is skipped.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id == EOS_ID {
                continue;
            }
            let Some(w) = self.word(id) else {
                return invalid(format!(
                    "token id {id} outside vocabulary of {}",
                    self.len()
                ));
            };
            let punct = w.chars().all(is_punct);
            if !out.is_empty() && !punct {
                out.push(' ');
            }
            out.push_str(w);
        }
        Ok(out)
    }
}
