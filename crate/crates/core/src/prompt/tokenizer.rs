//! Deterministic reference tokenizer.
//!
//! Text is split into word runs (alphanumeric or `_`), single punctuation
//! characters and whitespace runs. A single space between two word tokens is
//! implicit and not emitted, so `"a a a"` is three tokens. Every other
//! whitespace run is emitted as its own token, which keeps
//! `detokenize(tokenize(s)) == s` exact.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Deref;

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new() -> Self {
        TokenSeq(Vec::new())
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [u32];
    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        TokenSeq(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Word,
    Punct,
    Space,
}

fn class_of(c: char) -> Class {
    if c.is_alphanumeric() || c == '_' {
        Class::Word
    } else if c.is_whitespace() {
        Class::Space
    } else {
        Class::Punct
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("token id {0} is not in the vocabulary")]
pub struct UnknownToken(pub u32);

/// Tokenizer with a vocabulary that grows on first sight of each piece.
///
/// Ids are assigned sequentially from `base_id`, so a fixed sequence of
/// `tokenize` calls always yields the same ids.
#[derive(Debug, Clone, Default)]
pub struct Tokenizer {
    base_id: u32,
    ids: BTreeMap<String, u32>,
    pieces: Vec<(String, Class)>,
}

impl Tokenizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_base_id(base_id: u32) -> Self {
        Tokenizer {
            base_id,
            ..Self::default()
        }
    }

    pub fn vocab_len(&self) -> usize {
        self.pieces.len()
    }

    pub fn tokenize(&mut self, text: &str) -> TokenSeq {
        let mut out = Vec::new();
        let mut prev_word = false;
        for (i, piece, class) in pieces(text) {
            if class == Class::Space && piece == " " && prev_word {
                // Elide only when a word follows.
                if text[i + 1..].chars().next().map(class_of) == Some(Class::Word) {
                    continue;
                }
            }
            out.push(self.intern(piece, class));
            prev_word = class == Class::Word;
        }
        TokenSeq(out)
    }

    pub fn detokenize(&self, tokens: &[u32]) -> Result<String, UnknownToken> {
        let mut out = String::new();
        let mut prev_word = false;
        for &id in tokens {
            let (piece, class) = id
                .checked_sub(self.base_id)
                .and_then(|i| self.pieces.get(i as usize))
                .ok_or(UnknownToken(id))?;
            if prev_word && *class == Class::Word {
                out.push(' ');
            }
            out.push_str(piece);
            prev_word = *class == Class::Word;
        }
        Ok(out)
    }

    /// Number of tokens `text` would produce, without growing the vocabulary.
    pub fn count(&self, text: &str) -> usize {
        let mut n = 0;
        let mut prev_word = false;
        for (i, piece, class) in pieces(text) {
            if class == Class::Space
                && piece == " "
                && prev_word
                && text[i + 1..].chars().next().map(class_of) == Some(Class::Word)
            {
                continue;
            }
            n += 1;
            prev_word = class == Class::Word;
        }
        n
    }

    fn intern(&mut self, piece: &str, class: Class) -> u32 {
        if let Some(&id) = self.ids.get(piece) {
            return id;
        }
        let id = self.base_id + self.pieces.len() as u32;
        self.ids.insert(String::from(piece), id);
        self.pieces.push((String::from(piece), class));
        id
    }
}

/// Splits into (byte offset, piece, class).
fn pieces(text: &str) -> impl Iterator<Item = (usize, &str, Class)> {
    let mut rest = text.char_indices().peekable();
    core::iter::from_fn(move || {
        let (start, c) = rest.next()?;
        let class = class_of(c);
        let mut end = start + c.len_utf8();
        if class != Class::Punct {
            while let Some(&(i, next)) = rest.peek() {
                if class_of(next) != class {
                    break;
                }
                end = i + next.len_utf8();
                rest.next();
            }
        }
        Some((start, &text[start..end], class))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty() {
        let mut t = Tokenizer::new();
        assert!(t.tokenize("").is_empty());
        assert_eq!(t.detokenize(&[]).unwrap(), "");
    }

    #[test]
    fn repetition_maps_to_equal_ids() {
        let mut t = Tokenizer::new();
        let toks = t.tokenize("a a a");
        assert_eq!(toks.len(), 3);
        assert_eq!(toks[0], toks[2]);
        assert_eq!(t.detokenize(&toks).unwrap(), "a a a");
    }

    #[test]
    fn whitespace_and_punctuation_survive() {
        let mut t = Tokenizer::new();
        for s in [
            "Write python code of a snake game.\n Code: ",
            "  leading and trailing  ",
            "a.b , c",
            "tabs\tand\nnewlines\r\n",
            "unicode: žluťoučký kůň — 日本語",
            " x",
            "x ",
        ] {
            let toks = t.tokenize(s);
            assert_eq!(t.detokenize(&toks).unwrap(), s);
            assert_eq!(t.count(s), toks.len());
            assert_eq!(t.tokenize(&t.detokenize(&toks).unwrap()), toks);
        }
    }

    #[test]
    fn punctuation_is_split() {
        let mut t = Tokenizer::new();
        assert_eq!(t.tokenize("code.").len(), 2);
        assert_eq!(t.tokenize("a . b").len(), 5);
        assert_eq!(t.tokenize("one two three four").len(), 4);
    }

    #[test]
    fn ids_are_deterministic() {
        let mut a = Tokenizer::with_base_id(100);
        let mut b = Tokenizer::with_base_id(100);
        assert_eq!(a.tokenize("x y z x"), b.tokenize("x y z x"));
        assert_eq!(a.tokenize("x")[0], 100);
        assert_eq!(a.detokenize(&[7]), Err(UnknownToken(7)));
    }
}
