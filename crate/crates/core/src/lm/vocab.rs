//! Word-level vocabulary with a byte fallback for unknown words.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
const BYTE_BASE: usize = 3;
const NUM_BYTES: usize = 256;
/// First id available for words.
pub const FIRST_WORD: usize = BYTE_BASE + NUM_BYTES;

/// Lowercase, split on whitespace, then split each chunk into maximal runs
/// of alphanumerics/underscores and single punctuation characters.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars().flat_map(char::to_lowercase) {
            if c.is_alphanumeric() || c == '_' {
                word.push(c);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Bijective token ↔ id map. Ids `0..3` are pad, end-of-sequence and
/// unknown; the next 256 ids are raw bytes; words follow in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Build from the pre-tokenized words of `corpus`.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = corpus.into_iter().flat_map(pre_tokenize).collect();
        Self::from_words(words)
    }

    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "</s>".to_string(), "<unk>".to_string()];
        tokens.extend((0..NUM_BYTES).map(|b| format!("<0x{b:02X}>")));
        let words: BTreeSet<String> = words.into_iter().collect();
        tokens.extend(words.into_iter().filter(|w| !w.is_empty()));
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < BYTE_BASE
    }

    pub fn is_byte(&self, id: usize) -> bool {
        (BYTE_BASE..FIRST_WORD).contains(&id)
    }

    /// Whole-word entries (neither specials nor bytes).
    pub fn word_ids(&self) -> std::ops::Range<usize> {
        FIRST_WORD..self.tokens.len()
    }

    /// Encode text; unknown words become their UTF-8 bytes.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for w in pre_tokenize(text) {
            match self.index.get(&w) {
                Some(&id) if id >= FIRST_WORD => ids.push(id),
                _ => ids.extend(w.bytes().map(|b| BYTE_BASE + b as usize)),
            }
        }
        ids
    }

    /// Decode ids back to space-separated words (bytes are regrouped).
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, words: &mut Vec<String>| {
            if !bytes.is_empty() {
                words.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            if self.is_byte(id) {
                bytes.push((id - BYTE_BASE) as u8);
            } else {
                flush(&mut bytes, &mut words);
                if let Some(t) = self.token(id) {
                    words.push(t.to_string());
                }
            }
        }
        flush(&mut bytes, &mut words);
        words.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pre_tokenize_splits_punctuation() {
        assert_eq!(
            pre_tokenize("Question: Is it TRUE?"),
            ["question", ":", "is", "it", "true", "?"]
        );
        assert_eq!(pre_tokenize("not_entailment"), ["not_entailment"]);
        assert!(pre_tokenize("   ").is_empty());
    }

    #[test]
    fn specials_bytes_and_words() {
        let v = Vocabulary::build(["b a", "a c"]);
        assert_eq!(v.len(), FIRST_WORD + 3);
        assert_eq!(v.id("a"), Some(FIRST_WORD));
        assert_eq!(v.token(EOS), Some("</s>"));
        assert!(v.is_special(PAD));
        assert!(v.is_byte(FIRST_WORD - 1));
        assert_eq!(v.encode("A c"), vec![FIRST_WORD, FIRST_WORD + 2]);
        let oov = v.encode("zz");
        assert_eq!(oov.len(), 2);
        assert!(oov.iter().all(|&i| v.is_byte(i)));
        assert_eq!(v.decode(&v.encode("a zz c")), "a zz c");
    }

    #[test]
    fn bijective_after_serde() {
        let v = Vocabulary::build(["hello world"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
        for id in 0..v.len() {
            assert_eq!(back.id(back.token(id).unwrap()), Some(id));
        }
    }
}
