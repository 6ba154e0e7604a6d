//! Whitespace word tokenizer with a frequency-built vocabulary.
//!
//! Five ids are reserved: BOS=0, EOS=1, PAD=2, UNK=3, CLS=4. The rest of
//! the vocabulary is filled from corpus tokens in descending frequency
//! (ties broken lexicographically) so that vocabularies are reproducible.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const CLS: usize = 4;

const RESERVED: [&str; 5] = ["<bos>", "<eos>", "<pad>", "<unk>", "<cls>"];

/// Split on Unicode whitespace.
pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Split into characters (the default metric tokenizer).
pub fn chars(text: &str) -> Vec<String> {
    text.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| c.to_string())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TokenVocab {
    /// Build from an iterator of texts, keeping at most `max_size` entries
    /// (reserved ids included).
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        assert!(max_size > RESERVED.len(), "vocabulary too small");
        let mut freq: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in words(text) {
                *freq.entry(w.to_string()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for (tok, _) in ranked {
            if tokens.len() >= max_size {
                break;
            }
            tokens.push(tok);
        }
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Token ids of a text, unknown words mapped to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        words(text).into_iter().map(|w| self.id(w)).collect()
    }

    /// Target-side encoding: BOS + tokens + EOS, truncated so that at most
    /// `max_tokens` content tokens remain.
    pub fn encode_target(&self, text: &str, max_tokens: usize) -> Vec<usize> {
        let mut ids = vec![BOS];
        for w in words(text).into_iter().take(max_tokens) {
            ids.push(self.id(w));
        }
        ids.push(EOS);
        ids
    }

    /// Join token ids back into text, skipping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id > CLS && id < self.tokens.len())
            .map(|&id| self.tokens[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_stable() {
        let v = TokenVocab::build(["a b c"], 16);
        assert_eq!(v.id("<bos>"), BOS);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<cls>"), CLS);
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = TokenVocab::build(["b a", "b c a", "b"], 16);
        // b:3, a:2, c:1
        assert_eq!(v.token(5), "b");
        assert_eq!(v.token(6), "a");
        assert_eq!(v.token(7), "c");
        // same-frequency tokens sort lexicographically
        let v2 = TokenVocab::build(["z y x"], 16);
        assert_eq!(v2.token(5), "x");
        assert_eq!(v2.token(7), "z");
    }

    #[test]
    fn unknown_maps_to_unk_and_decode_round_trips() {
        let v = TokenVocab::build(["red shirt"], 16);
        assert_eq!(v.id("nonexistent"), UNK);
        let ids = v.encode_target("red shirt", 10);
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(v.decode(&ids), "red shirt");
    }

    #[test]
    fn target_truncation_caps_content_tokens() {
        let v = TokenVocab::build(["a b c d e"], 16);
        let ids = v.encode_target("a b c d e", 3);
        assert_eq!(ids.len(), 5); // BOS + 3 + EOS
    }
}
