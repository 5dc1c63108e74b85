//! Closed word-level vocabulary shared by every template.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

/// Number tokens `0..=MAX_NUMBER` follow the specials.
pub const MAX_NUMBER: u32 = 99;
const NUMBER_BASE: u32 = 3;

const WORDS: &[&str] = &[
    // classes
    "car",
    "truck",
    "pedestrian",
    "barrier", //
    // captions and narration
    "about",
    "meters",
    "is",
    "moving",
    "not",
    "will",
    "move",
    "stay",
    "still", //
    // directions
    "front",
    "back",
    "left",
    "right", //
    // planning
    "keep",
    "going",
    "straight",
    "because",
    "the",
    "road",
    "clear",
    "stop",
    "after",
    "light",
    "red",
    "to",
    "yield", //
    // prompts
    "describe",
    "object",
    "predict",
    "what",
    "should",
    "ego",
    "do", //
    // questions and answers
    "there",
    "a",
    "how",
    "many",
    "are",
    "nearest",
    "yes",
    "no",
    "any",
    "object",
    "stopped",
    "which",
    "direction",
    "far",
    "scene",
    "in",
    "of",
    "it",
];

pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn build() -> Self {
        let mut words: Vec<String> = vec!["<pad>".into(), "<bos>".into(), "<eos>".into()];
        for n in 0..=MAX_NUMBER {
            words.push(n.to_string());
        }
        for w in WORDS {
            if !words.iter().any(|x| x == w) {
                words.push((*w).to_string());
            }
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    pub fn get() -> &'static Vocab {
        static V: OnceLock<Vocab> = OnceLock::new();
        V.get_or_init(Vocab::build)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::contract(format!("word `{word}` is not in the vocabulary")))
    }

    pub fn number(&self, n: u32) -> u32 {
        NUMBER_BASE + n.min(MAX_NUMBER)
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::UnknownToken(id))
    }

    /// Whitespace tokenization of template text.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Space-joined words, stopping at the first EOS.
    pub fn decode(&self, tokens: &[u32]) -> Result<String> {
        let mut out = Vec::new();
        for &t in tokens {
            if t == EOS {
                break;
            }
            out.push(self.word(t)?);
        }
        Ok(out.join(" "))
    }

    pub fn check(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.len()) {
            Some(&t) => Err(Error::UnknownToken(t)),
            None => Ok(()),
        }
    }
}

pub fn vocab_size() -> usize {
    Vocab::get().len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let v = Vocab::get();
        let toks = v.encode("car about 20 meters front is moving").unwrap();
        assert_eq!(
            v.decode(&toks).unwrap(),
            "car about 20 meters front is moving"
        );
        assert_eq!(toks[2], v.number(20));
    }

    #[test]
    fn size_is_near_two_hundred() {
        let n = vocab_size();
        assert!((150..=220).contains(&n), "{n}");
    }

    #[test]
    fn unknown_words_and_ids_are_errors() {
        let v = Vocab::get();
        assert!(v.encode("flying saucer").is_err());
        assert!(matches!(v.word(10_000), Err(Error::UnknownToken(10_000))));
    }
}
