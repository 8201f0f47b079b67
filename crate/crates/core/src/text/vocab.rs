use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
/// The pseudo-token whose embedding row is supplied by the projection module.
pub const SLOT: TokenId = 4;

pub const SLOT_TEXT: &str = "[$]";
pub const RESERVED: [&str; 5] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]", SLOT_TEXT];

/// Dense token ids; the five reserved ids come first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from words in first-seen order, skipping duplicates
    /// and reserved strings.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.insert(r);
        }
        for w in words {
            v.insert(w.as_ref());
        }
        v
    }

    fn insert(&mut self, word: &str) {
        if word.is_empty() || self.index.contains_key(word) {
            return;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(word.to_string());
        self.index.insert(word.to_string(), id);
    }

    /// One token per line; line `i` gets id `i + 5`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut v = Self::new(std::iter::empty::<&str>());
        for (n, line) in text.lines().enumerate() {
            let word = line.trim_end_matches('\r');
            if word.is_empty() || RESERVED.contains(&word) || v.index.contains_key(word) {
                return Err(Error::Text(format!(
                    "vocabulary line {}: invalid or duplicate token {word:?}",
                    n + 1
                )));
            }
            v.insert(word);
        }
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The file form read back by [`Vocabulary::parse`].
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::new(["cat", "dog", "cat"]);
        assert_eq!(v.len(), 7);
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.lookup(r), i as TokenId);
        }
        assert_eq!(v.lookup("dog"), 6);
        assert_eq!(v.lookup("zebra"), UNK);
    }

    #[test]
    fn file_round_trip_and_duplicates() {
        let v = Vocabulary::new(["gray", "cat"]);
        let back = Vocabulary::parse(&v.to_file_string()).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::parse("cat\ncat\n").is_err());
        assert!(Vocabulary::parse("[EOS]\n").is_err());
    }
}
