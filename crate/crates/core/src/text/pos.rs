use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tokenize::TokenSequence;
use super::vocab::SLOT_TEXT;
use crate::error::{Error, Result};

const BUILTIN_LEXICON: &str = include_str!("../../data/lexicon.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    Det,
    Adj,
    Noun,
    Verb,
    Adv,
    Adp,
    Other,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Det => "DET",
            Tag::Adj => "ADJ",
            Tag::Noun => "NOUN",
            Tag::Verb => "VERB",
            Tag::Adv => "ADV",
            Tag::Adp => "ADP",
            Tag::Other => "OTHER",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "DET" => Tag::Det,
            "ADJ" => Tag::Adj,
            "NOUN" => Tag::Noun,
            "VERB" => Tag::Verb,
            "ADV" => Tag::Adv,
            "ADP" => Tag::Adp,
            "OTHER" => Tag::Other,
            _ => return Err(Error::Text(format!("unknown tag {s:?}"))),
        })
    }
}

/// Word lexicon plus suffix rules.
///
/// Lookup is exact word, then the longest matching suffix, then the default.
#[derive(Clone, Debug)]
pub struct PosLexicon {
    words: HashMap<String, Tag>,
    suffixes: Vec<(String, Tag)>,
    default: Tag,
}

impl PosLexicon {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LEXICON).expect("builtin lexicon parses")
    }

    /// TSV `word<TAB>TAG`. Lines after `#suffix` are `suffix<TAB>TAG`; a
    /// `#default<TAB>TAG` line sets the fallback (NOUN if absent). Other lines
    /// starting with `#` are comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut words = HashMap::new();
        let mut suffixes = Vec::new();
        let mut default = Tag::Noun;
        let mut in_suffix = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut parts = rest.split('\t');
                match parts.next() {
                    Some("suffix") => in_suffix = true,
                    Some("default") => {
                        let tag = parts
                            .next()
                            .ok_or_else(|| Error::Text(format!("lexicon line {}: #default needs a tag", n + 1)))?;
                        default = tag.trim().parse()?;
                    }
                    _ => {}
                }
                continue;
            }
            let (key, tag) = line
                .split_once('\t')
                .ok_or_else(|| Error::Text(format!("lexicon line {}: expected word<TAB>TAG", n + 1)))?;
            let tag: Tag = tag.trim().parse()?;
            let key = key.trim().to_lowercase();
            if in_suffix {
                suffixes.push((key, tag));
            } else {
                words.insert(key, tag);
            }
        }
        // longest suffix first; stable for equal lengths
        suffixes.sort_by_key(|s| std::cmp::Reverse(s.0.len()));
        Ok(Self {
            words,
            suffixes,
            default,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn insert(&mut self, word: &str, tag: Tag) {
        self.words.insert(word.to_lowercase(), tag);
    }

    pub fn tag_word(&self, word: &str) -> Tag {
        if word == SLOT_TEXT {
            return Tag::Other;
        }
        if let Some(&t) = self.words.get(word) {
            return t;
        }
        self.suffixes
            .iter()
            .find(|(s, _)| word.len() > s.len() && word.ends_with(s.as_str()))
            .map_or(self.default, |(_, t)| *t)
    }
}

/// One tag per surface word.
pub fn tag_pos(tokens: &TokenSequence, lex: &PosLexicon) -> Vec<Tag> {
    tokens.surface.iter().map(|w| lex.tag_word(w)).collect()
}
