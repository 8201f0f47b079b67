use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary, BOS, EOS, SLOT, SLOT_TEXT};
use crate::error::{Error, Result};

/// Half-open range over [`TokenSequence::ids`].
pub type Span = (usize, usize);

/// Token ids wrapped in `[BOS] ... [EOS]`, the lowercased words they came
/// from, and the spans selected for masking.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub surface: Vec<String>,
    pub keyword_spans: Vec<Span>,
}

impl TokenSequence {
    /// Number of tokens including `[BOS]` and `[EOS]`.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surface.is_empty()
    }

    /// Position of the pooled `[EOS]` token.
    pub fn eos_position(&self) -> usize {
        self.ids.len() - 1
    }

    /// Replaces every keyword span with a single `[$]` token. The spans of the
    /// result are the `[$]` positions.
    pub fn masked(&self) -> TokenSequence {
        let mut ids = vec![BOS];
        let mut surface = Vec::new();
        let mut spans = Vec::new();
        let mut pos = 1;
        let mut next = self.keyword_spans.iter().peekable();
        while pos < self.ids.len() - 1 {
            match next.peek() {
                Some(&&(s, e)) if s == pos => {
                    spans.push((ids.len(), ids.len() + 1));
                    ids.push(SLOT);
                    surface.push(SLOT_TEXT.to_string());
                    pos = e;
                    next.next();
                }
                _ => {
                    ids.push(self.ids[pos]);
                    surface.push(self.surface[pos - 1].clone());
                    pos += 1;
                }
            }
        }
        ids.push(EOS);
        TokenSequence {
            ids,
            surface,
            keyword_spans: spans,
        }
    }

    /// Surface words joined by single spaces.
    pub fn render(&self) -> String {
        self.surface.join(" ")
    }

    /// Positions of `[$]` tokens.
    pub fn slot_positions(&self) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == SLOT)
            .map(|(i, _)| i)
            .collect()
    }

    pub(crate) fn check_spans(&self) -> Result<()> {
        let mut prev_end = 1;
        for &(s, e) in &self.keyword_spans {
            if s < prev_end || e <= s || e > self.ids.len() - 1 {
                return Err(Error::Text(format!("invalid span ({s}, {e})")));
            }
            prev_end = e;
        }
        Ok(())
    }
}

/// Splits text into lowercase words. Punctuation separates words and is
/// dropped; the literal `[$]` survives as its own word.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            let (head, slot, tail) = match rest.find(SLOT_TEXT) {
                Some(i) => (&rest[..i], true, &rest[i + SLOT_TEXT.len()..]),
                None => (rest, false, ""),
            };
            let mut cur = String::new();
            for c in head.chars() {
                if c.is_alphanumeric() {
                    cur.extend(c.to_lowercase());
                } else if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
            }
            if !cur.is_empty() {
                words.push(cur);
            }
            if slot {
                words.push(SLOT_TEXT.to_string());
            }
            rest = tail;
        }
    }
    words
}

/// Tokenizes a caption, truncating words so the result fits `max_seq_len`.
///
/// Every `[$]` in the text becomes a one-token span.
///
/// # Panics
/// If `max_seq_len < 2`.
pub fn tokenize(caption: &str, vocab: &Vocabulary, max_seq_len: usize) -> TokenSequence {
    assert!(max_seq_len >= 2, "max_seq_len must leave room for [BOS] and [EOS]");
    let mut surface = split_words(caption);
    surface.truncate(max_seq_len - 2);
    let mut ids = Vec::with_capacity(surface.len() + 2);
    ids.push(BOS);
    ids.extend(surface.iter().map(|w| vocab.lookup(w)));
    ids.push(EOS);
    let keyword_spans = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == SLOT)
        .map(|(i, _)| (i, i + 1))
        .collect();
    TokenSequence {
        ids,
        surface,
        keyword_spans,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::UNK;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["gray", "cat", "sleeps", "on", "a", "pillow"])
    }

    #[test]
    fn empty_caption() {
        let t = tokenize("", &vocab(), 32);
        assert_eq!(t.ids, vec![BOS, EOS]);
        assert!(t.surface.is_empty());
    }

    #[test]
    fn lowercases_and_strips_punctuation() {
        let v = vocab();
        let t = tokenize("Gray cat", &v, 32);
        assert_eq!(t.ids, vec![BOS, v.lookup("gray"), v.lookup("cat"), EOS]);
        let t = tokenize("Gray, cat! zebra.", &v, 32);
        assert_eq!(t.surface, vec!["gray", "cat", "zebra"]);
        assert_eq!(t.ids[3], UNK);
    }

    #[test]
    fn truncation_keeps_eos() {
        let caption = vec!["cat"; 100].join(" ");
        let t = tokenize(&caption, &vocab(), 32);
        assert_eq!(t.ids.len(), 32);
        assert_eq!(*t.ids.last().unwrap(), EOS);
        assert_eq!(t.surface.len(), 30);
    }

    #[test]
    fn slot_marker_is_a_span() {
        let t = tokenize("a photo of [$] that is blue", &vocab(), 32);
        assert_eq!(t.surface[3], "[$]");
        assert_eq!(t.ids[4], SLOT);
        assert_eq!(t.keyword_spans, vec![(4, 5)]);
        let t = tokenize("x[$],y", &vocab(), 32);
        assert_eq!(t.surface, vec!["x", "[$]", "y"]);
    }

    #[test]
    fn masked_collapses_spans() {
        let v = vocab();
        let mut t = tokenize("gray cat sleeps on a pillow", &v, 32);
        t.keyword_spans = vec![(1, 3), (5, 7)];
        let m = t.masked();
        assert_eq!(m.render(), "[$] sleeps on [$]");
        assert_eq!(m.keyword_spans, vec![(1, 2), (4, 5)]);
        assert_eq!(m.ids.len(), 6);
    }
}
