//! Tokenization, part-of-speech tagging and keyword-span extraction.

mod keywords;
mod pos;
mod tokenize;
mod vocab;

pub use keywords::{extract_keyword_spans, MaskPolicy};
pub use pos::{tag_pos, PosLexicon, Tag};
pub use tokenize::{split_words, tokenize, Span, TokenSequence};
pub use vocab::{TokenId, Vocabulary, BOS, EOS, PAD, RESERVED, SLOT, SLOT_TEXT, UNK};
