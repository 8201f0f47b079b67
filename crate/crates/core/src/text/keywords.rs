use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pos::Tag;
use super::tokenize::{Span, TokenSequence};
use super::vocab::SLOT;
use crate::error::{Error, Result};

/// Which tokens get replaced by `[$]` during self-masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MaskPolicy {
    /// Every maximal ADJ/NOUN run, with one preceding determiner attached.
    #[default]
    AllKeywords,
    /// One uniformly chosen word.
    RandomToken,
    /// Maximal NOUN runs.
    AllNouns,
    /// `min(n, count)` keyword spans chosen uniformly.
    NKeywords(usize),
    /// Maximal runs of words outside every keyword span.
    NonKeywords,
}

impl MaskPolicy {
    /// The masking ablation rows in table order.
    pub fn ablation_rows() -> [MaskPolicy; 7] {
        [
            MaskPolicy::NonKeywords,
            MaskPolicy::RandomToken,
            MaskPolicy::AllNouns,
            MaskPolicy::NKeywords(1),
            MaskPolicy::NKeywords(3),
            MaskPolicy::NKeywords(5),
            MaskPolicy::AllKeywords,
        ]
    }

    pub fn label(self) -> String {
        match self {
            MaskPolicy::NonKeywords => "All non-keyword tokens".into(),
            MaskPolicy::RandomToken => "Random token".into(),
            MaskPolicy::AllNouns => "All noun tokens".into(),
            MaskPolicy::NKeywords(1) => "1 keyword token".into(),
            MaskPolicy::NKeywords(n) => format!("{n} keyword tokens"),
            MaskPolicy::AllKeywords => "All keyword tokens".into(),
        }
    }
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskPolicy::AllKeywords => f.write_str("all-keywords"),
            MaskPolicy::RandomToken => f.write_str("random-token"),
            MaskPolicy::AllNouns => f.write_str("all-nouns"),
            MaskPolicy::NKeywords(n) => write!(f, "keywords-{n}"),
            MaskPolicy::NonKeywords => f.write_str("non-keywords"),
        }
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all-keywords" => MaskPolicy::AllKeywords,
            "random-token" => MaskPolicy::RandomToken,
            "all-nouns" => MaskPolicy::AllNouns,
            "non-keywords" => MaskPolicy::NonKeywords,
            other => match other.strip_prefix("keywords-").and_then(|n| n.parse().ok()) {
                Some(n) if n > 0 => MaskPolicy::NKeywords(n),
                _ => return Err(Error::Text(format!("unknown mask policy {s:?}"))),
            },
        })
    }
}

/// Maximal runs of words satisfying `pred`, as surface-index ranges.
fn runs(tags: &[Tag], pred: impl Fn(Tag) -> bool) -> Vec<Span> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &t) in tags.iter().enumerate() {
        match (pred(t), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, tags.len()));
    }
    out
}

fn keyword_runs(tags: &[Tag]) -> Vec<Span> {
    runs(tags, |t| matches!(t, Tag::Adj | Tag::Noun))
        .into_iter()
        .map(|(s, e)| {
            if s > 0 && tags[s - 1] == Tag::Det {
                (s - 1, e)
            } else {
                (s, e)
            }
        })
        .collect()
}

/// Selects the spans to mask and stores them on a copy of `tokens`.
///
/// Returns [`Error::NoKeywords`] when the policy selects nothing.
pub fn extract_keyword_spans(
    tokens: &TokenSequence,
    tags: &[Tag],
    policy: MaskPolicy,
    rng: &mut impl Rng,
) -> Result<TokenSequence> {
    if tags.len() != tokens.surface.len() {
        return Err(Error::Text(format!(
            "{} tags for {} words",
            tags.len(),
            tokens.surface.len()
        )));
    }
    // special tokens already in the sequence are never masked again
    let special: Vec<bool> = tokens.ids[1..tokens.ids.len() - 1]
        .iter()
        .map(|&id| id == SLOT)
        .collect();
    let spans: Vec<Span> = match policy {
        MaskPolicy::AllKeywords => keyword_runs(tags),
        MaskPolicy::AllNouns => runs(tags, |t| t == Tag::Noun),
        MaskPolicy::NKeywords(n) => {
            let all = keyword_runs(tags);
            let take = n.min(all.len());
            let mut picked: Vec<usize> = sample(rng, all.len(), take).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| all[i]).collect()
        }
        MaskPolicy::RandomToken => {
            let candidates: Vec<usize> = (0..tags.len()).filter(|&i| !special[i]).collect();
            if candidates.is_empty() {
                vec![]
            } else {
                let i = candidates[rng.random_range(0..candidates.len())];
                vec![(i, i + 1)]
            }
        }
        MaskPolicy::NonKeywords => {
            let mut inside = vec![false; tags.len()];
            for (s, e) in keyword_runs(tags) {
                inside[s..e].iter_mut().for_each(|v| *v = true);
            }
            let flags: Vec<Tag> = (0..tags.len())
                .map(|i| if inside[i] || special[i] { Tag::Other } else { Tag::Noun })
                .collect();
            runs(&flags, |t| t == Tag::Noun)
        }
    };
    let spans: Vec<Span> = spans
        .into_iter()
        .filter(|&(s, e)| !special[s..e].iter().any(|&x| x))
        .map(|(s, e)| (s + 1, e + 1))
        .collect();
    if spans.is_empty() {
        return Err(Error::NoKeywords);
    }
    let out = TokenSequence {
        keyword_spans: spans,
        ..tokens.clone()
    };
    out.check_spans()?;
    Ok(out)
}
