use std::fmt;
use std::path::Path;

use crate::encoder::{DualEncoder, LatentEmbedding, TextInput};
use crate::error::{Error, Result};
use crate::par;
use crate::smp::ProjectionModule;
use crate::tensor::Tensor;
use crate::text::{split_words, tokenize, Vocabulary, SLOT_TEXT};

pub const COND_SLOT: &str = "[cond]";

/// A prompt with exactly one `[$]` and one `[cond]` placeholder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

const BUILTIN_TEMPLATES: &str = include_str!("../../data/templates.txt");

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.matches(SLOT_TEXT).count() != 1 || text.matches(COND_SLOT).count() != 1 {
            return Err(Error::Retrieval(format!(
                "template {text:?} must contain [$] and [cond] exactly once each"
            )));
        }
        Ok(Self { text: text.to_string() })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn fill(&self, cond: &str) -> String {
        self.text.replace(COND_SLOT, cond)
    }

    /// All shipped templates, the default first.
    pub fn builtin() -> Vec<PromptTemplate> {
        Self::parse_list(BUILTIN_TEMPLATES).expect("shipped templates are valid")
    }

    pub fn parse_list(text: &str) -> Result<Vec<PromptTemplate>> {
        text.lines().filter(|l| !l.trim().is_empty()).map(Self::parse).collect()
    }

    pub fn load_list(path: &Path) -> Result<Vec<PromptTemplate>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_list(&text)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            text: "a photo of [$] that [cond]".into(),
        }
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Builds composed queries: φ maps the reference latent into token space and
/// the result fills the `[$]` slot of the prompt.
pub struct QueryComposer<'a> {
    pub encoder: &'a DualEncoder,
    pub phi: &'a ProjectionModule,
    pub vocab: &'a Vocabulary,
    pub template: &'a PromptTemplate,
}

const COMPOSE_CHUNK: usize = 64;

impl QueryComposer<'_> {
    fn prompt_input(&self, cond: &str, row: usize) -> Result<TextInput> {
        let prompt = self.template.fill(cond);
        let words = split_words(&prompt).len();
        let max = self.encoder.config.max_seq_len;
        if words + 2 > max {
            return Err(Error::Retrieval(format!(
                "prompt {prompt:?} needs {} tokens, max_seq_len is {max}",
                words + 2
            )));
        }
        let seq = tokenize(&prompt, self.vocab, max);
        Ok(TextInput::injected(&seq, |_| Some((0, row))))
    }

    /// Normalized query latents for paired reference latents and conditions.
    pub fn compose(&self, refs: &[LatentEmbedding], conds: &[&str]) -> Result<Vec<LatentEmbedding>> {
        if refs.len() != conds.len() {
            return Err(Error::Retrieval(format!(
                "{} references for {} conditions",
                refs.len(),
                conds.len()
            )));
        }
        let chunks = par::chunks(refs.len(), COMPOSE_CHUNK);
        let parts = par::try_map(&chunks, |r| {
            let rows: Vec<&[f64]> = refs[r.clone()].iter().map(LatentEmbedding::as_slice).collect();
            let tokens = self.phi.project(&Tensor::from_rows(&rows)?)?;
            let inputs = conds[r.clone()]
                .iter()
                .enumerate()
                .map(|(i, c)| self.prompt_input(c, i))
                .collect::<Result<Vec<_>>>()?;
            let out = self.encoder.text.encode_inputs(&inputs, &[tokens])?;
            Ok::<_, Error>(out.iter().map(LatentEmbedding::normalize).collect::<Vec<_>>())
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Encodes the reference image, then composes one query.
    pub fn compose_image(&self, image: &Tensor, cond: &str) -> Result<LatentEmbedding> {
        let z = self.encoder.image.encode_image(image)?;
        Ok(self.compose(&[z], &[cond])?.remove(0))
    }
}
