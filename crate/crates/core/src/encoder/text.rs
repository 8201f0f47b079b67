use std::collections::BTreeMap;

use rand::Rng;

use super::block::{Block, BoundBlock};
use super::{split_rows, EncoderConfig, LatentEmbedding, Param, Parameters};
use crate::autograd::{Graph, Mask, NodeId, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;
use crate::text::{TokenId, TokenSequence};

/// Where one input row of the text transformer comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowSource {
    /// A row of the token-embedding table.
    Token(TokenId),
    /// Row `row` of the external tensor `source` (an injected `[$]` embedding).
    External { source: usize, row: usize },
}

/// One sequence of input rows and the row the latent is pooled at.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextInput {
    pub rows: Vec<RowSource>,
    pub pool: usize,
}

impl TextInput {
    pub fn plain(seq: &TokenSequence) -> Self {
        let rows: Vec<RowSource> = seq.ids.iter().map(|&id| RowSource::Token(id)).collect();
        Self {
            pool: rows.len().saturating_sub(1),
            rows,
        }
    }

    /// Collapses every keyword span into a single row chosen by `inject`;
    /// spans for which `inject` returns `None` keep their tokens.
    pub fn injected(seq: &TokenSequence, inject: impl Fn(usize) -> Option<(usize, usize)>) -> Self {
        let mut rows = Vec::with_capacity(seq.ids.len());
        let mut pos = 0;
        let mut spans = seq.keyword_spans.iter().enumerate().peekable();
        while pos < seq.ids.len() {
            if let Some(&(i, &(s, e))) = spans.peek() {
                if s == pos {
                    spans.next();
                    if let Some((source, row)) = inject(i) {
                        rows.push(RowSource::External { source, row });
                        pos = e;
                        continue;
                    }
                }
            }
            rows.push(RowSource::Token(seq.ids[pos]));
            pos += 1;
        }
        Self {
            pool: rows.len().saturating_sub(1),
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Causal transformer over token embeddings, pooled at the final (`[EOS]`)
/// position and projected into the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub token_embedding: Param,
    pub positional: Param,
    pub blocks: Vec<Block>,
    pub ln_final_g: Param,
    pub ln_final_b: Param,
    pub projection: Param,
}

pub(crate) struct BoundText {
    emb: NodeId,
    pos: NodeId,
    blocks: Vec<BoundBlock>,
    ln_g: NodeId,
    ln_b: NodeId,
    proj: NodeId,
}

impl BoundText {
    /// Node ids in [`Parameters::params`] order.
    pub(crate) fn ids(&self) -> Vec<NodeId> {
        let mut v = vec![self.emb, self.pos];
        for b in &self.blocks {
            v.extend_from_slice(b.ids());
        }
        v.extend([self.ln_g, self.ln_b, self.proj]);
        v
    }
}

const ENCODE_CHUNK: usize = 64;

impl TextEncoder {
    pub(crate) fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_text;
        Self {
            token_embedding: Param::normal("text.token_embedding", &[cfg.vocab_size, d], 1.0, rng),
            positional: Param::normal("text.positional", &[cfg.max_seq_len, d], 0.5, rng),
            blocks: (0..cfg.n_layers_text)
                .map(|l| Block::init(&format!("text.blocks.{l}"), d, cfg.n_heads_text, cfg.n_layers_text, rng))
                .collect(),
            ln_final_g: Param::filled("text.ln_final.gamma", &[d], 1.0),
            ln_final_b: Param::filled("text.ln_final.beta", &[d], 0.0),
            projection: Param::normal("text.projection", &[d, cfg.d_joint], 1.0 / (d as f64).sqrt(), rng),
        }
    }

    pub fn width(&self) -> usize {
        self.token_embedding.value.width()
    }

    pub fn max_seq_len(&self) -> usize {
        self.positional.value.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.value.rows()
    }

    /// The token-embedding row of `id`.
    pub fn embedding_row(&self, id: TokenId) -> Tensor {
        Tensor::vector(self.token_embedding.value.row(id as usize).to_vec())
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> BoundText {
        BoundText {
            emb: self.token_embedding.bind(g),
            pos: self.positional.bind(g),
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect(),
            ln_g: self.ln_final_g.bind(g),
            ln_b: self.ln_final_b.bind(g),
            proj: self.projection.bind(g),
        }
    }

    /// Encodes a batch of inputs inside `g`, returning a `[batch x d_joint]`
    /// node. `externals` supply the rows referenced by
    /// [`RowSource::External`].
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundText,
        inputs: &[TextInput],
        externals: &[NodeId],
    ) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Encoder("empty text batch".into()));
        }
        let d = self.width();
        for &e in externals {
            if g.value(e).width() != d {
                return Err(Error::Encoder(format!(
                    "injected width {} does not match token width {d}",
                    g.value(e).width()
                )));
            }
        }
        let vocab = self.vocab_size();
        let mut index = Vec::new();
        let mut pos_index = Vec::new();
        let mut segments = Vec::with_capacity(inputs.len());
        let mut pool = Vec::with_capacity(inputs.len());
        for input in inputs {
            if input.is_empty() || input.len() > self.max_seq_len() || input.pool >= input.len() {
                return Err(Error::Encoder(format!(
                    "sequence of {} rows (pooled at {}) does not fit max_seq_len {}",
                    input.len(),
                    input.pool,
                    self.max_seq_len()
                )));
            }
            for (p, row) in input.rows.iter().enumerate() {
                index.push(match *row {
                    RowSource::Token(id) if (id as usize) < vocab => (0, id as usize),
                    RowSource::Token(id) => return Err(Error::Encoder(format!("token id {id} outside vocabulary"))),
                    RowSource::External { source, row } => {
                        if source >= externals.len() {
                            return Err(Error::Encoder(format!("injection source {source} out of range")));
                        }
                        (source + 1, row)
                    }
                });
                pos_index.push((0, p));
            }
            pool.push((0, index.len() - input.len() + input.pool));
            segments.push(input.len());
        }
        let mut sources = vec![bound.emb];
        sources.extend_from_slice(externals);
        let x = g.gather_rows(&sources, &index)?;
        let p = g.gather_rows(&[bound.pos], &pos_index)?;
        let mut x = g.add(x, p)?;
        for b in &bound.blocks {
            x = b.forward(g, x, &segments, Mask::Causal)?;
        }
        let x = g.layer_norm(x, bound.ln_g, bound.ln_b, LAYER_NORM_EPS)?;
        let pooled = g.gather_rows(&[x], &pool)?;
        g.matmul(pooled, bound.proj)
    }

    /// Graph-free batched encoding.
    pub fn encode_inputs(&self, inputs: &[TextInput], externals: &[Tensor]) -> Result<Vec<LatentEmbedding>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let ext: Vec<NodeId> = externals.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward(&mut g, &bound, inputs, &ext)?;
        Ok(split_rows(g.value(out)))
    }

    /// Encodes plain sequences in fixed-size chunks, in parallel when enabled.
    pub fn encode_sequences(&self, seqs: &[TokenSequence]) -> Result<Vec<LatentEmbedding>> {
        let chunks = par::chunks(seqs.len(), ENCODE_CHUNK);
        let parts = par::try_map(&chunks, |r| {
            let inputs: Vec<TextInput> = seqs[r.clone()].iter().map(TextInput::plain).collect();
            self.encode_inputs(&inputs, &[])
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Encodes one sequence, replacing the keyword spans listed in `injected`
    /// (span index to a `d_text` row) by that row.
    pub fn encode_text(
        &self,
        tokens: &TokenSequence,
        injected: Option<&BTreeMap<usize, Tensor>>,
    ) -> Result<LatentEmbedding> {
        let Some(map) = injected else {
            return Ok(self.encode_inputs(&[TextInput::plain(tokens)], &[])?.remove(0));
        };
        let mut rows = Vec::with_capacity(map.len());
        let mut which = BTreeMap::new();
        for (&span, t) in map {
            if span >= tokens.keyword_spans.len() {
                return Err(Error::Encoder(format!(
                    "span index {span} out of range ({} spans)",
                    tokens.keyword_spans.len()
                )));
            }
            if t.len() != self.width() {
                return Err(Error::Encoder(format!(
                    "injected width {} does not match token width {}",
                    t.len(),
                    self.width()
                )));
            }
            which.insert(span, rows.len());
            rows.push(t.data());
        }
        let input = TextInput::injected(tokens, |i| which.get(&i).map(|&r| (0, r)));
        if rows.is_empty() {
            return Ok(self.encode_inputs(&[input], &[])?.remove(0));
        }
        let ext = Tensor::from_rows(&rows)?;
        Ok(self.encode_inputs(&[input], &[ext])?.remove(0))
    }
}

impl Parameters for TextEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.token_embedding, &self.positional];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend([&self.ln_final_g, &self.ln_final_b, &self.projection]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.token_embedding, &mut self.positional];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend([&mut self.ln_final_g, &mut self.ln_final_b, &mut self.projection]);
        v
    }
}
