use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::noise::{sample_noise, NoiseKind};
use super::projection::{ProjectionConfig, ProjectionModule};
use crate::autograd::{Graph, NodeId};
use crate::encoder::{DualEncoder, Parameters, TextInput};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;
use crate::text::{extract_keyword_spans, tag_pos, tokenize, MaskPolicy, PosLexicon, Tag, TokenSequence, Vocabulary};

/// What feeds φ during training. The target is always the clean caption
/// latent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Supervision {
    #[default]
    TextAnchored,
    /// φ sees the latent of the caption's paired image.
    ImageAnchored,
    /// Contrastive "a photo of [$]" objective; not provided.
    PhotoPrompt,
}

impl Supervision {
    pub fn label(self) -> &'static str {
        match self {
            Supervision::PhotoPrompt => "a photo of [$]",
            Supervision::ImageAnchored => "Ours, but [$] extracted by image encoder",
            Supervision::TextAnchored => "Our SMP design choice",
        }
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Supervision::TextAnchored => "text-anchored",
            Supervision::ImageAnchored => "image-anchored",
            Supervision::PhotoPrompt => "photo-prompt",
        })
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text-anchored" => Ok(Supervision::TextAnchored),
            "image-anchored" => Ok(Supervision::ImageAnchored),
            "photo-prompt" => Ok(Supervision::PhotoPrompt),
            _ => Err(Error::Trainer(format!("unknown supervision mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub dropout: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub mask_policy: MaskPolicy,
    pub noise: NoiseKind,
    pub supervision: Supervision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            batch: 64,
            dropout: 0.5,
            max_steps: 1000,
            eval_every: 100,
            patience: 5,
            mask_policy: MaskPolicy::AllKeywords,
            noise: NoiseKind::ScaledGaussian,
            supervision: Supervision::TextAnchored,
            seed: 0,
        }
    }
}

/// A caption ready for self-masking: tokens, tags, the constant target and
/// the φ input it is anchored on.
#[derive(Clone, Debug)]
pub struct SmpExample {
    pub tokens: TokenSequence,
    pub tags: Vec<Tag>,
    pub target: Vec<f64>,
    pub anchor: Vec<f64>,
}

/// The usable part of a corpus together with skip accounting.
#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    pub examples: Vec<SmpExample>,
    pub skipped: usize,
}

impl PreparedCorpus {
    pub fn used(&self) -> usize {
        self.examples.len()
    }
}

/// One corpus line with its optional paired image.
#[derive(Clone, Debug)]
pub struct CorpusLine {
    pub caption: String,
    pub image: Option<Tensor>,
}

impl CorpusLine {
    pub fn text(caption: impl Into<String>) -> Self {
        Self {
            caption: caption.into(),
            image: None,
        }
    }
}

/// Tokenizes and tags the corpus, drops captions without keywords under
/// `policy`, and precomputes every target latent with the frozen encoder.
pub fn prepare_corpus(
    lines: &[CorpusLine],
    encoder: &DualEncoder,
    vocab: &Vocabulary,
    lexicon: &PosLexicon,
    policy: MaskPolicy,
    supervision: Supervision,
) -> Result<PreparedCorpus> {
    if supervision == Supervision::PhotoPrompt {
        return Err(Error::NotImplemented("the contrastive \"a photo of [$]\" supervision"));
    }
    let max_len = encoder.config.max_seq_len;
    let mut kept = Vec::new();
    let mut skipped = 0;
    // a fixed probe decides usability; masking itself is redrawn every step
    let mut probe = ChaCha8Rng::seed_from_u64(0);
    for line in lines {
        let tokens = tokenize(&line.caption, vocab, max_len);
        let tags = tag_pos(&tokens, lexicon);
        match extract_keyword_spans(&tokens, &tags, policy, &mut probe) {
            Ok(_) => kept.push((line, tokens, tags)),
            Err(Error::NoKeywords) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyCorpus { skipped });
    }
    let seqs: Vec<TokenSequence> = kept.iter().map(|(_, t, _)| t.clone()).collect();
    let targets = encoder.text.encode_sequences(&seqs)?;
    let anchors = match supervision {
        Supervision::ImageAnchored => {
            let images = kept
                .iter()
                .map(|(l, _, _)| {
                    l.image.clone().ok_or_else(|| {
                        Error::Trainer("image-anchored supervision needs a paired image for every caption".into())
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            encoder.image.encode_images(&images)?
        }
        _ => targets.clone(),
    };
    let examples = kept
        .into_iter()
        .zip(targets.into_iter().zip(anchors))
        .map(|((_, tokens, tags), (t, a))| SmpExample {
            tokens,
            tags,
            target: t.values.to_vec(),
            anchor: a.values.to_vec(),
        })
        .collect();
    Ok(PreparedCorpus { examples, skipped })
}

fn require_frozen(encoder: &DualEncoder) -> Result<()> {
    if !encoder.is_frozen() {
        return Err(Error::Trainer(
            "encoders must be frozen before projection training".into(),
        ));
    }
    Ok(())
}

/// Self-masking loss of one batch inside a fresh graph.
///
/// Returns the graph, the loss node and φ's parameter nodes.
pub(crate) fn smp_graph(
    batch: &[&SmpExample],
    encoder: &DualEncoder,
    phi: &ProjectionModule,
    policy: MaskPolicy,
    noise: NoiseKind,
    rng: &mut ChaCha8Rng,
    dropout: bool,
) -> Result<(Graph, NodeId, Vec<NodeId>)> {
    if batch.is_empty() {
        return Err(Error::Trainer("empty batch".into()));
    }
    let dj = encoder.config.d_joint;
    let mut anchor = Vec::with_capacity(batch.len() * dj);
    let mut target = Vec::with_capacity(batch.len() * dj);
    let mut inputs = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let n = sample_noise(noise, dj, rng)?;
        anchor.extend(ex.anchor.iter().zip(&n).map(|(a, b)| a + b));
        target.extend_from_slice(&ex.target);
        let masked = extract_keyword_spans(&ex.tokens, &ex.tags, policy, rng)?;
        inputs.push(TextInput::injected(&masked, |_| Some((0, i))));
    }
    let mut g = Graph::new();
    let bp = phi.bind(&mut g);
    let bt = encoder.text.bind(&mut g);
    let z = g.constant(Tensor::new(vec![batch.len(), dj], anchor)?);
    let e = phi.forward(&mut g, &bp, z, dropout.then_some(&mut *rng))?;
    let zhat = encoder.text.forward(&mut g, &bt, &inputs, &[e])?;
    let target = g.constant(Tensor::new(vec![batch.len(), dj], target)?);
    let loss = g.mse(zhat, target)?;
    Ok((g, loss, bp.ids().to_vec()))
}

/// One self-masking step: loss and φ gradients in parameter order.
pub fn smp_step(
    batch: &[&SmpExample],
    encoder: &DualEncoder,
    phi: &ProjectionModule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Tensor>)> {
    require_frozen(encoder)?;
    let (g, loss, ids) = smp_graph(batch, encoder, phi, cfg.mask_policy, cfg.noise, rng, cfg.dropout > 0.0)?;
    let grads = g.backward(loss)?;
    let gs = ids
        .iter()
        .map(|&id| {
            grads
                .get(id)
                .cloned()
                .ok_or_else(|| Error::Trainer("projection parameter missing from graph".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((g.value(loss).item(), gs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub val_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub label: String,
    pub history: Vec<HistoryRow>,
    /// Validation score of the freshly initialized φ.
    pub initial_score: Option<f64>,
    pub best_score: Option<f64>,
    pub best_step: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub used: usize,
    pub skipped: usize,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "step,loss,val_score").unwrap();
        for r in &self.history {
            match r.val_score {
                Some(v) => writeln!(out, "{},{},{}", r.step, r.loss, v).unwrap(),
                None => writeln!(out, "{},{},", r.step, r.loss).unwrap(),
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Trains φ with self-masking and keeps the snapshot with the best
/// validation score. `validate` maps a φ to a score where higher is better.
pub fn train(
    corpus: &PreparedCorpus,
    encoder: &DualEncoder,
    cfg: &TrainConfig,
    mut validate: impl FnMut(&ProjectionModule) -> Result<f64>,
) -> Result<(ProjectionModule, TrainReport)> {
    require_frozen(encoder)?;
    if corpus.examples.is_empty() {
        return Err(Error::EmptyCorpus {
            skipped: corpus.skipped,
        });
    }
    if cfg.batch == 0 || cfg.eval_every == 0 {
        return Err(Error::Trainer("batch and eval_every must be positive".into()));
    }
    cfg.noise.validate()?;
    let pcfg = ProjectionConfig {
        d_joint: encoder.config.d_joint,
        d_text: encoder.config.d_text,
        dropout: cfg.dropout,
    };
    let mut phi = ProjectionModule::init(pcfg, cfg.seed)?;
    let mut report = TrainReport {
        label: cfg.supervision.to_string(),
        history: Vec::new(),
        initial_score: None,
        best_score: None,
        best_step: 0,
        steps_run: 0,
        stopped_early: false,
        used: corpus.used(),
        skipped: corpus.skipped,
    };
    if cfg.max_steps == 0 {
        return Ok((phi, report));
    }
    let initial = validate(&phi)?;
    report.initial_score = Some(initial);
    report.best_score = Some(initial);
    let mut best = phi.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &phi.params(),
    );
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut stale = 0;
    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.min(corpus.examples.len()) {
            if cursor == order.len() {
                order = (0..corpus.examples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&corpus.examples[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = smp_step(&batch, encoder, &phi, cfg, &mut rng)?;
        let refs: Vec<&Tensor> = grads.iter().collect();
        opt.step(&mut phi.params_mut(), &refs)?;
        let mut row = HistoryRow {
            step,
            loss,
            val_score: None,
        };
        report.steps_run = step;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let score = validate(&phi)?;
            row.val_score = Some(score);
            if score > report.best_score.unwrap_or(f64::NEG_INFINITY) {
                report.best_score = Some(score);
                report.best_step = step;
                best = phi.clone();
                stale = 0;
            } else {
                stale += 1;
            }
        }
        report.history.push(row);
        if stale >= cfg.patience.max(1) && step < cfg.max_steps {
            report.stopped_early = true;
            break;
        }
    }
    best.quantize();
    Ok((best, report))
}
