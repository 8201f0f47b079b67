//! The desk-scale pipeline shared by the command line and the acceptance
//! checks: world construction, encoder pre-training, evaluation and the
//! ablation sweeps.

use std::collections::HashMap;

use serde::Serialize;

use crate::encoder::{image_to_text_recall_at_1, pretrain_contrastive, DualEncoder, EncoderConfig, LatentEmbedding};
use crate::encoder::{PretrainConfig, PretrainReport, TextInput};
use crate::error::{Error, Result};
use crate::retrieval::{modality_gap, GalleryIndex, Metrics, PromptTemplate, QueryComposer, RankedResult, Truths};
use crate::smp::{prepare_corpus, train, CorpusLine, NoiseKind, ProjectionModule, TrainConfig, TrainReport};
use crate::synth::{
    build_cir_benchmark, fill, render, world_words, BenchmarkConfig, BenchmarkRecord, CirBenchmark, GalleryEntry,
    Mutation, Scene, CAPTION_TEMPLATES,
};
use crate::tensor::Tensor;
use crate::text::{tokenize, MaskPolicy, PosLexicon, TokenSequence, Vocabulary};

pub const IMAGE_SIDE: usize = 24;

/// Scenes kept out of encoder pre-training to measure its generalization.
pub fn is_pretrain_heldout(scene: &Scene) -> bool {
    scene.index() % 10 == 3
}

pub fn world_vocabulary() -> Vocabulary {
    Vocabulary::new(world_words())
}

pub type Pairs = Vec<(Tensor, TokenSequence)>;

/// Image-caption pairs for pre-training and the held-out check, one pair per
/// scene and caption template.
pub fn pretrain_pairs(vocab: &Vocabulary, max_seq_len: usize) -> (Pairs, Pairs) {
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for scene in Scene::all() {
        let img = render(&scene, IMAGE_SIDE);
        for t in CAPTION_TEMPLATES {
            let pair = (img.clone(), tokenize(&fill(t, &scene), vocab, max_seq_len));
            if is_pretrain_heldout(&scene) {
                heldout.push(pair);
            } else {
                train.push(pair);
            }
        }
    }
    (train, heldout)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoder: DualEncoder,
    pub vocab: Vocabulary,
    pub report: PretrainReport,
    /// Image-to-caption R@1 on held-out scenes, averaged over caption
    /// templates.
    pub heldout_recall: f64,
}

/// Desk defaults for encoder pre-training.
pub fn desk_pretrain_config(seed: u64) -> PretrainConfig {
    PretrainConfig {
        steps: 1500,
        batch: 64,
        lr: 1e-3,
        weight_decay: 0.01,
        seed,
    }
}

pub fn pretrain_encoder(cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let vocab = world_vocabulary();
    let config = EncoderConfig::desk(vocab.len());
    let (train_pairs, heldout) = pretrain_pairs(&vocab, config.max_seq_len);
    let (encoder, report) = pretrain_contrastive(&train_pairs, config, cfg)?;
    let heldout_recall = heldout_recall(&encoder, &heldout)?;
    Ok(PretrainOutcome {
        encoder,
        vocab,
        report,
        heldout_recall,
    })
}

/// Mean image-to-caption R@1 over templates; within a template every
/// held-out scene competes against every other held-out caption.
pub fn heldout_recall(encoder: &DualEncoder, pairs: &[(Tensor, TokenSequence)]) -> Result<f64> {
    let per = CAPTION_TEMPLATES.len();
    if pairs.is_empty() || !pairs.len().is_multiple_of(per) {
        return Err(Error::Encoder(
            "held-out pairs must hold every template per scene".into(),
        ));
    }
    let mut total = 0.0;
    for t in 0..per {
        let (imgs, seqs): (Vec<Tensor>, Vec<TokenSequence>) = pairs.iter().skip(t).step_by(per).cloned().unzip();
        let zi = encoder.image.encode_images(&imgs)?;
        let zt = encoder.text.encode_sequences(&seqs)?;
        total += image_to_text_recall_at_1(&zi, &zt)?;
    }
    Ok(total / per as f64)
}

/// A benchmark split together with the frozen-encoder artifacts needed to
/// score queries against it.
pub struct Evaluator<'a> {
    pub encoder: &'a DualEncoder,
    pub vocab: &'a Vocabulary,
    pub index: GalleryIndex,
    /// Raw image latents by item id.
    pub latents: HashMap<String, LatentEmbedding>,
    pub records: Vec<BenchmarkRecord>,
    pub truths: Truths,
    pub exclude_reference: bool,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        encoder: &'a DualEncoder,
        vocab: &'a Vocabulary,
        gallery: &[GalleryEntry],
        records: &[BenchmarkRecord],
    ) -> Result<Self> {
        let images: Vec<Tensor> = gallery
            .iter()
            .map(|g| render(&g.scene, encoder.config.image_side))
            .collect();
        let raw = encoder.image.encode_images(&images)?;
        let ids: Vec<String> = gallery.iter().map(|g| g.item_id.clone()).collect();
        let index = GalleryIndex::build(ids.clone(), &raw)?;
        let latents = ids.into_iter().zip(raw).collect();
        let truths = records
            .iter()
            .map(|r| (r.query_id.clone(), r.targets.iter().cloned().collect()))
            .collect();
        Ok(Self {
            encoder,
            vocab,
            index,
            latents,
            records: records.to_vec(),
            truths,
            exclude_reference: true,
        })
    }

    fn reference(&self, r: &BenchmarkRecord) -> Result<&LatentEmbedding> {
        self.latents
            .get(&r.reference_id)
            .ok_or_else(|| Error::Retrieval(format!("reference {} is not in the gallery", r.reference_id)))
    }

    fn rank(&self, queries: Vec<LatentEmbedding>) -> Result<Vec<RankedResult>> {
        let qs: Vec<(String, LatentEmbedding, Option<String>)> = self
            .records
            .iter()
            .zip(queries)
            .map(|(r, q)| {
                (
                    r.query_id.clone(),
                    q,
                    self.exclude_reference.then(|| r.reference_id.clone()),
                )
            })
            .collect();
        self.index.rank_all(&qs)
    }

    pub fn composed(&self, phi: &ProjectionModule, template: &PromptTemplate) -> Result<Vec<RankedResult>> {
        let refs = self
            .records
            .iter()
            .map(|r| self.reference(r).cloned())
            .collect::<Result<Vec<_>>>()?;
        let conds: Vec<&str> = self.records.iter().map(|r| r.condition.as_str()).collect();
        let composer = QueryComposer {
            encoder: self.encoder,
            phi,
            vocab: self.vocab,
            template,
        };
        self.rank(composer.compose(&refs, &conds)?)
    }

    /// Baseline: the condition text alone.
    pub fn text_only(&self) -> Result<Vec<RankedResult>> {
        let seqs: Vec<TokenSequence> = self
            .records
            .iter()
            .map(|r| tokenize(&r.condition, self.vocab, self.encoder.config.max_seq_len))
            .collect();
        self.rank(self.encoder.text.encode_sequences(&seqs)?)
    }

    /// Baseline: the reference image alone.
    pub fn image_only(&self) -> Result<Vec<RankedResult>> {
        let refs = self
            .records
            .iter()
            .map(|r| self.reference(r).cloned())
            .collect::<Result<Vec<_>>>()?;
        self.rank(refs)
    }

    /// Upper bound: ranks gallery items by how many of the edited
    /// reference's constrained attributes they share.
    pub fn oracle(&self) -> Result<Vec<RankedResult>> {
        self.records
            .iter()
            .map(|r| {
                let reference = Scene::parse_id(&r.reference_id)?;
                let want = Mutation::parse(&reference, &r.condition)?.apply(&reference);
                let mut items: Vec<(String, f64)> = self
                    .index
                    .ids()
                    .iter()
                    .filter(|id| !(self.exclude_reference && **id == r.reference_id))
                    .map(|id| {
                        let s = Scene::parse_id(id)?;
                        let score = [
                            s.object == want.object,
                            s.color == want.color,
                            s.background == want.background,
                        ]
                        .iter()
                        .filter(|m| **m)
                        .count();
                        Ok((id.clone(), score as f64))
                    })
                    .collect::<Result<_>>()?;
                items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                Ok(RankedResult {
                    query_id: r.query_id.clone(),
                    items,
                })
            })
            .collect()
    }

    pub fn metrics(&self, results: &[RankedResult]) -> Result<Metrics> {
        Metrics::compute(results, &self.truths)
    }

    pub fn composed_metrics(&self, phi: &ProjectionModule, template: &PromptTemplate) -> Result<Metrics> {
        let mut m = self.metrics(&self.composed(phi, template)?)?;
        m.modality_gap = Some(self.modality_gap(phi)?);
        Ok(m)
    }

    /// Gap between the gallery image latents and the text latents of
    /// "a photo of [$]" with each image's own projection in the slot.
    pub fn modality_gap(&self, phi: &ProjectionModule) -> Result<f64> {
        let images: Vec<LatentEmbedding> = self.index.ids().iter().map(|id| self.latents[id].clone()).collect();
        let rows: Vec<&[f64]> = images.iter().map(LatentEmbedding::as_slice).collect();
        let tokens = phi.project(&Tensor::from_rows(&rows)?)?;
        let seq = tokenize("a photo of [$]", self.vocab, self.encoder.config.max_seq_len);
        let inputs: Vec<TextInput> = (0..images.len())
            .map(|i| TextInput::injected(&seq, |_| Some((0, i))))
            .collect();
        let texts = self.encoder.text.encode_inputs(&inputs, &[tokens])?;
        modality_gap(&texts, &images)
    }

    pub fn recall_at_1(&self, phi: &ProjectionModule) -> Result<f64> {
        Ok(self
            .metrics(&self.composed(phi, &PromptTemplate::default())?)?
            .recall_at_1)
    }
}

/// Everything one seeded desk run needs besides the encoder.
pub struct DeskRun {
    pub bench: CirBenchmark,
    pub lexicon: PosLexicon,
}

impl DeskRun {
    pub fn new(seed: u64) -> Result<Self> {
        Ok(Self {
            bench: build_cir_benchmark(&BenchmarkConfig {
                seed,
                ..Default::default()
            })?,
            lexicon: PosLexicon::builtin(),
        })
    }

    pub fn corpus_lines(&self, side: usize) -> Vec<CorpusLine> {
        self.bench
            .corpus
            .iter()
            .map(|c| CorpusLine {
                caption: c.caption.clone(),
                image: c.scene.map(|s| render(&s, side)),
            })
            .collect()
    }

    /// Trains φ on the corpus, selecting on dev R@1.
    pub fn train_phi(
        &self,
        encoder: &DualEncoder,
        vocab: &Vocabulary,
        cfg: &TrainConfig,
    ) -> Result<(ProjectionModule, TrainReport)> {
        let lines = self.corpus_lines(encoder.config.image_side);
        let corpus = prepare_corpus(&lines, encoder, vocab, &self.lexicon, cfg.mask_policy, cfg.supervision)?;
        let dev = Evaluator::new(encoder, vocab, &self.bench.gallery, &self.bench.dev)?;
        train(&corpus, encoder, cfg, |phi| dev.recall_at_1(phi))
    }
}

/// Desk defaults for projection training.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        max_steps: 1000,
        eval_every: 100,
        patience: 5,
        seed,
        ..TrainConfig::default()
    }
}

/// One row of an ablation table.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub setting: String,
    pub seed: u64,
    pub dev_recall_at_1: f64,
    pub test: Metrics,
    pub best_step: usize,
}

pub fn noise_rows() -> Vec<(String, NoiseKind)> {
    NoiseKind::ablation_rows()
        .iter()
        .map(|k| (k.label().to_string(), *k))
        .collect()
}

pub fn masking_rows() -> Vec<(String, MaskPolicy)> {
    MaskPolicy::ablation_rows().iter().map(|p| (p.label(), *p)).collect()
}
