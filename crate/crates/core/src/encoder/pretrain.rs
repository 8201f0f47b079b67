use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DualEncoder, EncoderConfig, LatentEmbedding, Parameters, TextInput};
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;
use crate::text::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 64,
            lr: 3e-4,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Training loss at every step, before that step's update.
    pub losses: Vec<f64>,
}

const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_091; // ln 100

/// Trains both towers with a symmetric InfoNCE loss and freezes them.
///
/// Batches never hold two pairs that share an image, so every row of the
/// similarity matrix has exactly one positive.
pub fn pretrain_contrastive(
    pairs: &[(Tensor, TokenSequence)],
    config: EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<(DualEncoder, PretrainReport)> {
    if cfg.batch < 2 {
        return Err(Error::BatchTooSmall(cfg.batch));
    }
    let mut groups: HashMap<Vec<u64>, usize> = HashMap::new();
    let group: Vec<usize> = pairs
        .iter()
        .map(|(img, _)| {
            let key = img.data().iter().map(|v| v.to_bits()).collect();
            let next = groups.len();
            *groups.entry(key).or_insert(next)
        })
        .collect();
    if groups.len() < cfg.batch {
        return Err(Error::Encoder(format!(
            "{} distinct images cannot fill a batch of {}",
            groups.len(),
            cfg.batch
        )));
    }

    let mut model = DualEncoder::init(config, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &model.params(),
    );
    let mut report = PretrainReport::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for _ in 0..cfg.steps {
        let batch = next_batch(&group, cfg.batch, &mut order, &mut cursor, &mut rng);
        let images: Vec<&Tensor> = batch.iter().map(|&i| &pairs[i].0).collect();
        let texts: Vec<TextInput> = batch.iter().map(|&i| TextInput::plain(&pairs[i].1)).collect();

        let mut g = Graph::new();
        let bt = model.text.bind(&mut g);
        let bi = model.image.bind(&mut g);
        let scale = model.logit_scale.bind(&mut g);
        let zt = model.text.forward(&mut g, &bt, &texts, &[])?;
        let zi = model.image.forward(&mut g, &bi, &images)?;
        let loss = info_nce(&mut g, zi, zt, scale)?;
        report.losses.push(g.value(loss).item());

        let grads = g.backward(loss)?;
        let mut ids = bt.ids();
        ids.extend(bi.ids());
        ids.push(scale);
        let gs: Vec<&Tensor> = ids
            .iter()
            .map(|&id| {
                grads
                    .get(id)
                    .ok_or_else(|| Error::Encoder("parameter missing from graph".into()))
            })
            .collect::<Result<_>>()?;
        opt.step(&mut model.params_mut(), &gs)?;
        let s = model.logit_scale.value.item().min(MAX_LOGIT_SCALE);
        model.logit_scale.value = Tensor::scalar(s);
    }
    model.quantize();
    model.freeze();
    Ok((model, report))
}

/// Symmetric cross-entropy over the cosine-similarity matrix.
fn info_nce(g: &mut Graph, zi: NodeId, zt: NodeId, log_scale: NodeId) -> Result<NodeId> {
    let n = g.value(zi).rows();
    let zi = g.l2_normalize_rows(zi)?;
    let zt = g.l2_normalize_rows(zt)?;
    let sim = g.matmul_nt(zi, zt)?;
    let logits = g.mul_exp(sim, log_scale)?;
    let targets: Vec<usize> = (0..n).collect();
    let li = g.cross_entropy(logits, &targets)?;
    let lt_logits = g.transpose(logits)?;
    let lt = g.cross_entropy(lt_logits, &targets)?;
    let total = g.add(li, lt)?;
    g.scale(total, 0.5)
}

/// Draws the next `size` indices from an epoch-wise shuffle, deferring any
/// pair whose image group is already in the batch.
fn next_batch(
    group: &[usize],
    size: usize,
    order: &mut Vec<usize>,
    cursor: &mut usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut batch = Vec::with_capacity(size);
    let mut used = std::collections::HashSet::new();
    let mut deferred = Vec::new();
    while batch.len() < size {
        if *cursor >= order.len() {
            let mut fresh: Vec<usize> = (0..group.len()).collect();
            fresh.shuffle(rng);
            deferred.append(&mut fresh);
            *order = std::mem::take(&mut deferred);
            *cursor = 0;
        }
        let i = order[*cursor];
        *cursor += 1;
        if used.insert(group[i]) {
            batch.push(i);
        } else {
            deferred.push(i);
        }
    }
    // deferred pairs go back to the front of the remaining order
    if !deferred.is_empty() {
        let rest = order.split_off(*cursor);
        order.clear();
        order.extend(deferred);
        order.extend(rest);
        *cursor = 0;
    }
    batch
}

/// Fraction of images whose own caption ranks first among all captions.
pub fn image_to_text_recall_at_1(images: &[LatentEmbedding], texts: &[LatentEmbedding]) -> Result<f64> {
    if images.len() != texts.len() || images.is_empty() {
        return Err(Error::Encoder("image/text lists must be non-empty and paired".into()));
    }
    let texts: Vec<LatentEmbedding> = texts.iter().map(LatentEmbedding::normalize).collect();
    let hits = images
        .iter()
        .enumerate()
        .filter(|(i, img)| {
            let img = img.normalize();
            let scores: Vec<f64> = texts.iter().map(|t| img.cosine(t)).collect();
            let best = (0..scores.len())
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
                .unwrap();
            best == *i
        })
        .count();
    Ok(hits as f64 / images.len() as f64)
}
