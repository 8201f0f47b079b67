use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use super::index::RankedResult;
use crate::encoder::LatentEmbedding;
use crate::error::{Error, Result};

/// Ground-truth item ids per query id.
pub type Truths = HashMap<String, BTreeSet<String>>;

fn truth_for<'a>(truths: &'a Truths, r: &RankedResult) -> Result<&'a BTreeSet<String>> {
    match truths.get(&r.query_id) {
        Some(t) if !t.is_empty() => Ok(t),
        _ => Err(Error::Retrieval(format!("query {} has no ground truth", r.query_id))),
    }
}

/// Fraction of queries with at least one ground-truth item in the top `k`.
pub fn recall_at_k(results: &[RankedResult], truths: &Truths, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidK(k));
    }
    if results.is_empty() {
        return Err(Error::Retrieval("no results to score".into()));
    }
    let mut hits = 0usize;
    for r in results {
        let t = truth_for(truths, r)?;
        if r.items.iter().take(k).any(|(id, _)| t.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Average precision truncated at `k`, normalized by `min(k, |truth|)`.
pub fn average_precision_at_k(ranked: &[String], truth: &BTreeSet<String>, k: usize) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranked.iter().take(k).enumerate() {
        if truth.contains(id) {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    sum / k.min(truth.len()) as f64
}

pub fn map_at_k(results: &[RankedResult], truths: &Truths, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidK(k));
    }
    if results.is_empty() {
        return Err(Error::Retrieval("no results to score".into()));
    }
    let mut total = 0.0;
    for r in results {
        let t = truth_for(truths, r)?;
        let ids: Vec<String> = r.items.iter().take(k).map(|(id, _)| id.clone()).collect();
        total += average_precision_at_k(&ids, t, k);
    }
    Ok(total / results.len() as f64)
}

/// Distance between the centroids of the normalized image and text latents.
pub fn modality_gap(text: &[LatentEmbedding], image: &[LatentEmbedding]) -> Result<f64> {
    if text.is_empty() || image.is_empty() {
        return Err(Error::Retrieval(
            "modality gap needs non-empty text and image sets".into(),
        ));
    }
    let d = text[0].dim();
    if text.iter().chain(image).any(|l| l.dim() != d) {
        return Err(Error::Retrieval("latents differ in width".into()));
    }
    let centroid = |set: &[LatentEmbedding]| {
        let mut c = vec![0.0; d];
        for l in set {
            let n = l.normalize();
            for (a, b) in c.iter_mut().zip(n.as_slice()) {
                *a += b;
            }
        }
        c.iter_mut().for_each(|v| *v /= set.len() as f64);
        c
    };
    let (ct, ci) = (centroid(text), centroid(image));
    Ok(ct.iter().zip(&ci).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// The metric suite reported by evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub queries: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub map_at_5: f64,
    pub map_at_10: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modality_gap: Option<f64>,
}

impl Metrics {
    pub fn compute(results: &[RankedResult], truths: &Truths) -> Result<Self> {
        Ok(Self {
            queries: results.len(),
            recall_at_1: recall_at_k(results, truths, 1)?,
            recall_at_5: recall_at_k(results, truths, 5)?,
            recall_at_10: recall_at_k(results, truths, 10)?,
            map_at_5: map_at_k(results, truths, 5)?,
            map_at_10: map_at_k(results, truths, 10)?,
            modality_gap: None,
        })
    }
}
