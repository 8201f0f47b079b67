use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::checkpoint::Container;
use crate::encoder::LatentEmbedding;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Unit-normalized image latents with their item ids.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    ids: Vec<String>,
    rows: Vec<Vec<f64>>,
}

/// Items for one query, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedResult {
    pub query_id: String,
    pub items: Vec<(String, f64)>,
}

const KIND: &str = "gallery-index";

impl GalleryIndex {
    pub fn build(ids: Vec<String>, latents: &[LatentEmbedding]) -> Result<Self> {
        if ids.len() != latents.len() {
            return Err(Error::Retrieval(format!(
                "{} ids for {} latents",
                ids.len(),
                latents.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Retrieval(format!("duplicate item id {dup}")));
        }
        if let Some(d) = latents.first().map(LatentEmbedding::dim) {
            if latents.iter().any(|l| l.dim() != d) {
                return Err(Error::Retrieval("latents differ in width".into()));
            }
        }
        let rows = latents.iter().map(|l| l.normalize().values.to_vec()).collect();
        Ok(Self { ids, rows })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn latents(&self) -> Vec<LatentEmbedding> {
        self.rows
            .iter()
            .map(|r| LatentEmbedding {
                values: Tensor::vector(r.clone()),
                normalized: true,
            })
            .collect()
    }

    /// Cosine ranking of every item, ties by ascending id, optionally without
    /// `exclude`.
    pub fn rank(&self, query_id: &str, query: &LatentEmbedding, exclude: Option<&str>) -> Result<RankedResult> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if query.dim() != self.dim() {
            return Err(Error::Retrieval(format!(
                "query width {} does not match index width {}",
                query.dim(),
                self.dim()
            )));
        }
        let q = query.normalize();
        let q = q.as_slice();
        let mut items: Vec<(String, f64)> = self
            .ids
            .iter()
            .zip(&self.rows)
            .filter(|(id, _)| Some(id.as_str()) != exclude)
            .map(|(id, row)| (id.clone(), row.iter().zip(q).map(|(a, b)| a * b).sum()))
            .collect();
        items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(RankedResult {
            query_id: query_id.to_string(),
            items,
        })
    }

    /// Ranks many queries concurrently; output order follows the input.
    pub fn rank_all(&self, queries: &[(String, LatentEmbedding, Option<String>)]) -> Result<Vec<RankedResult>> {
        par::try_map(queries, |(id, q, ex)| self.rank(id, q, ex.as_deref()))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(KIND, serde_json::json!({ "items": self.len(), "dim": self.dim() }));
        let flat: Vec<f64> = self.rows.iter().flatten().copied().collect();
        c.tensors
            .push(("latents".into(), Tensor::new(vec![self.len(), self.dim()], flat)?));
        c.strings.push(("ids".into(), self.ids.clone()));
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    /// Loads an index; rows are renormalized after the 32-bit round trip.
    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(KIND)?;
        let t = c.tensor("latents")?;
        let ids = c.string_list("ids")?.to_vec();
        if t.shape().len() != 2 || t.rows() != ids.len() {
            return Err(Error::Checkpoint("index latents do not match ids".into()));
        }
        let latents: Vec<LatentEmbedding> = (0..t.rows())
            .map(|r| LatentEmbedding::raw(Tensor::vector(t.row(r).to_vec())))
            .collect();
        Self::build(ids, &latents)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// CSV with columns `query_id,rank,item_id,score`, keeping the top `k` of
/// each result.
pub fn write_results_csv(path: &Path, results: &[RankedResult], k: usize) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "query_id,rank,item_id,score").unwrap();
    for r in results {
        for (i, (id, s)) in r.items.iter().take(k).enumerate() {
            writeln!(out, "{},{},{},{:.9}", r.query_id, i + 1, id, s).unwrap();
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
