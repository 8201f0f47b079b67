use rand::Rng;

use super::block::{Block, BoundBlock};
use super::{split_rows, EncoderConfig, LatentEmbedding, Param, Parameters};
use crate::autograd::{Graph, Mask, NodeId, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Patch transformer: linear patch embedding, bidirectional blocks, mean
/// pooling and a projection into the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub patch_proj: Param,
    pub patch_bias: Param,
    pub positional: Param,
    pub blocks: Vec<Block>,
    pub ln_final_g: Param,
    pub ln_final_b: Param,
    pub projection: Param,
    pub image_side: usize,
    pub patch_size: usize,
}

pub(crate) struct BoundImage {
    proj_in: NodeId,
    bias_in: NodeId,
    pos: NodeId,
    blocks: Vec<BoundBlock>,
    ln_g: NodeId,
    ln_b: NodeId,
    proj: NodeId,
}

impl BoundImage {
    /// Node ids in [`Parameters::params`] order.
    pub(crate) fn ids(&self) -> Vec<NodeId> {
        let mut v = vec![self.proj_in, self.bias_in, self.pos];
        for b in &self.blocks {
            v.extend_from_slice(b.ids());
        }
        v.extend([self.ln_g, self.ln_b, self.proj]);
        v
    }
}

const ENCODE_CHUNK: usize = 32;

impl ImageEncoder {
    pub(crate) fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_image;
        let pd = cfg.patch_dim();
        Self {
            patch_proj: Param::normal("image.patch_proj", &[pd, d], 1.0 / (pd as f64).sqrt(), rng),
            patch_bias: Param::filled("image.patch_bias", &[d], 0.0),
            positional: Param::normal("image.positional", &[cfg.patches(), d], 0.5, rng),
            blocks: (0..cfg.n_layers_image)
                .map(|l| {
                    Block::init(
                        &format!("image.blocks.{l}"),
                        d,
                        cfg.n_heads_image,
                        cfg.n_layers_image,
                        rng,
                    )
                })
                .collect(),
            ln_final_g: Param::filled("image.ln_final.gamma", &[d], 1.0),
            ln_final_b: Param::filled("image.ln_final.beta", &[d], 0.0),
            projection: Param::normal("image.projection", &[d, cfg.d_joint], 1.0 / (d as f64).sqrt(), rng),
            image_side: cfg.image_side,
            patch_size: cfg.patch_size,
        }
    }

    fn patches_per_image(&self) -> usize {
        (self.image_side / self.patch_size).pow(2)
    }

    /// Flattens an image into row-major patches of `patch * patch * 3` values.
    fn patchify(&self, image: &Tensor, out: &mut Vec<f64>) -> Result<()> {
        let side = self.image_side;
        if image.shape() != [side, side, 3] {
            return Err(Error::Encoder(format!(
                "image shape {:?}, expected [{side}, {side}, 3]",
                image.shape()
            )));
        }
        let ps = self.patch_size;
        let n = side / ps;
        let data = image.data();
        for py in 0..n {
            for px in 0..n {
                for y in 0..ps {
                    let start = ((py * ps + y) * side + px * ps) * 3;
                    out.extend_from_slice(&data[start..start + ps * 3]);
                }
            }
        }
        Ok(())
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> BoundImage {
        BoundImage {
            proj_in: self.patch_proj.bind(g),
            bias_in: self.patch_bias.bind(g),
            pos: self.positional.bind(g),
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect(),
            ln_g: self.ln_final_g.bind(g),
            ln_b: self.ln_final_b.bind(g),
            proj: self.projection.bind(g),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, bound: &BoundImage, images: &[&Tensor]) -> Result<NodeId> {
        if images.is_empty() {
            return Err(Error::Encoder("empty image batch".into()));
        }
        let p = self.patches_per_image();
        let mut flat = Vec::with_capacity(images.len() * p * self.patch_size * self.patch_size * 3);
        for img in images {
            self.patchify(img, &mut flat)?;
        }
        let pd = self.patch_size * self.patch_size * 3;
        let x = g.constant(Tensor::new(vec![images.len() * p, pd], flat)?);
        let x = g.linear(x, bound.proj_in, Some(bound.bias_in))?;
        let pos_index: Vec<(usize, usize)> = (0..images.len()).flat_map(|_| (0..p).map(|i| (0, i))).collect();
        let pos = g.gather_rows(&[bound.pos], &pos_index)?;
        let mut x = g.add(x, pos)?;
        let segments = vec![p; images.len()];
        for b in &bound.blocks {
            x = b.forward(g, x, &segments, Mask::None)?;
        }
        let x = g.layer_norm(x, bound.ln_g, bound.ln_b, LAYER_NORM_EPS)?;
        let pooled = g.segment_mean(x, &segments)?;
        g.matmul(pooled, bound.proj)
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<LatentEmbedding> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    fn encode_batch(&self, images: &[&Tensor]) -> Result<Vec<LatentEmbedding>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let out = self.forward(&mut g, &bound, images)?;
        Ok(split_rows(g.value(out)))
    }

    /// Encodes many images in fixed-size chunks, in parallel when enabled.
    pub fn encode_images(&self, images: &[Tensor]) -> Result<Vec<LatentEmbedding>> {
        let chunks = par::chunks(images.len(), ENCODE_CHUNK);
        let parts = par::try_map(&chunks, |r| {
            let batch: Vec<&Tensor> = images[r.clone()].iter().collect();
            self.encode_batch(&batch)
        })?;
        Ok(parts.into_iter().flatten().collect())
    }
}

impl Parameters for ImageEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.patch_proj, &self.patch_bias, &self.positional];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend([&self.ln_final_g, &self.ln_final_b, &self.projection]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.patch_proj, &mut self.patch_bias, &mut self.positional];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend([&mut self.ln_final_g, &mut self.ln_final_b, &mut self.projection]);
        v
    }
}
