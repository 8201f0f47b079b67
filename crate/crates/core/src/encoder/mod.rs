//! A compact frozen vision-language dual encoder trained from scratch.

mod block;
mod image;
mod pretrain;
mod text;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use block::Block;
pub use image::ImageEncoder;
pub use pretrain::{image_to_text_recall_at_1, pretrain_contrastive, PretrainConfig, PretrainReport};
pub use text::{RowSource, TextEncoder, TextInput};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_text: usize,
    pub n_layers_text: usize,
    pub n_heads_text: usize,
    pub max_seq_len: usize,
    pub d_image: usize,
    pub n_layers_image: usize,
    pub n_heads_image: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub d_joint: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_text: 64,
            n_layers_text: 2,
            n_heads_text: 4,
            max_seq_len: 32,
            d_image: 64,
            n_layers_image: 1,
            n_heads_image: 4,
            patch_size: 8,
            image_side: 24,
            d_joint: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Encoder(m));
        if self.d_text == 0 || self.n_heads_text == 0 || !self.d_text.is_multiple_of(self.n_heads_text) {
            return bad(format!(
                "d_text {} not divisible by {} heads",
                self.d_text, self.n_heads_text
            ));
        }
        if self.d_image == 0 || self.n_heads_image == 0 || !self.d_image.is_multiple_of(self.n_heads_image) {
            return bad(format!(
                "d_image {} not divisible by {} heads",
                self.d_image, self.n_heads_image
            ));
        }
        if self.patch_size == 0 || !self.image_side.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image side {} not divisible by patch {}",
                self.image_side, self.patch_size
            ));
        }
        if self.d_joint == 0 || self.max_seq_len < 2 || self.vocab_size < crate::text::RESERVED.len() {
            return bad("d_joint, max_seq_len or vocab_size too small".into());
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.image_side / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// A named parameter tensor. Frozen parameters enter graphs as constants and
/// reject optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            frozen: false,
        }
    }

    pub(crate) fn normal(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
        Self::new(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn filled(name: impl Into<String>, shape: &[usize], v: f64) -> Self {
        Self::new(name, Tensor::full(shape, v))
    }

    /// Adds the parameter to `g`, differentiable unless frozen.
    pub fn bind(&self, g: &mut Graph) -> NodeId {
        if self.frozen {
            g.constant(self.value.clone())
        } else {
            g.param(self.value.clone())
        }
    }
}

/// Anything that owns an ordered list of parameters.
pub trait Parameters {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn freeze(&mut self) {
        for p in self.params_mut() {
            p.frozen = true;
        }
    }

    fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| p.frozen)
    }

    /// Rounds every value through `f32` so memory matches a saved checkpoint.
    fn quantize(&mut self) {
        for p in self.params_mut() {
            p.value = p.value.quantize_f32();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// An encoder output in the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEmbedding {
    pub values: Tensor,
    pub normalized: bool,
}

impl LatentEmbedding {
    pub fn raw(values: Tensor) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn normalize(&self) -> Self {
        let n = self.values.l2_norm().max(1e-12);
        Self {
            values: self.values.map(|v| v / n),
            normalized: true,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.data()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &LatentEmbedding) -> f64 {
        let (a, b) = (self.values.data(), other.values.data());
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (self.values.l2_norm() * other.values.l2_norm()).max(1e-300)
    }
}

/// Splits a `[n x d]` tensor into per-row latents.
pub(crate) fn split_rows(t: &Tensor) -> Vec<LatentEmbedding> {
    (0..t.rows())
        .map(|r| LatentEmbedding::raw(Tensor::vector(t.row(r).to_vec())))
        .collect()
}

/// The frozen text and image towers with their shared configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    /// Learnable log inverse temperature of the contrastive loss.
    pub logit_scale: Param,
}

impl DualEncoder {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let text = TextEncoder::init(&config, &mut rng);
        let image = ImageEncoder::init(&config, &mut rng);
        let logit_scale = Param::new("logit_scale", Tensor::scalar((1.0f64 / 0.07).ln()));
        Ok(Self {
            config,
            text,
            image,
            logit_scale,
        })
    }
}

impl Parameters for DualEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.text.params();
        v.extend(self.image.params());
        v.push(&self.logit_scale);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.text.params_mut();
        v.extend(self.image.params_mut());
        v.push(&mut self.logit_scale);
        v
    }
}
