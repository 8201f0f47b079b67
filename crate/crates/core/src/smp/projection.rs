use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, LAYER_NORM_EPS};
use crate::checkpoint::{fill_params, Container};
use crate::encoder::{Param, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub d_joint: usize,
    pub d_text: usize,
    pub dropout: f64,
}

/// φ: LN, Linear(d→4d), GeLU, Linear(4d→4d), GeLU, Linear(4d→d_text), LN.
/// Dropout acts on the two hidden activations while training.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionModule {
    pub config: ProjectionConfig,
    pub ln_in_g: Param,
    pub ln_in_b: Param,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub w3: Param,
    pub b3: Param,
    pub ln_out_g: Param,
    pub ln_out_b: Param,
}

pub(crate) struct BoundPhi {
    ids: [NodeId; 10],
}

impl BoundPhi {
    pub(crate) fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

const KIND: &str = "projection";

impl ProjectionModule {
    pub fn init(config: ProjectionConfig, seed: u64) -> Result<Self> {
        if config.d_joint == 0 || config.d_text == 0 || !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Trainer(format!("invalid projection config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, out) = (config.d_joint, 4 * config.d_joint, config.d_text);
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let rng = &mut rng;
        Ok(Self {
            config,
            ln_in_g: Param::filled("phi.ln_in.gamma", &[d], 1.0),
            ln_in_b: Param::filled("phi.ln_in.beta", &[d], 0.0),
            w1: Param::normal("phi.fc1.weight", &[d, h], std(d), rng),
            b1: Param::filled("phi.fc1.bias", &[h], 0.0),
            w2: Param::normal("phi.fc2.weight", &[h, h], std(h), rng),
            b2: Param::filled("phi.fc2.bias", &[h], 0.0),
            w3: Param::normal("phi.fc3.weight", &[h, out], std(h), rng),
            b3: Param::filled("phi.fc3.bias", &[out], 0.0),
            ln_out_g: Param::filled("phi.ln_out.gamma", &[out], 1.0),
            ln_out_b: Param::filled("phi.ln_out.beta", &[out], 0.0),
        })
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> BoundPhi {
        let p = self.params();
        BoundPhi {
            ids: std::array::from_fn(|i| p[i].bind(g)),
        }
    }

    /// Maps `[n x d_joint]` to `[n x d_text]`; dropout applies only when an
    /// rng is supplied.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundPhi,
        x: NodeId,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let [lg, lb, w1, b1, w2, b2, w3, b3, og, ob] = bound.ids;
        let rate = self.config.dropout;
        let mut drop = |g: &mut Graph, h: NodeId| match rng.as_deref_mut() {
            Some(r) => g.dropout(h, rate, r),
            None => Ok(h),
        };
        let h = g.layer_norm(x, lg, lb, LAYER_NORM_EPS)?;
        let h = g.linear(h, w1, Some(b1))?;
        let h = g.gelu(h)?;
        let h = drop(g, h)?;
        let h = g.linear(h, w2, Some(b2))?;
        let h = g.gelu(h)?;
        let h = drop(g, h)?;
        let h = g.linear(h, w3, Some(b3))?;
        g.layer_norm(h, og, ob, LAYER_NORM_EPS)
    }

    /// Inference projection of a batch `[n x d_joint]`.
    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.width() != self.config.d_joint {
            return Err(Error::Trainer(format!(
                "projection expects [n x {}], got {:?}",
                self.config.d_joint,
                z.shape()
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = g.constant(z.clone());
        let out = self.forward(&mut g, &b, x, None)?;
        Ok(g.value(out).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(KIND, serde_json::to_value(self.config)?);
        c.tensors = self
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(KIND)?;
        let config: ProjectionConfig = serde_json::from_value(c.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad projection config: {e}")))?;
        let mut phi = Self::init(config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fill_params(c, phi.params_mut())?;
        Ok(phi)
    }

    /// A φ whose every output equals `row`; used to build exact-injection
    /// fixtures.
    pub fn constant_output(config: ProjectionConfig, row: &Tensor) -> Result<Self> {
        let mut phi = Self::init(config, 0)?;
        if row.len() != config.d_text {
            return Err(Error::Trainer("constant row width must equal d_text".into()));
        }
        phi.ln_out_g.value = Tensor::zeros(&[config.d_text]);
        phi.ln_out_b.value = Tensor::vector(row.to_vec());
        Ok(phi)
    }

    /// Re-draws every weight matrix; biases and norms keep their init.
    pub fn randomize(&mut self, rng: &mut impl Rng) {
        for p in [&mut self.w1, &mut self.w2, &mut self.w3] {
            let fan_in = p.value.rows();
            let shape = p.value.shape().to_vec();
            *p = Param::normal(p.name.clone(), &shape, 1.0 / (fan_in as f64).sqrt(), rng);
        }
    }
}

impl Parameters for ProjectionModule {
    fn params(&self) -> Vec<&Param> {
        vec![
            &self.ln_in_g,
            &self.ln_in_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w3,
            &self.b3,
            &self.ln_out_g,
            &self.ln_out_b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.ln_in_g,
            &mut self.ln_in_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.ln_out_g,
            &mut self.ln_out_b,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ProjectionConfig {
        ProjectionConfig {
            d_joint: 8,
            d_text: 6,
            dropout: 0.5,
        }
    }

    #[test]
    fn layout() {
        let phi = ProjectionModule::init(cfg(), 1).unwrap();
        assert_eq!(phi.w1.value.shape(), [8, 32]);
        assert_eq!(phi.w2.value.shape(), [32, 32]);
        assert_eq!(phi.w3.value.shape(), [32, 6]);
        let out = phi.project(&Tensor::full(&[3, 8], 0.3)).unwrap();
        assert_eq!(out.shape(), [3, 6]);
    }

    #[test]
    fn output_is_layer_normed() {
        let phi = ProjectionModule::init(cfg(), 2).unwrap();
        let z = Tensor::matrix(1, 8, (0..8).map(|i| i as f64 - 3.0).collect()).unwrap();
        let out = phi.project(&z).unwrap();
        let mean: f64 = out.data().iter().sum::<f64>() / 6.0;
        let var: f64 = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn constant_output_fixture() {
        let row = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0, 0.25, 3.0]);
        let phi = ProjectionModule::constant_output(cfg(), &row).unwrap();
        let out = phi.project(&Tensor::full(&[2, 8], 1.7)).unwrap();
        assert_eq!(out.row(0), row.data());
        assert_eq!(out.row(1), row.data());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut phi = ProjectionModule::init(cfg(), 3).unwrap();
        phi.quantize();
        let bytes = phi.to_container().unwrap().to_bytes().unwrap();
        let back = ProjectionModule::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, phi);
    }
}
